"""Chunked filtering and classification of candidate CUIs via a chat model.

Replies must be strict JSON against a closed candidate universe; invalid
replies are re-asked with a corrective note, then logged as chunk failures.
A deterministic mock provider (keyword matching, two strictness profiles)
makes the whole pipeline reproducible offline.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence, TypeVar

from .errors import ClassConflictError, OutOfUniverseError, ProviderError, SchemaValidationError
from .retrieval import TargetConcept
from .rrf import CUI_PATTERN, Cui

T = TypeVar("T")

DEFAULT_CHUNK_SIZE = 50

FILTER_PROMPT_TEMPLATE = """You are a biomedical assistant working with a UMLS-based knowledge graph.

Task: Filter the CUIs provided below that should reasonably be considered to indicate the target concept.

Include if:

1) It directly denotes the target concept or is a clinically equivalent synonym.
2) It is a subtype/child that is commonly subsumed by the target concept without additional qualifiers.
3) It is a closely bound variant naming (spelling variants, common aliases).
4) It is a procedure, therapy, medication, lab/test, measurement, risk factor, aetiology, complication, manifestation, generic finding, or care event (e.g., specialty clinic attendance, disease-management programs, surgery admissions) that is widely recognised as a proxy or near-unique indicator of the target concept.

Exclude if:

1) It is a generic parent/container concept that is not commonly used as the disease name.
2) It expresses only suspicion, family history, or negation of the target concept.
3) It is clearly unrelated or ambiguous.

Prefer inclusion to preserve recall for direct assertion concepts. For conditional categories in 4), include only when specificity is high; if uncertain about specificity, exclude.

Target concept: {concept_name} (CUI: {concept_cui})

Target concept description/aliases: {target_description}

Special include/exclude instructions: {special_instructions}

OUTPUT FORMAT (strict):

- Return ONLY valid JSON with exactly one key: "selected_cuis".
- "selected_cuis" MUST be an array of CUIs (strings matching ^C\\d{{7}}$).
- You may ONLY output CUIs from the provided candidate list below.
- No prose, no comments, no extra keys.
- De-duplicate and sort CUIs ascending for stability.

Candidates:

{candidate_lines}"""

CLASSIFY_EXAMPLE_REPLY = """{
  "definitive": ["C0000001", "C0000002"],
  "context_dependent": ["C0000003"]
}"""

CLASSIFY_PROMPT_TEMPLATE = """You are a biomedical assistant working with UMLS CUIs.

Task: Classify every provided CUI listed below into exactly one of the categories as defined below.

Rules:

1) "definitive": direct, unambiguous assertion of the target concept (or strict synonyms).
2) "context_dependent": modifiers, tests, measurements, risk factors, causes, complications, manifestations; include parents only if the term is commonly used to refer to the target concept; subtypes that need qualifiers.
3) Tie-breakers: when uncertain, prefer "context_dependent"; choose specific assertion over generic parent.
4) No omissions, no duplicates.

Target concept: {target_description}

Few-shot examples: {fewshots}

Return ONLY valid JSON with exactly these keys: "definitive" and "context_dependent".
Values MUST be arrays of CUIs (strings like "C1234567") drawn ONLY from the provided list.
Do NOT include names, comments, or extra keys.

Example:

{example}

CUIs:

{candidate_lines}"""

CORRECTION_NOTE = (
    "\n\nSYSTEM NOTE: your previous reply was rejected ({error}). "
    "Return ONLY valid JSON exactly matching the OUTPUT FORMAT above."
)


def chunk(items: Sequence[T], size: int) -> list[list[T]]:
    """Order-preserving partition; the last chunk may be short."""
    if size < 1:
        raise ValueError("chunk size must be >= 1")
    return [list(items[i : i + size]) for i in range(0, len(items), size)]


def render_fewshots(fewshots: Mapping[str, Sequence[str]]) -> str:
    if not fewshots:
        return "none"
    lines = []
    for label in ("definitive", "context_dependent"):
        examples = fewshots.get(label)
        if examples:
            lines.append(f"{label}: {'; '.join(examples)}")
    return "\n".join(lines) if lines else "none"


def _candidate_lines(pairs: Sequence[tuple[Cui, str]]) -> str:
    return "\n".join(f"{cui}: {name}" for cui, name in pairs)


def render_filter_prompt(
    pairs: Sequence[tuple[Cui, str]], target: TargetConcept
) -> str:
    """Instantiate the filtering prompt; byte-stable for fixed inputs."""
    if not pairs:
        raise ValueError("chunk must be non-empty")
    if not target.name or not target.target_cui:
        raise ValueError("target name and target_cui are required for prompting")
    return FILTER_PROMPT_TEMPLATE.format(
        concept_name=target.name,
        concept_cui=target.target_cui,
        target_description=target.description,
        special_instructions=target.special_instructions or "none",
        candidate_lines=_candidate_lines(pairs),
    )


def render_classify_prompt(
    pairs: Sequence[tuple[Cui, str]], target: TargetConcept
) -> str:
    if not pairs:
        raise ValueError("chunk must be non-empty")
    return CLASSIFY_PROMPT_TEMPLATE.format(
        target_description=target.description,
        fewshots=render_fewshots(target.fewshots),
        example=CLASSIFY_EXAMPLE_REPLY,
        candidate_lines=_candidate_lines(pairs),
    )


@dataclass
class ParsedReply:
    selected: list[Cui] = field(default_factory=list)
    definitive: list[Cui] = field(default_factory=list)
    context_dependent: list[Cui] = field(default_factory=list)
    dropped: list[Cui] = field(default_factory=list)


def _parse_cui_array(value: object, key: str) -> list[Cui]:
    if not isinstance(value, list):
        raise SchemaValidationError(f'"{key}" must be an array')
    cuis: list[Cui] = []
    for item in value:
        if not isinstance(item, str) or not CUI_PATTERN.match(item):
            raise SchemaValidationError(f'"{key}" contains a malformed CUI: {item!r}')
        cuis.append(item)
    return sorted(set(cuis))


def _screen_universe(
    cuis: list[Cui], allowed: set[Cui], drop_policy: str
) -> tuple[list[Cui], list[Cui]]:
    inside = [c for c in cuis if c in allowed]
    outside = [c for c in cuis if c not in allowed]
    if outside and drop_policy != "lenient":
        raise OutOfUniverseError(f"CUIs outside the candidate universe: {outside}")
    return inside, outside


def validate_response(
    raw: str,
    allowed: set[Cui],
    schema: str,
    drop_policy: str = "lenient",
) -> ParsedReply:
    """Parse and validate a model reply against the candidate universe.

    Filter schema expects exactly {"selected_cuis": [...]}; classify expects
    exactly {"definitive": [...], "context_dependent": [...]} with disjoint
    arrays.  Extra keys, prose, or malformed CUIs are schema errors; CUIs
    outside `allowed` are dropped under the lenient policy, fatal otherwise.
    """
    if schema not in ("filter", "classify"):
        raise ValueError(f"unknown schema {schema!r}")
    try:
        payload = json.loads(raw.strip())
    except json.JSONDecodeError as exc:
        raise SchemaValidationError(f"reply is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise SchemaValidationError("reply must be a JSON object")

    if schema == "filter":
        if set(payload.keys()) != {"selected_cuis"}:
            raise SchemaValidationError(
                f'filter reply must have exactly one key "selected_cuis", got {sorted(payload)}'
            )
        cuis = _parse_cui_array(payload["selected_cuis"], "selected_cuis")
        inside, outside = _screen_universe(cuis, allowed, drop_policy)
        return ParsedReply(selected=inside, dropped=outside)

    if set(payload.keys()) != {"definitive", "context_dependent"}:
        raise SchemaValidationError(
            'classify reply must have exactly the keys "definitive" and'
            f' "context_dependent", got {sorted(payload)}'
        )
    definitive = _parse_cui_array(payload["definitive"], "definitive")
    context = _parse_cui_array(payload["context_dependent"], "context_dependent")
    conflict = set(definitive) & set(context)
    if conflict:
        raise ClassConflictError(f"CUIs assigned to both classes: {sorted(conflict)}")
    inside_d, out_d = _screen_universe(definitive, allowed, drop_policy)
    inside_c, out_c = _screen_universe(context, allowed, drop_policy)
    return ParsedReply(definitive=inside_d, context_dependent=inside_c, dropped=out_d + out_c)


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


@dataclass
class ChatResult:
    text: str
    prompt_tokens: int
    completion_tokens: int


class ChatProvider(Protocol):
    name: str
    model: str
    kind: str

    def complete(self, prompt: str) -> ChatResult: ...


_TOKEN_RE = re.compile(r"[a-z0-9]{3,}")
_CANDIDATE_LINE_RE = re.compile(r"^(C\d{7}): (.*)$", re.MULTILINE)
_TARGET_LINE_RE = re.compile(r"^Target concept: (.*) \(CUI: (C\d{7})\)$", re.MULTILINE)
_DESCRIPTION_RE = re.compile(
    r"Target concept description/aliases: (.*?)\n\nSpecial include/exclude instructions:",
    re.DOTALL,
)
_FEWSHOT_RE = re.compile(r"Few-shot examples: (.*?)\n\nReturn ONLY valid JSON", re.DOTALL)


def _tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


class MockChatProvider:
    """Deterministic offline stand-in for a chat model.

    The "permissive" profile selects any candidate whose name shares a
    keyword with the target description (recall-oriented); the "strict"
    profile requires overlap with the target concept name itself
    (precision-oriented).  Classification follows the definitive few-shot
    examples.  Identical input always produces identical output.
    """

    kind = "deterministic-mock"

    def __init__(self, profile: str = "permissive", model: str | None = None):
        if profile not in ("permissive", "strict"):
            raise ValueError(f"unknown mock profile {profile!r}")
        self.profile = profile
        self.model = model or f"mock-{profile}"
        self.name = f"mock-{profile}"

    def complete(self, prompt: str) -> ChatResult:
        candidates = _CANDIDATE_LINE_RE.findall(prompt)
        if '"selected_cuis"' in prompt:
            reply = self._filter_reply(prompt, candidates)
        else:
            reply = self._classify_reply(prompt, candidates)
        return ChatResult(
            text=reply,
            prompt_tokens=math.ceil(len(prompt) / 4),
            completion_tokens=math.ceil(len(reply) / 4),
        )

    def _filter_reply(self, prompt: str, candidates: list[tuple[str, str]]) -> str:
        description = _DESCRIPTION_RE.search(prompt)
        query_tokens = _tokens(description.group(1)) if description else set()
        if self.profile == "strict":
            target = _TARGET_LINE_RE.search(prompt)
            query_tokens = _tokens(target.group(1)) if target else set()
        selected = sorted(
            cui for cui, name in candidates if _tokens(name) & query_tokens
        )
        return json.dumps({"selected_cuis": selected}, indent=2)

    def _classify_reply(self, prompt: str, candidates: list[tuple[str, str]]) -> str:
        fewshots = _FEWSHOT_RE.search(prompt)
        definitive_tokens: set[str] = set()
        if fewshots:
            for line in fewshots.group(1).splitlines():
                if line.startswith("definitive:"):
                    definitive_tokens = _tokens(line.split(":", 1)[1])
        definitive = sorted(
            cui for cui, name in candidates if _tokens(name) & definitive_tokens
        )
        context = sorted(cui for cui, _ in candidates if cui not in set(definitive))
        return json.dumps(
            {"definitive": definitive, "context_dependent": context}, indent=2
        )


class RemoteChatProvider:
    """OpenAI-compatible /chat/completions client."""

    kind = "remote-api"

    def __init__(
        self,
        model: str,
        api_base: str = "https://api.openai.com/v1",
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 120.0,
        options: dict | None = None,
    ):
        self.model = model
        self.api_base = api_base.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        # Sampling controls pass through untouched; none are set by default.
        self.options = dict(options or {})
        self.name = f"remote-{model}"

    def complete(self, prompt: str) -> ChatResult:
        import httpx

        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise ProviderError(f"environment variable {self.api_key_env} is not set")
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            **self.options,
        }
        response = httpx.post(
            f"{self.api_base}/chat/completions",
            json=body,
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=self.timeout,
        )
        if response.status_code != 200:
            raise ProviderError(
                f"chat endpoint returned {response.status_code}: {response.text[:200]}"
            )
        payload = response.json()
        usage = payload.get("usage", {})
        return ChatResult(
            text=payload["choices"][0]["message"]["content"],
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


# ---------------------------------------------------------------------------
# Curation runs
# ---------------------------------------------------------------------------


@dataclass
class Pricing:
    """Per-token rates in currency units."""

    rate_in: float = 0.0
    rate_out: float = 0.0


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float = 0.0
    wall_time: float = 0.0

    def add(self, result: ChatResult, pricing: Pricing) -> None:
        self.prompt_tokens += result.prompt_tokens
        self.completion_tokens += result.completion_tokens
        self.cost += (
            result.prompt_tokens * pricing.rate_in
            + result.completion_tokens * pricing.rate_out
        )


@dataclass
class CurationConfig:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    retries: int = 3
    n_runs: int = 1
    drop_policy: str = "lenient"
    pricing: Pricing = field(default_factory=Pricing)

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass
class CuratedSet:
    target_id: str
    run_id: int
    selected: list[Cui]
    definitive: list[Cui]
    context_dependent: list[Cui]
    usage: Usage
    chunk_failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "run_id": self.run_id,
            "selected": self.selected,
            "definitive": self.definitive,
            "context_dependent": self.context_dependent,
            "usage": {
                "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens,
                "cost": self.usage.cost,
            },
            "chunk_failures": self.chunk_failures,
        }

    def content_bytes(self) -> bytes:
        """Canonical serialization of the curated content, excluding the run
        number and wall time, for byte-level run-to-run comparison."""
        payload = self.to_dict()
        payload.pop("run_id")
        return json.dumps(payload, sort_keys=True).encode("utf-8")


class _AuditLog:
    def __init__(self, root: Path | None):
        self.root = root
        if root:
            root.mkdir(parents=True, exist_ok=True)

    def write(self, run_id: int, stage: str, chunk_no: int, attempt: int, prompt: str, reply: str) -> None:
        if not self.root:
            return
        base = self.root / f"run{run_id:02d}"
        base.mkdir(exist_ok=True)
        stem = f"{stage}_chunk{chunk_no:03d}_attempt{attempt}"
        (base / f"{stem}.prompt.txt").write_text(prompt, encoding="utf-8")
        (base / f"{stem}.reply.txt").write_text(reply, encoding="utf-8")


def _ask_validated(
    provider: ChatProvider,
    prompt: str,
    allowed: set[Cui],
    schema: str,
    cfg: CurationConfig,
    usage: Usage,
    log: _AuditLog,
    run_id: int,
    chunk_no: int,
) -> ParsedReply | None:
    """One chunk round-trip with schema-error retries; None when exhausted."""
    current = prompt
    for attempt in range(cfg.retries + 1):
        result = provider.complete(current)
        usage.add(result, cfg.pricing)
        log.write(run_id, schema, chunk_no, attempt, current, result.text)
        try:
            return validate_response(result.text, allowed, schema, cfg.drop_policy)
        except SchemaValidationError as exc:
            current = prompt + CORRECTION_NOTE.format(error=exc)
    return None


def curate(
    pairs: Sequence[tuple[Cui, str]],
    target: TargetConcept,
    provider: ChatProvider,
    cfg: CurationConfig | None = None,
    log_dir: str | Path | None = None,
) -> list[CuratedSet]:
    """Run filtering then classification `n_runs` times over the candidates.

    `pairs` is the candidate universe as (cui, preferred name), in retrieval
    order.  Each run filters every chunk, unions and sorts the selections,
    then classifies the union in fresh chunks.  Runs are independent; a
    chunk that keeps failing validation contributes nothing and is logged.
    CUIs the classification reply omits fall back to context_dependent.
    """
    cfg = cfg or CurationConfig()
    log = _AuditLog(Path(log_dir) if log_dir else None)
    universe = {cui for cui, _ in pairs}
    name_of = dict(pairs)
    runs: list[CuratedSet] = []

    for run_id in range(1, cfg.n_runs + 1):
        usage = Usage()
        failures: list[str] = []
        started = time.perf_counter()

        selected: set[Cui] = set()
        for chunk_no, part in enumerate(chunk(list(pairs), cfg.chunk_size)):
            prompt = render_filter_prompt(part, target)
            allowed = {cui for cui, _ in part}
            reply = _ask_validated(
                provider, prompt, allowed, "filter", cfg, usage, log, run_id, chunk_no
            )
            if reply is None:
                failures.append(f"filter chunk {chunk_no}")
                continue
            selected.update(reply.selected)

        ordered = sorted(selected)
        definitive: set[Cui] = set()
        context: set[Cui] = set()
        if ordered:
            selected_pairs = [(cui, name_of[cui]) for cui in ordered]
            for chunk_no, part in enumerate(chunk(selected_pairs, cfg.chunk_size)):
                prompt = render_classify_prompt(part, target)
                allowed = {cui for cui, _ in part}
                reply = _ask_validated(
                    provider, prompt, allowed, "classify", cfg, usage, log, run_id, chunk_no
                )
                if reply is None:
                    failures.append(f"classify chunk {chunk_no}")
                    continue
                definitive.update(reply.definitive)
                context.update(reply.context_dependent)

        # Partition invariant: every selected CUI lands in exactly one class.
        context.update(set(ordered) - definitive - context)
        usage.wall_time = time.perf_counter() - started
        runs.append(
            CuratedSet(
                target_id=target.id,
                run_id=run_id,
                selected=ordered,
                definitive=sorted(definitive),
                context_dependent=sorted(context),
                usage=usage,
                chunk_failures=failures,
            )
        )
    return runs
