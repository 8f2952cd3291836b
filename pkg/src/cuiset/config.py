"""Pipeline configuration: one YAML file drives every CLI stage."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .curation import CurationConfig, Pricing
from .graph import DEFAULT_SEMANTIC_TYPES
from .retrieval import RetrievalConfig


@dataclass
class EmbeddingSettings:
    provider: str = "local"  # local | remote
    dimension: int = 256
    seed: int = 0
    model: str = "text-embedding-3-large"
    api_base: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    batch_size: int = 64
    max_in_flight: int = 1


@dataclass
class ChatSettings:
    provider: str = "mock-permissive"  # mock-permissive | mock-strict | remote
    model: str = "gpt-5-mini"
    api_base: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    options: dict = field(default_factory=dict)


@dataclass
class ReviewSettings:
    annotator_tokens: dict[str, str] = field(default_factory=dict)
    resolver_token: str | None = None
    resolver_id: str = "resolver"
    host: str = "127.0.0.1"
    port: int = 8787


@dataclass
class PipelineConfig:
    rrf_dir: Path = Path("fixture")
    run_dir: Path = Path("runs/dev")
    targets_file: Path | None = None
    manual_dir: Path | None = None
    gold_dir: Path | None = None
    vocabularies: tuple[str, ...] = ("SNOMEDCT_US", "NCI", "MSH")
    language: str = "ENG"
    semantic_types: frozenset[str] = DEFAULT_SEMANTIC_TYPES
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    chat: ChatSettings = field(default_factory=ChatSettings)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    review: ReviewSettings = field(default_factory=ReviewSettings)

    def rrf_file(self, name: str) -> Path:
        return self.rrf_dir / f"{name}.RRF"


def load_config(path: str | Path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    base = Path(path).parent

    def respath(value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    cfg = PipelineConfig()
    if "rrf_dir" in raw:
        cfg.rrf_dir = respath(raw["rrf_dir"])
    if "run_dir" in raw:
        cfg.run_dir = respath(raw["run_dir"])
    cfg.targets_file = respath(raw.get("targets_file"))
    cfg.manual_dir = respath(raw.get("manual_dir"))
    cfg.gold_dir = respath(raw.get("gold_dir"))
    if "vocabularies" in raw:
        cfg.vocabularies = tuple(raw["vocabularies"])
    if "language" in raw:
        cfg.language = raw["language"]
    if "semantic_types" in raw:
        cfg.semantic_types = frozenset(raw["semantic_types"])

    emb = raw.get("embedding", {})
    cfg.embedding = EmbeddingSettings(**{**cfg.embedding.__dict__, **emb})
    chat = raw.get("chat", {})
    cfg.chat = ChatSettings(**{**cfg.chat.__dict__, **chat})

    ret = raw.get("retrieval", {})
    cfg.retrieval = RetrievalConfig(
        k=ret.get("k", 500),
        hops=ret.get("hops", 0),
        max_neighbours=ret.get("max_neighbours", 350),
        child_depth=ret.get("child_depth", 1),
        semantic_types=frozenset(ret.get("semantic_types", cfg.semantic_types)),
    )

    cur = raw.get("curation", {})
    pricing = cur.get("pricing", {})
    cfg.curation = CurationConfig(
        chunk_size=cur.get("chunk_size", 50),
        retries=cur.get("retries", 3),
        n_runs=cur.get("runs", 1),
        drop_policy=cur.get("drop_policy", "lenient"),
        pricing=Pricing(
            rate_in=pricing.get("rate_in", 0.0), rate_out=pricing.get("rate_out", 0.0)
        ),
    )

    rev = raw.get("review", {})
    cfg.review = ReviewSettings(
        annotator_tokens=rev.get("annotator_tokens", {}),
        resolver_token=rev.get("resolver_token"),
        resolver_id=rev.get("resolver_id", "resolver"),
        host=rev.get("host", "127.0.0.1"),
        port=rev.get("port", 8787),
    )
    return cfg
