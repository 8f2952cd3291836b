"""Synthetic RRF fixture generation.

Real terminology releases are licensed, so tests run on generated
MRCONSO/MRREL/MRDEF/MRSTY files with a known topology: a random tree of
generic concepts plus planted target-concept clusters whose members carry
distinctive keyword stems.  The accompanying manifest records every count
a parser or graph builder should recover, plus planted gold-standard and
manual concept sets for the retrieval and curation tests.

Stem pools are disjoint by construction: generic concept names, cluster
member names, and query-text filler never share tokens, so keyword-driven
retrieval and mock curation behave predictably.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

ALLOWED_VOCABULARIES = ("SNOMEDCT_US", "NCI", "MSH")

DEFAULT_SEMANTIC_TYPES = (
    "Disease or Syndrome",
    "Pathologic Function",
    "Diagnostic Procedure",
    "Health Care Activity",
    "Finding",
    "Laboratory or Test Result",
)

EXCLUDED_SEMANTIC_TYPES = ("Organism", "Intellectual Product", "Manufactured Object")

_ONSETS = [
    "bar", "cor", "del", "fen", "gal", "hur", "jol", "kel", "mor", "nar",
    "pel", "quar", "ros", "sil", "tor", "ul", "ver", "wex", "yor", "zan",
]
_MIDS = ["av", "eb", "id", "ol", "ub", "ar", "en", "is", "or", "ut"]
_GENERIC_CODAS = ["ine", "osis", "ium", "alix", "exa", "onis"]
_CLUSTER_CODAS = ["opsis", "antha", "urna", "axis"]

# Primary/synonym keyword stems for planted targets, two per target.
_KEYWORDS = [
    "velquarsis", "zorbitrax", "flurotide", "quenzamab",
    "marvicosis", "noxilient", "grelathane", "thalverine",
    "ombrexitol", "pyrravance", "duskarnine", "wilfoxetine",
]


def _stem_pool(codas: list[str]) -> list[str]:
    return [o + m + c for o in _ONSETS for m in _MIDS for c in codas]


GENERIC_STEMS = _stem_pool(_GENERIC_CODAS)
CLUSTER_STEMS = _stem_pool(_CLUSTER_CODAS)


@dataclass
class FixtureParams:
    """Knobs controlling fixture shape; defaults suit the standard tests."""

    n_targets: int = 2
    cluster_size: int = 18
    synonym_rate: float = 0.6
    definition_rate: float = 0.6
    cross_link_rate: float = 0.25
    inverse_row_rate: float = 0.5
    excluded_type_rate: float = 0.18
    noise_atoms: int = 6
    dangling_relations: int = 2
    self_loops: int = 2
    manual_fraction: float = 0.7


@dataclass
class _Concept:
    index: int
    cui: str
    name: str
    synonyms: list[str] = field(default_factory=list)
    definition: str | None = None
    definitions: list[tuple[str, str]] = field(default_factory=list)  # (sab, text)
    semantic_types: list[str] = field(default_factory=list)
    vocab: str = "SNOMEDCT_US"


def _cui(i: int) -> str:
    return f"C{i + 1:07d}"


def generate_fixture(
    out_dir: str | Path,
    seed: int = 7,
    n_concepts: int = 600,
    params: FixtureParams | None = None,
) -> dict:
    """Write a synthetic RRF file set plus manifest; returns the manifest.

    Deterministic for a fixed (seed, n_concepts, params). Emitted files are
    byte-identical across runs and reparse to exactly the manifest counts.
    """
    if n_concepts < 1:
        raise ValueError("n_concepts must be >= 1")
    params = params or FixtureParams()
    rng = random.Random(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cluster_block = params.cluster_size + 1
    max_targets = max(0, (n_concepts - 10) // cluster_block)
    n_targets = min(params.n_targets, max_targets)

    member_stems = CLUSTER_STEMS[:]
    rng.shuffle(member_stems)
    stem_cursor = 0

    def next_member_stem() -> str:
        nonlocal stem_cursor
        stem = member_stems[stem_cursor % len(member_stems)]
        stem_cursor += 1
        return stem

    concepts: list[_Concept] = []
    hier_edges: set[tuple[int, int]] = set()   # parent -> child, by index
    cross_edges: set[tuple[int, int]] = set()  # unordered, stored (lo, hi)
    targets: list[dict] = []

    cluster_indexes: set[int] = set()
    for t in range(n_targets):
        start = t * cluster_block
        cluster_indexes.update(range(start, start + cluster_block))
    generic_indexes = [i for i in range(n_concepts) if i not in cluster_indexes]

    # Generic concepts: random recursive tree over generic indexes.
    for pos, i in enumerate(generic_indexes):
        stems = rng.sample(GENERIC_STEMS, 2)
        name = stems[0] if rng.random() < 0.3 else f"{stems[0]} {stems[1]}"
        c = _Concept(index=i, cui=_cui(i), name=name)
        c.vocab = ALLOWED_VOCABULARIES[i % len(ALLOWED_VOCABULARIES)]
        if rng.random() < params.excluded_type_rate:
            c.semantic_types = [rng.choice(EXCLUDED_SEMANTIC_TYPES)]
        else:
            c.semantic_types = [rng.choice(DEFAULT_SEMANTIC_TYPES)]
            if rng.random() < 0.2:
                extra = rng.choice(DEFAULT_SEMANTIC_TYPES)
                if extra not in c.semantic_types:
                    c.semantic_types.append(extra)
        if rng.random() < params.synonym_rate:
            c.synonyms.append(f"{rng.choice(GENERIC_STEMS)} {stems[0]}")
        if rng.random() < params.definition_rate:
            c.definitions.append(
                (c.vocab, f"{name} denotes a {rng.choice(GENERIC_STEMS)} pattern of the {rng.choice(GENERIC_STEMS)} region.")
            )
        concepts.append(c)
        if pos > 0:
            parent = generic_indexes[rng.randrange(pos)]
            hier_edges.add((parent, i))

    # Planted clusters: root + members named with target keywords.
    for t in range(n_targets):
        kw = _KEYWORDS[(2 * t) % len(_KEYWORDS)]
        kw2 = _KEYWORDS[(2 * t + 1) % len(_KEYWORDS)]
        start = t * cluster_block
        root_idx = start
        root_stem = next_member_stem()
        root = _Concept(index=root_idx, cui=_cui(root_idx), name=f"{kw} {root_stem}")
        root.vocab = ALLOWED_VOCABULARIES[root_idx % len(ALLOWED_VOCABULARIES)]
        root.semantic_types = ["Disease or Syndrome"]
        root.definitions.append(
            (root.vocab, f"{root.name} is the canonical {kw} condition, also reported as {kw2}.")
        )
        concepts.append(root)
        if generic_indexes:
            hier_edges.add((rng.choice(generic_indexes), root_idx))

        gold: list[dict] = [{"cui": root.cui, "class": "definitive"}]
        cluster_members = [root_idx]
        definitive_names = [root.name]
        context_names: list[str] = []

        for j in range(1, cluster_block):
            idx = start + j
            stem = next_member_stem()
            roll = rng.random()
            if roll < 0.22:
                # Synonym-variant member: kw2 name, context-dependent class.
                name = f"{kw2} {stem}" if rng.random() < 0.5 else f"{stem} {kw2}"
                label = "context_dependent"
            else:
                name = f"{kw} {stem}" if rng.random() < 0.6 else f"{stem} {kw}"
                label = "definitive"
            member = _Concept(index=idx, cui=_cui(idx), name=name)
            member.vocab = ALLOWED_VOCABULARIES[idx % len(ALLOWED_VOCABULARIES)]

            excluded = rng.random() < 0.08
            if excluded:
                member.semantic_types = [rng.choice(EXCLUDED_SEMANTIC_TYPES)]
            else:
                member.semantic_types = [rng.choice(DEFAULT_SEMANTIC_TYPES)]

            attach_roll = rng.random()
            if attach_roll < 0.6:
                parent = root_idx
            elif attach_roll < 0.8 and len(cluster_members) > 1:
                parent = rng.choice(cluster_members[1:])
            else:
                # Off-tree member: reachable only through embedding similarity.
                parent = rng.choice(generic_indexes) if generic_indexes else root_idx
            if parent != idx:
                hier_edges.add((parent, idx))

            if rng.random() < params.synonym_rate:
                member.synonyms.append(f"{kw} {next_member_stem()}")
            if rng.random() < params.definition_rate:
                member.definitions.append(
                    (member.vocab, f"{name} presents as a {kw} manifestation with {stem} features.")
                )
            concepts.append(member)
            cluster_members.append(idx)
            if not excluded:
                gold.append({"cui": member.cui, "class": label})
                if label == "definitive":
                    definitive_names.append(name)
                else:
                    context_names.append(name)

        fewshot_def = definitive_names[:2]
        fewshot_ctx = context_names[:2] or [f"{kw2} finding"]
        description = (
            f"{root.name}, also described as {kw} condition or {kw2} state. "
            f"Recorded variants include chronic {kw}, recurrent {kw}, {kw2} presentation, "
            f"and related {kw} findings across care settings.\n"
            "Include:\n"
            f"- concepts describing episodes or care events of {root.name}.\n"
            f"- subtypes and named variants containing {kw} or {kw2}.\n"
            "Exclude:\n"
            f"- concepts without any {kw} or {kw2} component.\n"
            "Classification few shots:\n"
            f"definitive: {'; '.join(fewshot_def)}\n"
            f"context_dependent: {'; '.join(fewshot_ctx)}"
        )
        special = (
            f"Prefer direct {kw} assertions; treat purely {kw2}-adjacent findings "
            f"as context dependent."
        )
        gold_sorted = sorted(gold, key=lambda g: g["cui"])
        n_manual = max(1, int(round(params.manual_fraction * len(gold_sorted))))
        manual = sorted(rng.sample([g["cui"] for g in gold_sorted], n_manual))
        targets.append(
            {
                "id": f"target-{t + 1}-{kw}",
                "name": root.name,
                "target_cui": root.cui,
                "description": description,
                "special_instructions": special,
                "fewshots": {
                    "definitive": fewshot_def,
                    "context_dependent": fewshot_ctx,
                },
                "gold": gold_sorted,
                "manual": manual,
            }
        )

    concepts.sort(key=lambda c: c.index)

    # Cross links between pairs not already related hierarchically.
    n_cross = int(params.cross_link_rate * n_concepts)
    attempts = 0
    while len(cross_edges) < n_cross and attempts < 20 * n_cross and n_concepts > 1:
        attempts += 1
        a, b = rng.randrange(n_concepts), rng.randrange(n_concepts)
        if a == b:
            continue
        lo, hi = min(a, b), max(a, b)
        if (a, b) in hier_edges or (b, a) in hier_edges or (lo, hi) in cross_edges:
            continue
        cross_edges.add((lo, hi))

    # ---- emit MRCONSO ------------------------------------------------
    conso_lines: list[str] = []
    atoms_expected = 0
    for c in concepts:
        conso_lines.append(_mrconso_line(c.cui, "ENG", "P", "PF", "Y", c.vocab, c.name, "N"))
        atoms_expected += 1
        for syn in c.synonyms:
            conso_lines.append(_mrconso_line(c.cui, "ENG", "S", "VO", "N", c.vocab, syn, "N"))
            atoms_expected += 1

    noise_filtered = 0
    noise_suppressed = 0
    for k in range(params.noise_atoms):
        c = concepts[rng.randrange(len(concepts))]
        kind = k % 3
        if kind == 0:
            conso_lines.append(_mrconso_line(c.cui, "FRE", "S", "VO", "N", c.vocab, f"{c.name} fr", "N"))
            noise_filtered += 1
        elif kind == 1:
            conso_lines.append(_mrconso_line(c.cui, "ENG", "S", "VO", "N", "ICD10", f"{c.name} icd", "N"))
            noise_filtered += 1
        else:
            conso_lines.append(_mrconso_line(c.cui, "ENG", "S", "VO", "N", c.vocab, f"{c.name} obs", "O"))
            noise_suppressed += 1

    # ---- emit MRREL --------------------------------------------------
    rel_lines: list[str] = []
    relations_expected = 0
    vocab_cycle = 0

    def rel_sab() -> str:
        nonlocal vocab_cycle
        vocab_cycle += 1
        return ALLOWED_VOCABULARIES[vocab_cycle % len(ALLOWED_VOCABULARIES)]

    for parent, child in sorted(hier_edges):
        rel_lines.append(_mrrel_line(_cui(parent), "CHD", _cui(child), "isa", rel_sab()))
        relations_expected += 1
        if rng.random() < params.inverse_row_rate:
            rel_lines.append(_mrrel_line(_cui(child), "PAR", _cui(parent), "inverse_isa", rel_sab()))
            relations_expected += 1
    for lo, hi in sorted(cross_edges):
        rel_lines.append(_mrrel_line(_cui(lo), "RO", _cui(hi), "", rel_sab()))
        relations_expected += 1
        if rng.random() < params.inverse_row_rate:
            rel_lines.append(_mrrel_line(_cui(hi), "RO", _cui(lo), "", rel_sab()))
            relations_expected += 1

    # Degenerate single-concept fixtures stay relation-free.
    dangling = 0
    self_loops = 0
    if n_concepts >= 2:
        for k in range(params.dangling_relations):
            src = concepts[rng.randrange(len(concepts))]
            rel_lines.append(
                _mrrel_line(src.cui, "CHD", _cui(n_concepts + 100 + k), "isa", rel_sab())
            )
            relations_expected += 1
            dangling += 1
        for _ in range(params.self_loops):
            c = concepts[rng.randrange(len(concepts))]
            rel_lines.append(_mrrel_line(c.cui, "SY", c.cui, "", rel_sab()))
            self_loops += 1

    # ---- emit MRDEF / MRSTY ------------------------------------------
    def_lines: list[str] = []
    definitions_expected = 0
    defined_cuis: set[str] = set()
    for c in concepts:
        for sab, text in c.definitions:
            def_lines.append(_mrdef_line(c.cui, sab, text))
            definitions_expected += 1
            defined_cuis.add(c.cui)
    # A few concepts carry a second, lower-priority definition.
    for c in concepts[:: max(1, len(concepts) // 5)][:4]:
        if c.definitions:
            def_lines.append(_mrdef_line(c.cui, "MSH", f"{c.name} short gloss."))
            definitions_expected += 1

    sty_lines: list[str] = []
    sty_rows = 0
    for c in concepts:
        for sty in c.semantic_types:
            sty_lines.append(_mrsty_line(c.cui, sty))
            sty_rows += 1

    (out_dir / "MRCONSO.RRF").write_text("".join(conso_lines), encoding="utf-8")
    (out_dir / "MRREL.RRF").write_text("".join(rel_lines), encoding="utf-8")
    (out_dir / "MRDEF.RRF").write_text("".join(def_lines), encoding="utf-8")
    (out_dir / "MRSTY.RRF").write_text("".join(sty_lines), encoding="utf-8")

    # ---- graph-level expectations ------------------------------------
    allowed = set(DEFAULT_SEMANTIC_TYPES)
    kept = {c.index for c in concepts if allowed.intersection(c.semantic_types)}
    restricted_hier = {(p, ch) for p, ch in hier_edges if p in kept and ch in kept}
    restricted_cross = {(a, b) for a, b in cross_edges if a in kept and b in kept}

    manifest = {
        "seed": seed,
        "n_concepts": n_concepts,
        "files": {
            "MRCONSO": "MRCONSO.RRF",
            "MRREL": "MRREL.RRF",
            "MRDEF": "MRDEF.RRF",
            "MRSTY": "MRSTY.RRF",
        },
        "counts": {
            "mrconso_lines": len(conso_lines),
            "atoms": atoms_expected,
            "atoms_filtered": noise_filtered,
            "atoms_suppressed": noise_suppressed,
            "mrrel_lines": len(rel_lines),
            "relations": relations_expected,
            "self_loops": self_loops,
            "dangling_relations": dangling,
            "mrdef_lines": len(def_lines),
            "definitions": definitions_expected,
            "defined_cuis": len(defined_cuis),
            "mrsty_lines": len(sty_lines),
            "semantic_type_rows": sty_rows,
            "attribute_cuis": len({line.split("|", 1)[0] for line in def_lines + sty_lines}),
        },
        "graph": {
            "node_count": n_concepts,
            "hierarchical_edges": len(hier_edges),
            "other_edges": len(cross_edges),
            "edge_count": len(hier_edges) + len(cross_edges),
            "restricted_node_count": len(kept),
            "restricted_hierarchical_edges": len(restricted_hier),
            "restricted_other_edges": len(restricted_cross),
            "restricted_edge_count": len(restricted_hier) + len(restricted_cross),
        },
        "semantic_types": {
            "allowed": list(DEFAULT_SEMANTIC_TYPES),
            "excluded": list(EXCLUDED_SEMANTIC_TYPES),
        },
        "targets": targets,
    }

    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    _write_target_files(out_dir, targets)
    return manifest


def _write_target_files(out_dir: Path, targets: list[dict]) -> None:
    """Emit targets.yaml plus per-target manual/gold CSVs for the pipeline."""
    import yaml

    entries = [
        {
            "id": t["id"],
            "name": t["name"],
            "target_cui": t["target_cui"],
            "description": t["description"],
            "special_instructions": t["special_instructions"],
            "fewshots": t["fewshots"],
        }
        for t in targets
    ]
    with open(out_dir / "targets.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump({"targets": entries}, fh, sort_keys=False, allow_unicode=True)

    manual_dir = out_dir / "manual"
    gold_dir = out_dir / "gold"
    manual_dir.mkdir(exist_ok=True)
    gold_dir.mkdir(exist_ok=True)
    for t in targets:
        with open(gold_dir / f"{t['id']}.csv", "w", encoding="utf-8") as fh:
            fh.write("cui,label,class\n")
            for g in t["gold"]:
                fh.write(f"{g['cui']},include,{g['class']}\n")
        with open(manual_dir / f"{t['id']}.csv", "w", encoding="utf-8") as fh:
            fh.write("cui,label,class\n")
            for cui in t["manual"]:
                fh.write(f"{cui},include,\n")


def _mrconso_line(
    cui: str, lat: str, ts: str, stt: str, ispref: str, sab: str, name: str, suppress: str
) -> str:
    lui = f"L{cui[1:]}"
    sui = f"S{cui[1:]}"
    aui = f"A{cui[1:]}"
    fields = [
        cui, lat, ts, lui, stt, sui, ispref, aui, "", "", "",
        sab, "PT", cui, name, "0", suppress, "",
    ]
    return "|".join(fields) + "|\n"


def _mrrel_line(cui1: str, rel: str, cui2: str, rela: str, sab: str) -> str:
    fields = [
        cui1, f"A{cui1[1:]}", "CUI", rel, cui2, f"A{cui2[1:]}", "CUI", rela,
        f"R{cui1[1:]}", "", sab, sab, "", "", "N", "",
    ]
    return "|".join(fields) + "|\n"


def _mrdef_line(cui: str, sab: str, definition: str) -> str:
    fields = [cui, f"A{cui[1:]}", f"AT{cui[1:]}", "", sab, definition, "N", ""]
    return "|".join(fields) + "|\n"


def _mrsty_line(cui: str, sty: str) -> str:
    fields = [cui, "T047", "B2.2.1", sty, f"AT{cui[1:]}", ""]
    return "|".join(fields) + "|\n"


def write_synthetic_mrconso(path: str | Path, n_lines: int, seed: int = 0) -> None:
    """Fast flat MRCONSO writer for ingestion-scale tests (no topology)."""
    rng = random.Random(seed)
    stems = GENERIC_STEMS
    with open(path, "w", encoding="utf-8") as fh:
        buf: list[str] = []
        for i in range(n_lines):
            cui = f"C{(i % 9_999_999) + 1:07d}"
            name = f"{stems[rng.randrange(len(stems))]} {stems[rng.randrange(len(stems))]}"
            sab = ALLOWED_VOCABULARIES[i % 3]
            buf.append(_mrconso_line(cui, "ENG", "P", "PF", "Y", sab, name, "N"))
            if len(buf) >= 10_000:
                fh.write("".join(buf))
                buf.clear()
        if buf:
            fh.write("".join(buf))
