"""Candidate retrieval: embed a recall-oriented target description, take
top-k seeds, expand through child relations and optional hops, then cap
by nearest neighbours within the admitted semantic types."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import EmbeddingProvider
from .errors import EmptyResultError
from .graph import DEFAULT_SEMANTIC_TYPES, ConceptGraph, descendants, within_hops
from .rrf import Cui
from .vectorindex import VectorIndex

PROVENANCE_ORDER = {"seed": 0, "child": 1, "hop": 2}


@dataclass
class TargetConcept:
    id: str
    name: str
    description: str
    target_cui: Cui | None = None
    special_instructions: str = ""
    fewshots: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.description:
            raise ValueError("target description must be non-empty")


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 500
    hops: int = 0
    max_neighbours: int = 350
    child_depth: int = 1
    semantic_types: frozenset[str] = DEFAULT_SEMANTIC_TYPES

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_neighbours < 1:
            raise ValueError("max_neighbours must be >= 1")
        if self.hops < 0:
            raise ValueError("hops must be >= 0")
        if self.child_depth < 1:
            raise ValueError("child_depth must be >= 1")
        if not self.semantic_types:
            raise ValueError("semantic_types must be non-empty")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "hops": self.hops,
            "max_neighbours": self.max_neighbours,
            "child_depth": self.child_depth,
            "semantic_types": sorted(self.semantic_types),
        }


@dataclass(frozen=True)
class CandidateMember:
    cui: Cui
    distance: float
    provenance: str  # seed | child | hop


@dataclass
class CandidateSet:
    target_id: str
    target_cui: Cui
    members: list[CandidateMember]
    config: RetrievalConfig
    query_vector: np.ndarray | None = None

    def cuis(self) -> list[Cui]:
        return [m.cui for m in self.members]

    def cui_set(self) -> set[Cui]:
        return {m.cui for m in self.members}

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class SetStructureReport:
    n: int
    mean_connections: float
    sd_connections: float
    fraction_at_most_one_connection: float
    mean_distance: float
    sd_distance: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean_connections": self.mean_connections,
            "sd_connections": self.sd_connections,
            "fraction_at_most_one_connection": self.fraction_at_most_one_connection,
            "mean_distance": self.mean_distance,
            "sd_distance": self.sd_distance,
        }


def retrieve(
    g_restricted: ConceptGraph,
    index: VectorIndex,
    target: TargetConcept,
    cfg: RetrievalConfig,
    provider: EmbeddingProvider,
) -> CandidateSet:
    """Run the retrieval pipeline for one target concept.

    Steps: embed the description; pick the k nearest admitted nodes as
    seeds; expand through child relations to `child_depth`; optionally add
    nodes within `hops` traversals of the seeds over all edge kinds; score
    every collected node by L2 distance to the query and keep the
    `max_neighbours` nearest.  Duplicate provenance prefers seed > child > hop.
    """
    query = provider.embed_batch([target.description])[0]
    dists = index.distances(query)  # raises on empty index

    admitted: set[Cui] = set()
    for cui in index.cui_table:
        node = g_restricted.nodes.get(cui)
        if node is not None and node.semantic_types & cfg.semantic_types:
            admitted.add(cui)
    if not admitted:
        raise EmptyResultError(
            "no node matches the configured semantic types"
        )

    cui_arr = np.asarray(index.cui_table, dtype="U8")
    order = np.lexsort((cui_arr, dists))
    dist_of = {cui: float(dists[i]) for i, cui in enumerate(index.cui_table)}

    seeds: list[Cui] = []
    for i in order:
        cui = index.cui_table[i]
        if cui in admitted:
            seeds.append(cui)
            if len(seeds) >= cfg.k:
                break

    provenance: dict[Cui, str] = {cui: "seed" for cui in seeds}

    for seed in seeds:
        for child in descendants(g_restricted, seed, cfg.child_depth):
            if child in admitted and child not in provenance:
                provenance[child] = "child"

    if cfg.hops > 0:
        for cui in within_hops(g_restricted, seeds, cfg.hops):
            if cui in admitted and cui not in provenance:
                provenance[cui] = "hop"

    ranked = sorted(provenance, key=lambda c: (dist_of[c], c))[: cfg.max_neighbours]
    members = [CandidateMember(c, dist_of[c], provenance[c]) for c in ranked]

    target_cui = target.target_cui if target.target_cui else seeds[0]
    return CandidateSet(
        target_id=target.id,
        target_cui=target_cui,
        members=members,
        config=cfg,
        query_vector=np.asarray(query, dtype=np.float32),
    )


def published_grid(
    semantic_types: frozenset[str] = DEFAULT_SEMANTIC_TYPES,
    child_depth: int = 1,
) -> list[RetrievalConfig]:
    """The six-configuration optimisation grid used for tuning."""
    shape = [(150, 200), (500, 350), (1000, 500)]
    return [
        RetrievalConfig(
            k=k,
            hops=hops,
            max_neighbours=cap,
            child_depth=child_depth,
            semantic_types=semantic_types,
        )
        for k, cap in shape
        for hops in (0, 1)
    ]


@dataclass
class SweepRow:
    config: RetrievalConfig
    retrieved: int
    recall: float
    chosen: bool = False

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "retrieved": self.retrieved,
            "recall": self.recall,
            "chosen": self.chosen,
        }


def sweep_configs(
    g_restricted: ConceptGraph,
    index: VectorIndex,
    target: TargetConcept,
    grid: Sequence[RetrievalConfig],
    manual_set: set[Cui],
    provider: EmbeddingProvider,
) -> list[SweepRow]:
    """One row per config with retrieval recall against the manual set M.

    The chosen row balances recall and run size: highest recall, ties
    broken by fewest CUIs retrieved (then grid order).
    """
    if not grid:
        raise ValueError("config grid must be non-empty")
    if not manual_set:
        raise ValueError("manual set must be non-empty")
    rows: list[SweepRow] = []
    for cfg in grid:
        result = retrieve(g_restricted, index, target, cfg, provider)
        hits = len(manual_set & result.cui_set())
        rows.append(
            SweepRow(config=cfg, retrieved=len(result), recall=hits / len(manual_set))
        )
    best = min(range(len(rows)), key=lambda i: (-rows[i].recall, rows[i].retrieved, i))
    rows[best] = replace(rows[best], chosen=True)
    return rows


def analyze_set_structure(
    g_restricted: ConceptGraph,
    member_set: set[Cui],
    target_cui: Cui,
    index: VectorIndex,
) -> SetStructureReport:
    """Within-set connectivity and embedding distance of a concept set."""
    if not member_set:
        raise ValueError("member_set must be non-empty")
    members = sorted(member_set)
    connections = []
    for cui in members:
        connections.append(
            sum(1 for other in g_restricted.neighbours(cui) if other in member_set)
        )
    target_vec = index.vector(target_cui)
    distances = [
        float(np.linalg.norm(index.vector(cui).astype(np.float64) - target_vec.astype(np.float64)))
        for cui in members
    ]

    def mean_sd(values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values, dtype=np.float64)
        sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return float(arr.mean()), sd

    mean_c, sd_c = mean_sd([float(c) for c in connections])
    mean_d, sd_d = mean_sd(distances)
    return SetStructureReport(
        n=len(members),
        mean_connections=mean_c,
        sd_connections=sd_c,
        fraction_at_most_one_connection=sum(1 for c in connections if c <= 1) / len(members),
        mean_distance=mean_d,
        sd_distance=sd_d,
    )


def write_candidates_csv(
    candidates: CandidateSet, g: ConceptGraph, path: str | Path
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cui", "name", "distance", "provenance"])
        for m in candidates.members:
            node = g.nodes.get(m.cui)
            writer.writerow(
                [m.cui, node.preferred_name if node else "", f"{m.distance:.6f}", m.provenance]
            )


def export_plot_data(
    candidates: CandidateSet,
    g_restricted: ConceptGraph,
    missed: set[Cui],
    gold: Iterable[Cui] = (),
    nodes_path: str | Path = "plot_nodes.csv",
    edges_path: str | Path = "plot_edges.csv",
    index: VectorIndex | None = None,
) -> tuple[int, int]:
    """Emit node and edge tables for external plotting.

    Node status: gold-missed (in `missed`), gold-retrieved (retrieved and in
    `gold`), else retrieved.  Distances for missed nodes are recomputed from
    the stored query vector when an index is supplied.
    """
    gold = set(gold)
    member_distance = {m.cui: m.distance for m in candidates.members}
    universe = sorted(set(member_distance) | missed)

    missed_distance: dict[Cui, float] = {}
    if index is not None and candidates.query_vector is not None:
        dists = index.distances(candidates.query_vector)
        position = {cui: i for i, cui in enumerate(index.cui_table)}
        for cui in missed:
            if cui in position:
                missed_distance[cui] = float(dists[position[cui]])

    n_nodes = 0
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cui", "name", "distance", "status"])
        for cui in universe:
            if cui in missed:
                status = "gold-missed"
            elif cui in gold:
                status = "gold-retrieved"
            else:
                status = "retrieved"
            node = g_restricted.nodes.get(cui)
            distance = member_distance.get(cui, missed_distance.get(cui))
            writer.writerow(
                [
                    cui,
                    node.preferred_name if node else "",
                    f"{distance:.6f}" if distance is not None else "",
                    status,
                ]
            )
            n_nodes += 1

    in_universe = set(universe)
    n_edges = 0
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "target", "hierarchical"])
        for edge in g_restricted.edges:
            if edge.a in in_universe and edge.b in in_universe:
                writer.writerow([edge.a, edge.b, int(edge.hierarchical)])
                n_edges += 1

    return n_nodes, n_edges


def load_targets(path: str | Path) -> list[TargetConcept]:
    """Read target concepts from a YAML config file."""
    import yaml

    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    entries = raw["targets"] if isinstance(raw, dict) else raw
    targets = []
    for entry in entries:
        targets.append(
            TargetConcept(
                id=entry["id"],
                name=entry["name"],
                description=entry["description"],
                target_cui=entry.get("target_cui"),
                special_instructions=entry.get("special_instructions", ""),
                fewshots=entry.get("fewshots", {}) or {},
            )
        )
    return targets
