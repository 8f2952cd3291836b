"""Bi-directed concept graph: construction, semantic-type restriction,
descendant expansion, structural statistics, and a binary snapshot format.

Edge semantics: a CHD relation row (cui1, cui2) is stored as parent=cui1,
child=cui2; PAR rows are inverted so both land in the same parent->child
orientation.  Rows whose relation attribute is "isa" are treated as
hierarchical as well.  Everything else becomes a non-hierarchical edge
that hop expansion may traverse but descendant expansion never follows.
Each conceptual relation is stored once and is traversable both ways.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CorruptSnapshotError
from .rrf import AtomRecord, ConceptAttributes, Cui, RelationRecord

HIERARCHICAL_RELS = {"CHD", "PAR"}
MAX_SYNONYMS = 10

DEFAULT_SEMANTIC_TYPES = frozenset(
    {
        "Disease or Syndrome",
        "Pathologic Function",
        "Diagnostic Procedure",
        "Health Care Activity",
        "Finding",
        "Laboratory or Test Result",
    }
)

_NO_REF = 0xFFFFFFFF
_MAGIC = b"CGPH"
_VERSION = 1


@dataclass
class ConceptNode:
    cui: Cui
    preferred_name: str
    synonyms: list[str] = field(default_factory=list)
    definition: str | None = None
    semantic_types: set[str] = field(default_factory=set)
    source_vocabularies: set[str] = field(default_factory=set)


@dataclass(frozen=True)
class RelationEdge:
    """One stored conceptual relation.

    For hierarchical edges `a` is the parent and `b` the child; for
    non-hierarchical edges endpoints are normalized so a < b.
    """

    a: Cui
    b: Cui
    rel: str
    rela: str | None
    hierarchical: bool


@dataclass
class GraphStats:
    node_count: int
    edge_count: int
    edge_count_directed: int
    median_degree: float
    degree_q1: float
    degree_q3: float
    isolated_fraction: float

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "edge_count": self.edge_count,
            "edge_count_directed": self.edge_count_directed,
            "median_degree": self.median_degree,
            "degree_iqr": [self.degree_q1, self.degree_q3],
            "isolated_fraction": self.isolated_fraction,
        }


class ConceptGraph:
    """Immutable-after-build concept graph with per-node adjacency."""

    def __init__(
        self,
        nodes: dict[Cui, ConceptNode],
        edges: list[RelationEdge],
        restriction: frozenset[str] | None = None,
        dangling_dropped: int = 0,
    ):
        self.nodes = nodes
        self.edges = edges
        self.restriction = restriction
        self.dangling_dropped = dangling_dropped
        self._children: dict[Cui, list[Cui]] = {}
        self._incident: dict[Cui, list[Cui]] = {}
        for edge in edges:
            if edge.hierarchical:
                self._children.setdefault(edge.a, []).append(edge.b)
            self._incident.setdefault(edge.a, []).append(edge.b)
            self._incident.setdefault(edge.b, []).append(edge.a)

    def __contains__(self, cui: Cui) -> bool:
        return cui in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def children(self, cui: Cui) -> list[Cui]:
        return self._children.get(cui, [])

    def neighbours(self, cui: Cui) -> list[Cui]:
        """All adjacent nodes over every edge kind, both directions."""
        return self._incident.get(cui, [])

    def degree(self, cui: Cui) -> int:
        return len(self._incident.get(cui, []))


def build_graph(
    atoms: Iterable[AtomRecord],
    relations: Iterable[RelationRecord],
    attributes: dict[Cui, ConceptAttributes],
) -> ConceptGraph:
    """Assemble one node per CUI and one stored edge per conceptual relation.

    Preferred name: the first preferred English atom (term_status P with the
    preferred flag), falling back to the lexicographically smallest name.
    Relations touching CUIs without atoms are dropped and counted.
    """
    preferred: dict[Cui, str] = {}
    fallback: dict[Cui, str] = {}
    names_seen: dict[Cui, list[str]] = {}
    vocabs: dict[Cui, set[str]] = {}

    for atom in atoms:
        cui = atom.cui
        if atom.term_status == "P" and atom.is_preferred and cui not in preferred:
            preferred[cui] = atom.name
        if cui not in fallback or atom.name < fallback[cui]:
            fallback[cui] = atom.name
        names_seen.setdefault(cui, [])
        if atom.name not in names_seen[cui]:
            names_seen[cui].append(atom.name)
        vocabs.setdefault(cui, set()).add(atom.source_vocabulary)

    nodes: dict[Cui, ConceptNode] = {}
    for cui in sorted(fallback):
        name = preferred.get(cui, fallback[cui])
        synonyms = [n for n in names_seen[cui] if n != name][:MAX_SYNONYMS]
        attrs = attributes.get(cui)
        nodes[cui] = ConceptNode(
            cui=cui,
            preferred_name=name,
            synonyms=synonyms,
            definition=attrs.definition if attrs else None,
            semantic_types=set(attrs.semantic_types) if attrs else set(),
            source_vocabularies=vocabs[cui],
        )

    hier: dict[tuple[Cui, Cui], RelationEdge] = {}
    other: dict[tuple[Cui, Cui], RelationEdge] = {}
    dangling = 0
    for rel in relations:
        if rel.cui1 not in nodes or rel.cui2 not in nodes:
            dangling += 1
            continue
        if rel.rel in HIERARCHICAL_RELS or rel.rela == "isa":
            if rel.rel == "PAR":
                parent, child = rel.cui2, rel.cui1
            else:
                parent, child = rel.cui1, rel.cui2
            key = (parent, child)
            if key not in hier:
                hier[key] = RelationEdge(parent, child, rel.rel, rel.rela, True)
        else:
            lo, hi = sorted((rel.cui1, rel.cui2))
            key = (lo, hi)
            if key not in other:
                other[key] = RelationEdge(lo, hi, rel.rel, rel.rela, False)

    edges = sorted(
        list(hier.values()) + list(other.values()),
        key=lambda e: (not e.hierarchical, e.a, e.b),
    )
    return ConceptGraph(nodes, edges, dangling_dropped=dangling)


def restrict_graph(g: ConceptGraph, allowed: Iterable[str]) -> ConceptGraph:
    """Induced subgraph on nodes holding at least one allowed semantic type."""
    allowed = frozenset(allowed)
    if not allowed:
        raise ValueError("allowed semantic-type set must be non-empty")
    kept = {
        cui for cui, node in g.nodes.items() if node.semantic_types & allowed
    }
    nodes = {cui: g.nodes[cui] for cui in kept}
    edges = [e for e in g.edges if e.a in kept and e.b in kept]
    return ConceptGraph(nodes, edges, restriction=allowed)


def graph_stats(g: ConceptGraph) -> GraphStats:
    if not g.nodes:
        raise ValueError("cannot compute stats for an empty graph")
    degrees = np.array([g.degree(cui) for cui in g.nodes], dtype=np.int64)
    q1, q3 = np.percentile(degrees, [25, 75])
    return GraphStats(
        node_count=len(g.nodes),
        edge_count=len(g.edges),
        edge_count_directed=2 * len(g.edges),
        median_degree=float(np.median(degrees)),
        degree_q1=float(q1),
        degree_q3=float(q3),
        isolated_fraction=float(np.count_nonzero(degrees == 0) / len(degrees)),
    )


def descendants(g: ConceptGraph, root: Cui, depth: int) -> set[Cui]:
    """CUIs reachable from `root` via parent->child edges in <= depth hops.

    Excludes the root itself; cycles terminate through the visited set.
    """
    if root not in g.nodes:
        raise KeyError(root)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    visited: set[Cui] = {root}
    frontier = [root]
    found: set[Cui] = set()
    for _ in range(depth):
        next_frontier: list[Cui] = []
        for cui in frontier:
            for child in g.children(cui):
                if child not in visited:
                    visited.add(child)
                    found.add(child)
                    next_frontier.append(child)
        if not next_frontier:
            break
        frontier = next_frontier
    return found


def within_hops(g: ConceptGraph, seeds: Iterable[Cui], hops: int) -> set[Cui]:
    """Nodes within `hops` traversals of any seed, over all edge kinds.

    Returns newly reached nodes only (seeds excluded from the result).
    """
    seeds = set(seeds)
    visited = set(seeds)
    frontier = list(seeds)
    found: set[Cui] = set()
    for _ in range(hops):
        next_frontier: list[Cui] = []
        for cui in frontier:
            for other in g.neighbours(cui):
                if other not in visited:
                    visited.add(other)
                    found.add(other)
                    next_frontier.append(other)
        if not next_frontier:
            break
        frontier = next_frontier
    return found


# ---------------------------------------------------------------------------
# Binary snapshot: header (magic, version, counts), string pool, node table,
# edge list; all integers little-endian.  Rebuilding from RRF is expensive,
# so built graphs persist to disk.
# ---------------------------------------------------------------------------


class _PoolWriter:
    def __init__(self) -> None:
        self.strings: list[str] = []
        self._index: dict[str, int] = {}

    def ref(self, s: str | None) -> int:
        if s is None:
            return _NO_REF
        if s not in self._index:
            self._index[s] = len(self.strings)
            self.strings.append(s)
        return self._index[s]


def save_graph(g: ConceptGraph, path: str | Path) -> None:
    pool = _PoolWriter()
    cuis = sorted(g.nodes)
    node_index = {cui: i for i, cui in enumerate(cuis)}

    node_blobs: list[bytes] = []
    for cui in cuis:
        node = g.nodes[cui]
        parts = [
            cui.encode("ascii"),
            struct.pack("<II", pool.ref(node.preferred_name), pool.ref(node.definition)),
            struct.pack("<H", len(node.synonyms)),
        ]
        parts += [struct.pack("<I", pool.ref(s)) for s in node.synonyms]
        types = sorted(node.semantic_types)
        parts.append(struct.pack("<H", len(types)))
        parts += [struct.pack("<I", pool.ref(t)) for t in types]
        vocabularies = sorted(node.source_vocabularies)
        parts.append(struct.pack("<H", len(vocabularies)))
        parts += [struct.pack("<I", pool.ref(v)) for v in vocabularies]
        node_blobs.append(b"".join(parts))

    edge_blobs: list[bytes] = []
    for edge in g.edges:
        edge_blobs.append(
            struct.pack(
                "<IIIIB",
                node_index[edge.a],
                node_index[edge.b],
                pool.ref(edge.rel),
                pool.ref(edge.rela),
                1 if edge.hierarchical else 0,
            )
        )

    restriction = sorted(g.restriction) if g.restriction is not None else None
    restriction_refs = [pool.ref(t) for t in restriction] if restriction else []

    header = struct.pack(
        "<4sHHIIII",
        _MAGIC,
        _VERSION,
        0,
        len(cuis),
        len(g.edges),
        len(pool.strings),
        len(restriction_refs) if restriction is not None else 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for s in pool.strings:
            raw = s.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for ref in restriction_refs:
            fh.write(struct.pack("<I", ref))
        for blob in node_blobs:
            fh.write(blob)
        for blob in edge_blobs:
            fh.write(blob)


def load_graph(path: str | Path) -> ConceptGraph:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
        return _decode_graph(data)
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise CorruptSnapshotError(f"unreadable graph snapshot: {exc}") from exc


def _decode_graph(data: bytes) -> ConceptGraph:
    header_size = struct.calcsize("<4sHHIIII")
    magic, version, _, n_nodes, n_edges, n_pool, n_restrict = struct.unpack(
        "<4sHHIIII", data[:header_size]
    )
    if magic != _MAGIC:
        raise CorruptSnapshotError("bad magic")
    if version != _VERSION:
        raise CorruptSnapshotError(f"unsupported snapshot version {version}")

    offset = header_size
    pool: list[str] = []
    for _ in range(n_pool):
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        pool.append(data[offset : offset + length].decode("utf-8"))
        offset += length

    def lookup(ref: int) -> str | None:
        if ref == _NO_REF:
            return None
        return pool[ref]

    restriction: frozenset[str] | None = None
    if n_restrict:
        refs = struct.unpack_from(f"<{n_restrict}I", data, offset)
        offset += 4 * n_restrict
        restriction = frozenset(pool[r] for r in refs)

    nodes: dict[Cui, ConceptNode] = {}
    order: list[Cui] = []
    for _ in range(n_nodes):
        cui = data[offset : offset + 8].decode("ascii")
        offset += 8
        name_ref, def_ref = struct.unpack_from("<II", data, offset)
        offset += 8
        (n_syn,) = struct.unpack_from("<H", data, offset)
        offset += 2
        syn_refs = struct.unpack_from(f"<{n_syn}I", data, offset) if n_syn else ()
        offset += 4 * n_syn
        (n_types,) = struct.unpack_from("<H", data, offset)
        offset += 2
        type_refs = struct.unpack_from(f"<{n_types}I", data, offset) if n_types else ()
        offset += 4 * n_types
        (n_vocab,) = struct.unpack_from("<H", data, offset)
        offset += 2
        vocab_refs = struct.unpack_from(f"<{n_vocab}I", data, offset) if n_vocab else ()
        offset += 4 * n_vocab
        nodes[cui] = ConceptNode(
            cui=cui,
            preferred_name=pool[name_ref],
            synonyms=[pool[r] for r in syn_refs],
            definition=lookup(def_ref),
            semantic_types={pool[r] for r in type_refs},
            source_vocabularies={pool[r] for r in vocab_refs},
        )
        order.append(cui)

    edges: list[RelationEdge] = []
    for _ in range(n_edges):
        a_idx, b_idx, rel_ref, rela_ref, flags = struct.unpack_from("<IIIIB", data, offset)
        offset += struct.calcsize("<IIIIB")
        edges.append(
            RelationEdge(
                a=order[a_idx],
                b=order[b_idx],
                rel=pool[rel_ref],
                rela=lookup(rela_ref),
                hierarchical=bool(flags & 1),
            )
        )
    if offset != len(data):
        raise CorruptSnapshotError("trailing bytes in snapshot")
    return ConceptGraph(nodes, edges, restriction=restriction)
