"""Exact flat L2 nearest-neighbour index over node vectors.

Non-approximate by contract: every query scans all rows.  Distances are
computed on float32 rows with float64 accumulation and reported
non-squared; ties break by ascending CUI.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptIndexError
from .rrf import Cui

_MAGIC = b"FLL2"
_VERSION = 1
_HEADER = "<4sHHII32s"
HEADER_SIZE = struct.calcsize(_HEADER)  # 48 bytes


class VectorIndex:
    """Dense float32 matrix with row i mapped to cui_table[i]."""

    def __init__(self, rows: np.ndarray, cui_table: Sequence[Cui]):
        rows = np.ascontiguousarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-D matrix")
        if rows.shape[0] != len(cui_table):
            raise ValueError("row count must equal cui_table length")
        if rows.shape[0] and rows.shape[1] < 1:
            raise ValueError("dimension must be positive")
        if len(set(cui_table)) != len(cui_table):
            raise ValueError("duplicate CUIs in cui_table")
        self.rows = rows
        self.cui_table = list(cui_table)
        self._cui_array = np.asarray(self.cui_table, dtype="U8")
        self._row_of = {cui: i for i, cui in enumerate(self.cui_table)}

    @property
    def dimension(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return len(self.cui_table)

    def __contains__(self, cui: Cui) -> bool:
        return cui in self._row_of

    def vector(self, cui: Cui) -> np.ndarray:
        return self.rows[self._row_of[cui]]

    def distances(self, query: np.ndarray) -> np.ndarray:
        """Non-squared L2 distance from `query` to every row (float64)."""
        if len(self.cui_table) == 0:
            raise RuntimeError("index is empty")
        query = np.asarray(query, dtype=np.float32).reshape(-1)
        if query.shape[0] != self.rows.shape[1]:
            raise ValueError(
                f"query dimension {query.shape[0]} != index dimension {self.rows.shape[1]}"
            )
        diffs = self.rows - query
        sq = np.einsum("ij,ij->i", diffs, diffs, dtype=np.float64)
        return np.sqrt(sq)

    def knn(self, query: np.ndarray, k: int) -> list[tuple[Cui, float]]:
        """Exact top-k rows by ascending L2 distance, ties by ascending CUI."""
        if k < 1:
            raise ValueError("k must be >= 1")
        dists = self.distances(query)
        k = min(k, len(self.cui_table))
        # lexsort: primary key distance, secondary key CUI for ties
        order = np.lexsort((self._cui_array, dists))[:k]
        return [(self.cui_table[i], float(dists[i])) for i in order]


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Write the index with a checksummed header; round-trips bit-exactly."""
    rows_bytes = index.rows.astype("<f4", copy=False).tobytes()
    table_bytes = b"".join(cui.encode("ascii") for cui in index.cui_table)
    payload = rows_bytes + table_bytes
    checksum = hashlib.sha256(payload).digest()
    header = struct.pack(
        _HEADER, _MAGIC, _VERSION, 0, index.rows.shape[1], len(index.cui_table), checksum
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_index(path: str | Path) -> VectorIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER_SIZE:
        raise CorruptIndexError("file shorter than header")
    magic, version, _, dim, count, checksum = struct.unpack(_HEADER, data[:HEADER_SIZE])
    if magic != _MAGIC:
        raise CorruptIndexError("bad magic")
    if version != _VERSION:
        raise CorruptIndexError(f"unsupported index version {version}")
    expected = HEADER_SIZE + 4 * dim * count + 8 * count
    if len(data) != expected:
        raise CorruptIndexError(
            f"file size {len(data)} != expected {expected} for dim={dim} count={count}"
        )
    payload = data[HEADER_SIZE:]
    if hashlib.sha256(payload).digest() != checksum:
        raise CorruptIndexError("checksum mismatch")
    rows = np.frombuffer(payload[: 4 * dim * count], dtype="<f4").reshape(count, dim).copy()
    table_raw = payload[4 * dim * count :]
    cuis = [table_raw[i * 8 : (i + 1) * 8].decode("ascii") for i in range(count)]
    return VectorIndex(rows, cuis)
