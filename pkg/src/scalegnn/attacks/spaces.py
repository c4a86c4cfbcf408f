"""Candidate-edge spaces with exact linear-index codecs."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def triu_size(n: int) -> int:
    return n * (n - 1) // 2


def triu_encode(rows, cols, n: int) -> np.ndarray:
    r = np.asarray(rows, np.int64)
    c = np.asarray(cols, np.int64)
    return r * n - r * (r + 1) // 2 + (c - r - 1)


def triu_decode(idx, n: int):
    """Row-major strict upper triangle: index -> (row, col) with row < col."""
    k = np.asarray(idx, dtype=np.int64)
    if k.size == 0:
        return k.copy(), k.copy()
    r = np.floor((2 * n - 1 - np.sqrt(np.maximum((2 * n - 1) ** 2 - 8.0 * k, 0.0))) / 2).astype(np.int64)
    r = np.clip(r, 0, max(n - 2, 0))
    # the float estimate can be off by one for large n
    for _ in range(2):
        start = r * n - r * (r + 1) // 2
        r = np.where(k < start, r - 1, r)
        nxt = (r + 1) * n - (r + 1) * (r + 2) // 2
        r = np.where(k >= nxt, r + 1, r)
    start = r * n - r * (r + 1) // 2
    return r, k - start + r + 1


class CandidateSpace:
    symmetric = False

    def __init__(self, n: int):
        self.n = int(n)

    @property
    def size(self) -> int:
        raise NotImplementedError

    def decode(self, idx):
        raise NotImplementedError

    def encode(self, rows, cols):
        raise NotImplementedError

    def to_json(self) -> dict:
        return {"space": type(self).__name__, "n": self.n}


class UpperTriangular(CandidateSpace):
    """Undirected candidates (i, j), i < j; a flip applies to both orientations."""
    symmetric = True

    @property
    def size(self) -> int:
        return triu_size(self.n)

    def decode(self, idx):
        return triu_decode(idx, self.n)

    def encode(self, rows, cols):
        r, c = np.asarray(rows, np.int64), np.asarray(cols, np.int64)
        return triu_encode(np.minimum(r, c), np.maximum(r, c), self.n)


class DirectedOffDiagonal(CandidateSpace):
    @property
    def size(self) -> int:
        return self.n * (self.n - 1)

    def decode(self, idx):
        idx = np.asarray(idx, np.int64)
        row, c = np.divmod(idx, self.n - 1)
        return row, c + (c >= row)

    def encode(self, rows, cols):
        r, c = np.asarray(rows, np.int64), np.asarray(cols, np.int64)
        return r * (self.n - 1) + c - (c > r)


class IncomingRow(CandidateSpace):
    """Entries (target, j), j != target, of a single adjacency row."""

    def __init__(self, n: int, target: int):
        super().__init__(n)
        self.target = int(target)

    @property
    def size(self) -> int:
        return self.n - 1

    def decode(self, idx):
        idx = np.asarray(idx, np.int64)
        return np.full(idx.shape, self.target), idx + (idx >= self.target)

    def encode(self, rows, cols):
        c = np.asarray(cols, np.int64)
        return c - (c > self.target)

    def to_json(self) -> dict:
        return {**super().to_json(), "target": self.target}


def space_for(A: sp.csr_matrix, directed: bool) -> CandidateSpace:
    return DirectedOffDiagonal(A.shape[0]) if directed else UpperTriangular(A.shape[0])


class EdgeLookup:
    """Membership and value lookup for stored entries of a CSR matrix."""

    def __init__(self, A: sp.csr_matrix):
        A = sp.csr_matrix(A)
        A.sort_indices()
        self.n_cols = A.shape[1]
        rows = np.repeat(np.arange(A.shape[0], dtype=np.int64), np.diff(A.indptr))
        self.keys = rows * self.n_cols + A.indices
        self.values = A.data

    def values_at(self, rows, cols) -> np.ndarray:
        q = np.asarray(rows, np.int64) * self.n_cols + np.asarray(cols, np.int64)
        if self.keys.size == 0:
            return np.zeros(q.shape)
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, self.keys.size - 1)
        found = (pos < self.keys.size) & (self.keys[pos_c] == q)
        return np.where(found, self.values[pos_c], 0.0)

    def signs(self, rows, cols) -> np.ndarray:
        """+1 where the entry is absent (addition), -1 where present (removal)."""
        return np.where(self.values_at(rows, cols) != 0, -1.0, 1.0)
