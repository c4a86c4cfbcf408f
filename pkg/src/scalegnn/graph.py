"""Sparse graph container, normalizations, loaders and synthetic graphs.

Adjacency matrices are ``scipy.sparse.csr_matrix`` instances with sorted
indices and float64 values.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class GraphFormatError(ValueError):
    """Raised for malformed input files (carries the offending line number)."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    def validate(self, n: int) -> None:
        parts = [self.train, self.val, self.test]
        allidx = np.concatenate(parts)
        if allidx.size and (allidx.min() < 0 or allidx.max() >= n):
            raise ValueError("split index out of range")
        if np.unique(allidx).size != allidx.size:
            raise ValueError("splits are not disjoint")

    def to_json(self) -> dict:
        return {"train": self.train.tolist(), "valid": self.val.tolist(),
                "test": self.test.tolist(), "seed": self.seed}


@dataclass(frozen=True)
class Graph:
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    directed: bool = False
    splits: Optional[Splits] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        A = self.adjacency
        if A.shape[0] != A.shape[1]:
            raise ValueError("adjacency must be square")
        n = A.shape[0]
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("features/labels do not match the number of nodes")
        if self.splits is not None:
            self.splits.validate(n)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def n_edges(self) -> int:
        """Edge count m: undirected graphs count each pair once (self-loops excluded)."""
        A = self.adjacency
        if self.directed:
            return int(A.nnz - A.diagonal().astype(bool).sum())
        return int(sp.triu(A, k=1).nnz)

    def with_adjacency(self, adjacency: sp.csr_matrix) -> "Graph":
        return Graph(_canonical(adjacency), self.features, self.labels,
                     self.directed, self.splits, dict(self.meta))

    def with_splits(self, splits: Splits) -> "Graph":
        return Graph(self.adjacency, self.features, self.labels, self.directed,
                     splits, dict(self.meta))


def _canonical(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A, dtype=np.float64)
    A.sum_duplicates()
    A.sort_indices()
    return A


def to_dense(A: sp.spmatrix) -> np.ndarray:
    return np.asarray(A.todense())


def from_dense(M: np.ndarray) -> sp.csr_matrix:
    return _canonical(sp.csr_matrix(np.asarray(M, dtype=np.float64)))


def check_csr(A: sp.csr_matrix) -> None:
    """Assert the CSR invariants (sorted, in-bounds, finite)."""
    ptr, idx = A.indptr, A.indices
    assert ptr.shape[0] == A.shape[0] + 1
    assert np.all(np.diff(ptr) >= 0)
    if idx.size:
        assert idx.min() >= 0 and idx.max() < A.shape[1]
        row_of = np.repeat(np.arange(A.shape[0]), np.diff(ptr))
        same_row = row_of[1:] == row_of[:-1]
        assert np.all(np.diff(idx)[same_row] > 0), "column indices not strictly increasing"
    assert np.all(np.isfinite(A.data))


# ----------------------------------------------------------------------------
# Normalizations

def add_self_loops(A: sp.csr_matrix, weight: float = 1.0) -> sp.csr_matrix:
    """A + weight * I; explicitly stored zeros stay stored (sparse '+' would drop them)."""
    A = A.tocoo()
    n = A.shape[0]
    diag = np.arange(n)
    out = sp.coo_matrix((np.r_[A.data, np.full(n, weight)], (np.r_[A.row, diag], np.r_[A.col, diag])),
                        shape=A.shape).tocsr()
    out.sort_indices()
    return out


def degrees(A: sp.csr_matrix) -> np.ndarray:
    """Weighted row sums."""
    return np.asarray(A.sum(axis=1)).ravel()


def gcn_normalize(g: Union[Graph, sp.csr_matrix]) -> sp.csr_matrix:
    """Symmetric normalization D^-1/2 (A + I) D^-1/2 with degrees from A + I."""
    A = g.adjacency if isinstance(g, Graph) else g
    At = add_self_loops(A)
    deg = degrees(At)
    dinv = 1.0 / np.sqrt(deg)
    return scale_entries(At, dinv, dinv)


def scale_entries(A: sp.csr_matrix, left: np.ndarray, right: np.ndarray) -> sp.csr_matrix:
    """Return diag(left) A diag(right) without changing the sparsity pattern."""
    rows = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    out = A.copy()
    out.data = A.data * left[rows] * right[A.indices]
    return out


def row_normalize(m: sp.csr_matrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.float64)
    rs = degrees(m)
    inv = np.zeros_like(rs)
    nz = rs != 0
    inv[nz] = 1.0 / rs[nz]
    rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
    out = m.copy()
    out.data = m.data * inv[rows]
    return out


# ----------------------------------------------------------------------------
# I/O

def _read_edges(path: Path):
    src, dst, w = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) not in (2, 3):
                raise GraphFormatError(f"expected 'src dst [weight]', got {line.strip()!r}", lineno)
            try:
                s, t = int(parts[0]), int(parts[1])
                wt = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise GraphFormatError(f"cannot parse {line.strip()!r}", lineno) from None
            if s < 0 or t < 0:
                raise GraphFormatError("negative node index", lineno)
            src.append(s)
            dst.append(t)
            w.append(wt)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(w)


def read_features(path: Union[str, Path]) -> np.ndarray:
    """CSV (``.csv``/``.txt``) or raw little-endian f32 with a (u32 n, u32 d) header."""
    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append([float(v) for v in line.replace(",", " ").split()])
                except ValueError:
                    raise GraphFormatError(f"bad feature row {line.strip()!r}", lineno) from None
        if rows and len({len(r) for r in rows}) != 1:
            raise GraphFormatError("ragged feature rows")
        return np.array(rows, dtype=np.float64)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise GraphFormatError("feature file shorter than its header")
    n, d = struct.unpack("<II", raw[:8])
    payload = np.frombuffer(raw, dtype="<f4", offset=8)
    if payload.size != n * d:
        raise GraphFormatError(f"header says {n}x{d} but payload has {payload.size} values")
    return payload.reshape(n, d).astype(np.float64)


def write_features(path: Union[str, Path], X: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        np.savetxt(path, X, delimiter=",", fmt="%.17g")
    else:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", *X.shape))
            fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def read_labels(path: Union[str, Path]) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise GraphFormatError(f"bad label {line.strip()!r}", lineno) from None
    return np.array(out, dtype=np.int64)


def read_splits(path: Union[str, Path]) -> Splits:
    doc = json.loads(Path(path).read_text())
    return Splits(doc["train"], doc["valid"], doc["test"], doc.get("seed"))


def load_graph(edge_path, feature_path, label_path, directed: bool = False,
               split_path=None, largest_component: bool = False) -> Graph:
    """Load a graph from an edge list, a feature file and a label file.

    Duplicate edges are merged by summing their weights. For undirected graphs
    the adjacency is symmetrized with an element-wise maximum.
    """
    X = read_features(feature_path)
    y = read_labels(label_path)
    n = X.shape[0]
    if y.shape[0] != n:
        raise GraphFormatError(f"{y.shape[0]} labels for {n} nodes")
    src, dst, w = _read_edges(Path(edge_path))
    if src.size and max(src.max(), dst.max()) >= n:
        bad = int(np.argmax((src >= n) | (dst >= n)))
        raise IndexError(f"edge {bad}: node index {max(src[bad], dst[bad])} >= n={n}")
    A = sp.coo_matrix((w, (src, dst)), shape=(n, n))
    A = _canonical(A)
    if not directed:
        A = _canonical(A.maximum(A.T))
    splits = read_splits(split_path) if split_path else None
    g = Graph(A, X, y, directed, splits)
    if largest_component:
        g = largest_connected_component(g)
    return g


def save_graph(g: Graph, directory: Union[str, Path], binary_features: bool = False) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    A = g.adjacency.tocoo()
    keep = (A.row < A.col) if not g.directed else np.ones(A.nnz, bool)
    paths = {"edges": directory / "edges.txt", "labels": directory / "labels.txt",
             "features": directory / ("features.bin" if binary_features else "features.csv")}
    with open(paths["edges"], "w", encoding="utf-8") as fh:
        for r, c, v in zip(A.row[keep], A.col[keep], A.data[keep]):
            fh.write(f"{r} {c}\n" if v == 1.0 else f"{r} {c} {v!r}\n")
    write_features(paths["features"], g.features)
    np.savetxt(paths["labels"], g.labels, fmt="%d")
    if g.splits is not None:
        paths["splits"] = directory / "splits.json"
        paths["splits"].write_text(json.dumps(g.splits.to_json()))
    return {k: str(v) for k, v in paths.items()}


def largest_connected_component(g: Graph) -> Graph:
    _, comp = connected_components(g.adjacency, directed=g.directed, connection="weak")
    keep = np.flatnonzero(comp == np.bincount(comp).argmax())
    A = g.adjacency[keep][:, keep]
    return Graph(_canonical(A), g.features[keep], g.labels[keep], g.directed, None,
                 {**g.meta, "lcc_of": g.n})


def size_report(g: Graph) -> dict:
    """Dense vs. sparse (COO: two int64 pointers + one float) storage in bytes."""
    n, nnz = g.n, g.adjacency.nnz
    return {
        "n": n, "nnz": nnz,
        "dense_bytes_f32": 4 * n * n, "dense_bytes_f64": 8 * n * n,
        "sparse_bytes_f32": nnz * (16 + 4), "sparse_bytes_f64": nnz * (16 + 8),
    }


# ----------------------------------------------------------------------------
# Synthetic graphs and splits

def sbm_generate(sizes: Sequence[int], p_in: float, p_out: float, d: int, seed: int,
                 noise: float = 0.1) -> Graph:
    """Undirected stochastic block model with noisy one-hot block features."""
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes):
        raise ValueError("every block needs at least one node")
    if not (0 <= p_out < p_in <= 1):
        raise ValueError("need 0 <= p_out < p_in <= 1")
    n_blocks = len(sizes)
    if d < n_blocks:
        raise ValueError("feature dimension must cover the one-hot block label")
    from .attacks.spaces import triu_decode

    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    rows, cols = [], []
    for a in range(n_blocks):
        for b in range(a, n_blocks):
            p = p_in if a == b else p_out
            total = sizes[a] * (sizes[a] - 1) // 2 if a == b else sizes[a] * sizes[b]
            if total == 0 or p == 0:
                continue
            count = rng.binomial(total, p)
            if count == 0:
                continue
            picks = np.sort(rng.choice(total, size=count, replace=False))
            if a == b:
                r, c = triu_decode(picks, sizes[a])
            else:
                r, c = np.divmod(picks, sizes[b])
            rows.append(r + offsets[a])
            cols.append(c + offsets[b])
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.zeros(0, dtype=np.int64)
    A = sp.coo_matrix((np.ones(2 * r.size), (np.r_[r, c], np.r_[c, r])), shape=(n, n))
    labels = np.repeat(np.arange(n_blocks), sizes)
    X = np.zeros((n, d))
    X[np.arange(n), labels] = 1.0
    X += noise * rng.standard_normal((n, d))
    return Graph(_canonical(A), X, labels, directed=False,
                 meta={"sbm": {"sizes": sizes, "p_in": p_in, "p_out": p_out, "d": d,
                               "seed": seed, "noise": noise}})


def make_splits(labels: np.ndarray, per_class: int = 20, seed: int = 0) -> Splits:
    """Sample ``per_class`` train and validation nodes per class; the rest is test."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if idx.size < 2 * per_class:
            raise ValueError(f"class {c} has only {idx.size} nodes")
        train.append(idx[:per_class])
        val.append(idx[per_class:2 * per_class])
    train = np.sort(np.concatenate(train))
    val = np.sort(np.concatenate(val))
    test = np.setdiff1d(np.arange(labels.size), np.concatenate([train, val]))
    return Splits(train, val, test, seed)


def accuracy(predictions, labels, mask) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    if mask.size == 0:
        raise ValueError("empty mask")
    return float(np.mean(predictions[mask] == labels[mask]))
