"""Personalized PageRank: dense oracle, batched power iteration, top-k
sparsification, GDC diffusion and the differentiable single-row update.

Throughout, ``P = D^-1 A`` is the row-stochastic transition matrix and row ``s``
of the PPR matrix solves ``pi = alpha * e_s + (1 - alpha) * pi P``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .graph import Graph, degrees, row_normalize


class PprConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"power iteration did not converge after {iterations} "
                         f"iterations (residual {residual:.3e})")


class SingularUpdateError(ArithmeticError):
    """The rank-one update has a vanishing denominator."""


@dataclass(frozen=True)
class TeleportConfig:
    alpha: float = 0.15
    k: int = 64
    tol: float = 1e-8
    max_iter: int = 10_000
    renormalize: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class PprMatrix:
    """Top-k PPR rows stored as an n x n CSR matrix; only ``sources`` rows are populated."""
    matrix: sp.csr_matrix
    sources: np.ndarray
    alpha: float
    k: int
    tol: float = 0.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def row(self, i: int):
        """(indices, values) of row ``i``."""
        if not self.has_row(i):
            raise KeyError(f"no PPR row for node {i}")
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def has_row(self, i: int) -> bool:
        pos = np.searchsorted(self.sources, i)
        return pos < self.sources.size and self.sources[pos] == i

    def save(self, path: Union[str, Path]) -> None:
        """Binary row blocks (u32 count, then (u32 index, f64 value) pairs) plus JSON sidecar."""
        path = Path(path)
        M = self.matrix
        pair = np.dtype([("idx", "<u4"), ("val", "<f8")])
        with open(path, "wb") as fh:
            for s in self.sources:
                lo, hi = M.indptr[s], M.indptr[s + 1]
                block = np.empty(hi - lo, dtype=pair)
                block["idx"] = M.indices[lo:hi]
                block["val"] = M.data[lo:hi]
                fh.write(struct.pack("<I", hi - lo))
                fh.write(block.tobytes())
        sidecar = {"alpha": self.alpha, "k": self.k, "tol": self.tol, "n": self.n,
                   "sources": self.sources.tolist()}
        Path(str(path) + ".json").write_text(json.dumps(sidecar))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PprMatrix":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        pair = np.dtype([("idx", "<u4"), ("val", "<f8")])
        raw = path.read_bytes()
        pos = 0
        rows, cols, vals = [], [], []
        for s in meta["sources"]:
            (cnt,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            block = np.frombuffer(raw, dtype=pair, count=cnt, offset=pos)
            pos += cnt * pair.itemsize
            rows.append(np.full(cnt, s))
            cols.append(block["idx"].astype(np.int64))
            vals.append(block["val"])
        n = meta["n"]
        M = sp.csr_matrix((np.concatenate(vals) if vals else [],
                           (np.concatenate(rows) if rows else [],
                            np.concatenate(cols) if cols else [])), shape=(n, n))
        M.sort_indices()
        return cls(M, np.asarray(meta["sources"], dtype=np.int64), meta["alpha"], meta["k"], meta["tol"])


def _adjacency(g: Union[Graph, sp.spmatrix]) -> sp.csr_matrix:
    return g.adjacency if isinstance(g, Graph) else sp.csr_matrix(g)


def transition_matrix(A: sp.csr_matrix) -> sp.csr_matrix:
    """D^-1 A, where dangling rows first receive a self-loop."""
    A = sp.csr_matrix(A, dtype=np.float64)
    dangling = degrees(A) == 0
    if dangling.any():
        A = A + sp.diags(dangling.astype(np.float64), format="csr")
    return row_normalize(A)


def ppr_exact(g: Union[Graph, sp.spmatrix], cfg: TeleportConfig = TeleportConfig()) -> np.ndarray:
    """Dense alpha (I - (1 - alpha) D^-1 A)^-1 (oracle; small graphs only)."""
    A = _adjacency(g)
    n = A.shape[0]
    if n > 2000:
        raise ValueError("ppr_exact is a dense oracle limited to n <= 2000")
    P = transition_matrix(A).toarray()
    M = np.eye(n) - (1 - cfg.alpha) * P
    return cfg.alpha * np.linalg.inv(M)


def topk_rows(X: np.ndarray, k: int) -> tuple:
    """Column indices and values of the k largest entries per row (ties: lower index)."""
    k = min(k, X.shape[1])
    order = np.argsort(-X, axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(X, order, axis=1)
    return order, vals


def ppr_power_iteration(g: Union[Graph, sp.spmatrix], cfg: TeleportConfig = TeleportConfig(),
                        sources: Optional[Sequence[int]] = None,
                        chunk_size: Optional[int] = None) -> PprMatrix:
    """Top-k PPR rows for ``sources`` (all nodes by default) via batched power iteration.

    Iteration stops once the largest per-row L1 change falls below ``tol * alpha``,
    which bounds the L1 error of each row by ``tol * (1 - alpha)``.
    """
    A = _adjacency(g)
    n = A.shape[0]
    sources = np.arange(n) if sources is None else np.unique(np.asarray(sources, dtype=np.int64))
    if sources.size and (sources.min() < 0 or sources.max() >= n):
        raise IndexError("source out of range")
    PT = transition_matrix(A).T.tocsr()
    if chunk_size is None:
        chunk_size = max(1, min(max(sources.size, 1), (1 << 22) // max(n, 1)))
    rows, cols, vals = [], [], []
    for start in range(0, sources.size, chunk_size):
        src = sources[start:start + chunk_size]
        # columns of Xt are the PPR rows of the chunk's sources
        cols_ = np.arange(src.size)
        Xt = np.zeros((n, src.size))
        Xt[src, cols_] = cfg.alpha
        for it in range(cfg.max_iter):
            nxt = PT @ Xt
            nxt *= 1 - cfg.alpha
            nxt[src, cols_] += cfg.alpha
            np.subtract(nxt, Xt, out=Xt)
            np.abs(Xt, out=Xt)
            change = Xt.sum(axis=0).max()
            Xt = nxt
            if change <= cfg.tol * cfg.alpha:
                break
        else:
            raise PprConvergenceError(float(change), cfg.max_iter)
        idx, v = topk_rows(Xt.T, cfg.k)
        if cfg.renormalize:
            v = v / v.sum(axis=1, keepdims=True)
        rows.append(np.repeat(src, idx.shape[1]))
        cols.append(idx.ravel())
        vals.append(v.ravel())
    if rows:
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        keep = v > 0
        r, c, v = r[keep], c[keep], v[keep]
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    M = sp.csr_matrix((v, (r, c)), shape=(n, n))
    M.sort_indices()
    return PprMatrix(M, sources, cfg.alpha, cfg.k, cfg.tol)


def gdc_preprocess(g: Union[Graph, sp.spmatrix], cfg: TeleportConfig = TeleportConfig()) -> sp.csr_matrix:
    """Top-k PPR diffusion, symmetrized by element-wise max, then row-normalized."""
    S = ppr_power_iteration(g, cfg).matrix
    S = S.maximum(S.T).tocsr()
    S.sort_indices()
    return row_normalize(S)


def expected_nonzero_columns(n: int, k: int, b: int) -> float:
    """Expected size of the union of b uniformly random k-subsets of n columns,
    n * (1 - (1 - k/n)^b), evaluated in log space."""
    if not (1 <= k <= n) or b < 1:
        raise ValueError("need 1 <= k <= n and b >= 1")
    if k == n:
        return float(n)
    return float(-n * np.expm1(b * np.log1p(-k / n)))


# ----------------------------------------------------------------------------
# Single-row update

@dataclass
class RowUpdate:
    """Perturbed PPR row of ``target`` and its vector-Jacobian product w.r.t. ``p``."""
    target: int
    indices: np.ndarray        # columns of the perturbed row
    values: np.ndarray
    v_indices: np.ndarray      # support of the normalization difference v
    v_values: np.ndarray
    touched_columns: int
    vjp: Callable[[np.ndarray], np.ndarray]

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.indices] = self.values
        return out


def _row_lookup(rows: sp.csr_matrix, r: np.ndarray, col: int) -> np.ndarray:
    """Entries rows[r_j, col] for each j."""
    out = np.zeros(r.size)
    for j, rr in enumerate(r):
        lo, hi = rows.indptr[rr], rows.indptr[rr + 1]
        pos = lo + np.searchsorted(rows.indices[lo:hi], col)
        if pos < hi and rows.indices[pos] == col:
            out[j] = rows.data[pos]
    return out


def ppr_row_update(ppr_prime: sp.csr_matrix, target: int, a_indices: np.ndarray,
                   a_values: np.ndarray, degree: float, cand_cols: np.ndarray,
                   signs: np.ndarray, p: np.ndarray, alpha: float) -> RowUpdate:
    """Rank-one (Sherman-Morrison) update of row ``target`` of the PPR matrix.

    ``ppr_prime`` holds rows of Pi / alpha (at least every row in the support of
    v and row ``target``). Row ``target`` of the adjacency becomes
    ``a + signs * p`` on ``cand_cols``; ``degree`` is its current weighted degree.
    The returned ``vjp(g)`` maps a dense gradient w.r.t. the new row onto ``p``.
    """
    n = ppr_prime.shape[0]
    cand_cols = np.asarray(cand_cols, dtype=np.int64)
    signs = np.asarray(signs, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    a_indices = np.asarray(a_indices, dtype=np.int64)
    a_values = np.asarray(a_values, dtype=np.float64)

    if degree <= 0:
        raise SingularUpdateError("clean row has zero degree")
    support = np.union1d(np.union1d(a_indices, cand_cols), [target])
    a_full = np.zeros(support.size)
    a_full[np.searchsorted(support, a_indices)] = a_values
    cpos = np.searchsorted(support, cand_cols)
    sp_ = signs * p
    r = a_full.copy()
    np.add.at(r, cpos, sp_)
    R = degree + sp_.sum()
    # an emptied row becomes a self-loop, as in transition_matrix; locally constant in p
    dangling = R < 1e-12
    if dangling:
        r = np.zeros(support.size)
        r[np.searchsorted(support, target)] = 1.0
        R = 1.0
    v = r / R - a_full / degree
    w = -(1 - alpha) * v

    sub = ppr_prime[support]                       # |support| x n rows of Pi'
    col_i = _row_lookup(ppr_prime, support, target)  # Pi'_{j, target}
    z = 1.0 + w @ col_i
    if abs(z) < 1e-12:
        raise SingularUpdateError(f"denominator {z:.3e} too small")
    y = sp.csr_matrix(w[None, :]) @ sub             # 1 x n sparse
    y = y.tocsr()
    y.sum_duplicates()
    own = ppr_prime[target]
    pii = float(_row_lookup(ppr_prime, np.array([target]), target)[0])
    row = (alpha * (own - (pii / z) * y)).tocsr()
    row.sum_duplicates()
    row.sort_indices()
    touched = int(np.unique(sub.indices).size)

    def vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if dangling:
            return np.zeros(p.size)
        y_dense = y.toarray().ravel()
        d_z = alpha * pii * (g @ y_dense) / z ** 2
        d_w = (-alpha * pii / z) * (sub @ g) + d_z * col_i
        d_v = -(1 - alpha) * d_w
        d_r = d_v / R
        d_R = -(d_v @ r) / R ** 2
        return signs * (d_r[cpos] + d_R)

    return RowUpdate(target, row.indices.copy(), row.data.copy(), support, v, touched, vjp)


def prime_rows(ppr: Union[PprMatrix, np.ndarray, sp.spmatrix], alpha: float) -> sp.csr_matrix:
    """Pi' = Pi / alpha as CSR."""
    M = ppr.matrix if isinstance(ppr, PprMatrix) else ppr
    M = sp.csr_matrix(M, dtype=np.float64) / alpha
    M = M.tocsr()
    M.sort_indices()
    return M
