"""Robust neighborhood aggregation: weighted dimension-wise median, (weighted)
Soft Median, breakdown stress tests and the empirical aggregation bias.

The Soft Median weighs each input row by ``softmax(-c / (T sqrt(d)))`` where
``c`` is the L2 distance to the dimension-wise median. The weighted variant
multiplies those weights with the edge weights ``a`` and rescales the result so
the effective total weight is ``sum(a)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

MEDIAN_RTOL = 1e-12


@dataclass(frozen=True)
class SoftMedianConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.temperature) and self.temperature >= 0):
            raise ValueError("temperature must be finite and >= 0 (0 = hard selection, evaluation only)")


def _temp(cfg) -> float:
    return cfg.temperature if isinstance(cfg, SoftMedianConfig) else float(cfg)


# ----------------------------------------------------------------------------
# Medians

def _weighted_median_padded(X: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Weighted lower median along axis -2.

    X: (..., m, d), a: (..., m). Rows with zero weight never get selected
    unless every weight is zero.
    """
    # sort along a contiguous last axis; tie order does not change the median value
    Xt = np.ascontiguousarray(np.swapaxes(X, -1, -2))
    order = np.argsort(Xt, axis=-1)
    ws = np.take_along_axis(np.broadcast_to(a[..., None, :], Xt.shape), order, axis=-1)
    cum = np.cumsum(ws, axis=-1)
    half = 0.5 * cum[..., -1:] * (1 - MEDIAN_RTOL)
    pos = np.argmax(cum >= half, axis=-1)
    first = np.take_along_axis(order, pos[..., None], axis=-1)
    return np.take_along_axis(Xt, first, axis=-1)[..., 0]


def weighted_dimensionwise_median(X, a=None) -> np.ndarray:
    """Per dimension, the smallest value whose cumulative weight reaches half the total."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    a = np.ones(X.shape[0]) if a is None else np.asarray(a, dtype=np.float64)
    if a.sum() <= 0:
        raise ValueError("weights must have a positive sum")
    return _weighted_median_padded(X, a)


# ----------------------------------------------------------------------------
# Single-set Soft Median

def _distances(X, center):
    diff = X - center
    return np.sqrt(np.einsum("...ij,...ij->...i", diff, diff)), diff


def soft_median_weights(X, cfg=SoftMedianConfig(), a=None) -> np.ndarray:
    """Softmax weights s over the rows of X (before multiplying with ``a``)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m, d = X.shape
    center = weighted_dimensionwise_median(X, a)
    c, _ = _distances(X, center)
    T = _temp(cfg)
    if T == 0:
        s = np.zeros(m)
        live = np.ones(m, bool) if a is None else np.asarray(a) > 0
        s[np.flatnonzero(live)[np.argmin(c[live])]] = 1.0
        return s
    logits = -c / (T * np.sqrt(d))
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def soft_median(X, cfg=SoftMedianConfig()) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return soft_median_weights(X, cfg) @ X


def weighted_soft_median(X, a, cfg=SoftMedianConfig()) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("weights must be nonnegative")
    if a.sum() <= 0:
        raise ValueError("weights must not all be zero")
    sa = soft_median_weights(X, cfg, a) * a
    return (a.sum() / sa.sum()) * sa @ X


def weighted_soft_median_grad(X, a, g, cfg=SoftMedianConfig()):
    """Gradients of ``g . weighted_soft_median(X, a)`` w.r.t. X and a.

    The dimension-wise median is treated as a constant.
    """
    out, state = _wsm_forward(np.asarray(X, float)[None], np.asarray(a, float)[None], _temp(cfg))
    dX, da = _wsm_backward(state, np.asarray(g, float)[None])
    return dX[0], da[0]


# ----------------------------------------------------------------------------
# Batched kernel on padded neighborhoods: X (n, L, d), a (n, L)

def _wsm_forward(X, a, T):
    n, L, d = X.shape
    S = a.sum(axis=1)
    center = _weighted_median_padded(X, a)
    c, diff = _distances(X, center[:, None, :])
    live = a > 0
    if T == 0:
        cc = np.where(live, c, np.inf)
        q = np.zeros_like(a)
        q[np.arange(n), np.argmin(cc, axis=1)] = 1.0
        q[S == 0] = 0.0
        e = q.copy()
        R = np.ones(n)
        scale = np.inf
    else:
        scale = T * np.sqrt(d)
        logits = -c / scale
        shift = np.where(live, logits, -np.inf).max(axis=1, keepdims=True)
        shift[~np.isfinite(shift)] = 0.0
        # zero-weight entries keep a finite e so d/da stays exact at a = 0
        e = np.exp(np.minimum(logits - shift, 700.0))
        r = a * e
        R = r.sum(axis=1)
        Rsafe = np.where(R > 0, R, 1.0)
        q = r / Rsafe[:, None]
    out = S[:, None] * np.einsum("nl,nld->nd", q, X)
    state = dict(X=X, a=a, S=S, q=q, e=e, R=R, c=c, diff=diff, scale=scale, out=out)
    return out, state


def _wsm_backward(state, g):
    X, a, S, q, e, R, c, diff, scale, out = (state[k] for k in
                                              ("X", "a", "S", "q", "e", "R", "c", "diff", "scale", "out"))
    u = np.einsum("nd,nld->nl", g, X)
    Ssafe = np.where(S > 0, S, 1.0)
    d_S = np.einsum("nd,nd->n", g, out) / Ssafe
    dX = (S[:, None] * q)[:, :, None] * g[:, None, :]
    if not np.isfinite(scale):
        # hard selection: piecewise constant weights
        da = np.where(S[:, None] > 0, d_S[:, None], 0.0) + 0 * a
        return dX, da
    Rsafe = np.where(R > 0, R, 1.0)
    d_r = (S / Rsafe)[:, None] * (u - np.einsum("nl,nl->n", q, u)[:, None])
    da = d_S[:, None] + d_r * e
    d_c = -(d_r * a) * e / scale
    csafe = np.where(c > 0, c, 1.0)
    dX += np.where(c > 0, d_c / csafe, 0.0)[:, :, None] * diff
    return dX, da


@dataclass
class _Chunk:
    rows: np.ndarray
    nnz_pos: np.ndarray   # (rows, L) positions into the CSR data array, -1 = padding
    state: dict


def _chunks(M: sp.csr_matrix, budget: int, width: int):
    lengths = np.diff(M.indptr)
    order = np.argsort(lengths, kind="stable")
    start = 0
    while start < order.size:
        L = max(int(lengths[order[start]]), 1)
        stop = start + 1
        while stop < order.size:
            L2 = max(int(lengths[order[stop]]), 1)
            if (stop - start + 1) * L2 * width > budget:
                break
            L = L2
            stop += 1
        yield order[start:stop], L
        start = stop


def soft_median_propagate(M: sp.csr_matrix, H: np.ndarray, temperature: float,
                          budget: int = 1 << 23):
    """Row-wise weighted Soft Median of ``H`` over the neighborhoods of ``M``.

    Row i of the output aggregates ``H[j]`` for every stored entry ``M[i, j]``
    with weight ``M[i, j]``; empty rows give zeros. Returns the output and an
    opaque state for :func:`soft_median_propagate_backward`.
    """
    n, width = H.shape
    out = np.zeros((M.shape[0], width))
    chunks = []
    for rows, L in _chunks(M, budget, width):
        starts = M.indptr[rows]
        lens = M.indptr[rows + 1] - starts
        offs = np.arange(L)
        pos = starts[:, None] + offs[None, :]
        valid = offs[None, :] < lens[:, None]
        pos = np.where(valid, pos, -1)
        cols = np.where(valid, M.indices[np.maximum(pos, 0)], 0)
        a = np.where(valid, M.data[np.maximum(pos, 0)], 0.0)
        X = H[cols] * valid[:, :, None]
        o, state = _wsm_forward(X, a, temperature)
        out[rows] = o
        chunks.append(_Chunk(rows, pos, state))
    return out, {"chunks": chunks, "shape": M.shape, "nnz": M.nnz, "cols": M.indices, "width": width}


def soft_median_propagate_backward(state, G: np.ndarray):
    """Gradients w.r.t. the aggregated features and the stored matrix values."""
    dH = np.zeros((state["shape"][1], state["width"]))
    dvals = np.zeros(state["nnz"])
    for ch in state["chunks"]:
        dX, da = _wsm_backward(ch.state, G[ch.rows])
        valid = ch.nnz_pos >= 0
        p = ch.nnz_pos[valid]
        dvals[p] += da[valid]
        np.add.at(dH, state["cols"][p], dX[valid])
    return dH, dvals


# ----------------------------------------------------------------------------
# Robustness diagnostics

def _aggregate(X, a, aggregator: str, T: float):
    if aggregator == "sum":
        return a @ X
    if aggregator in ("soft_median", "wsm"):
        return weighted_soft_median(X, a, T)
    raise ValueError(f"unknown aggregator {aggregator!r}")


def breakdown_stress(X, cfg=SoftMedianConfig(), outlier_count: int = 0,
                     magnitudes: Iterable[float] = tuple(10.0 ** np.arange(3, 13)),
                     direction: Optional[np.ndarray] = None, inflate: float = 2.0,
                     rng: Optional[np.random.Generator] = None) -> dict:
    """Replace ``outlier_count`` rows by one point mass and sweep its magnitude.

    Bounded means the Soft Median output stays inside the bounding box of the
    untouched rows, inflated by ``inflate`` about its center, for every magnitude.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if not 0 <= outlier_count <= n:
        raise ValueError("outlier_count out of range")
    rng = rng or np.random.default_rng(0)
    bad = rng.choice(n, size=outlier_count, replace=False) if outlier_count else np.zeros(0, int)
    clean = np.setdiff1d(np.arange(n), bad)
    if direction is None:
        direction = np.ones(d)
    direction = np.asarray(direction, float) / np.linalg.norm(direction)
    if clean.size:
        lo, hi = X[clean].min(axis=0), X[clean].max(axis=0)
    else:
        lo = hi = np.zeros(d)
    mid, half = (lo + hi) / 2, np.maximum((hi - lo) / 2, 1e-12)
    lo, hi = mid - inflate * half, mid + inflate * half
    norms, bounded = [], True
    for M in magnitudes:
        Xp = X.copy()
        Xp[bad] = M * direction
        out = soft_median(Xp, cfg)
        norms.append(float(np.linalg.norm(out)))
        if not (np.all(out >= lo) and np.all(out <= hi)):
            bounded = False
    return {"bounded": bounded, "max_norm": max(norms) if norms else 0.0, "norms": norms,
            "outliers": bad.tolist()}


def aggregation_bias(clean_X, clean_a, pert_X, pert_a, cfg=SoftMedianConfig(),
                     aggregator: str = "soft_median") -> dict:
    """L2 distance between the clean and the perturbed aggregate."""
    T = _temp(cfg)
    ref = _aggregate(np.asarray(clean_X, float), np.asarray(clean_a, float), aggregator, T)
    out = _aggregate(np.asarray(pert_X, float), np.asarray(pert_a, float), aggregator, T)
    bias = float(np.linalg.norm(out - ref))
    norm = float(np.linalg.norm(ref))
    return {"bias": bias, "rel_bias": bias / norm if norm > 0 else float("inf")}


def point_mass_perturbation(X, fraction: float, magnitude: float, rng: np.random.Generator,
                            direction: Optional[np.ndarray] = None) -> np.ndarray:
    X = np.array(X, dtype=np.float64)
    k = int(round(fraction * X.shape[0]))
    if direction is None:
        direction = np.ones(X.shape[1]) / np.sqrt(X.shape[1])
    idx = rng.choice(X.shape[0], size=k, replace=False)
    X[idx] = magnitude * np.asarray(direction, float)
    return X


def bias_sweep(m: int, d: int, epsilons: Sequence[float], magnitudes: Sequence[float],
               temperature: float = 0.2, seeds: Sequence[int] = range(10)) -> list:
    """Mean aggregation bias of weighted sum vs. Soft Median over Gaussian neighborhoods."""
    records = []
    for eps in epsilons:
        for mag in magnitudes:
            acc = {"sum": [], "soft_median": []}
            for seed in seeds:
                rng = np.random.default_rng(seed)
                X = rng.standard_normal((m, d))
                a = np.full(m, 1.0 / m)
                Xp = point_mass_perturbation(X, eps, mag, rng)
                for agg in acc:
                    acc[agg].append(aggregation_bias(X, a, Xp, a, temperature, agg))
            for agg, vals in acc.items():
                records.append({"epsilon": eps, "magnitude": mag,
                                "bias": float(np.mean([v["bias"] for v in vals])),
                                "rel_bias": float(np.mean([v["rel_bias"] for v in vals])),
                                "aggregator": agg})
    return records


def write_bias_csv(records: Sequence[dict], path) -> None:
    fields = ["epsilon", "magnitude", "bias", "rel_bias", "aggregator"]
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in records:
            w.writerow({k: r[k] for k in fields})
