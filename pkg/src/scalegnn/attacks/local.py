"""Local PR-BCD against PPRGo.

Only row ``target`` of the adjacency is perturbed. Its PPR row is tracked with
the rank-one update, so the attack never recomputes PageRank while optimizing;
the final prediction is recomputed with power iteration on the perturbed graph.
"""
from __future__ import annotations

import time
from dataclasses import asdict
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..aggregation import weighted_soft_median, weighted_soft_median_grad
from ..graph import Graph
from ..losses import LossKind, eval_loss, probability_margin
from ..models import ModelParams, program, run_program
from ..ppr import PprMatrix, TeleportConfig, ppr_power_iteration, ppr_row_update, prime_rows
from .core import AttackResult, StateMeter, apply_flips, as_budget, sample_final
from .prbcd import PRBCDConfig, optimize
from .spaces import EdgeLookup, IncomingRow


def encode(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """PPRGo feature encoder (every op before the final aggregation)."""
    ops = program(params)
    assert ops[-1] == ("propagate",)
    H, _, _ = run_program(params, None, X, ops[:-1])
    return H


def aggregate_row(params: ModelParams, indices: np.ndarray, values: np.ndarray, H: np.ndarray,
                  grad_out: Optional[np.ndarray] = None):
    """Logits of one node from its PPR row; with ``grad_out`` also d/d(row values)."""
    if params.aggregation == "sum":
        z = values @ H[indices]
        g = None if grad_out is None else H[indices] @ grad_out
        return z, g
    # negative scores (possible with truncated rows) carry no weight
    a = np.maximum(values, 0.0)
    if a.sum() <= 0:
        z = np.zeros(H.shape[1])
        return z, (None if grad_out is None else np.zeros(indices.size))
    z = weighted_soft_median(H[indices], a, params.temperature)
    if grad_out is None:
        return z, None
    _, da = weighted_soft_median_grad(H[indices], a, grad_out, params.temperature)
    return z, np.where(values > 0, da, 0.0)


class PprGoRowObjective:
    """Logit-margin loss of ``target`` as a function of its perturbed PPR row."""

    def __init__(self, params: ModelParams, g: Graph, ppr: PprMatrix, target: int, label: int,
                 loss_kind=LossKind.MARGIN):
        self.params, self.target, self.label = params, int(target), int(label)
        self.kind = LossKind.parse(loss_kind)
        self.alpha, self.k = ppr.alpha, ppr.k
        self.H = encode(params, g.features)
        self.prime = prime_rows(ppr, ppr.alpha)
        A = g.adjacency
        lo, hi = A.indptr[target], A.indptr[target + 1]
        self.a_idx, self.a_val = A.indices[lo:hi].astype(np.int64), A.data[lo:hi].astype(np.float64)
        self.deg = float(self.a_val.sum())
        self.space = IncomingRow(g.n, target)
        self.lookup = EdgeLookup(A)
        self.n = g.n
        self.A = A

    def update(self, idx, p):
        _, cols = self.space.decode(idx)
        s = self.lookup.signs(np.full(cols.size, self.target), cols)
        return ppr_row_update(self.prime, self.target, self.a_idx, self.a_val, self.deg, cols, s, p,
                              self.alpha)

    def _loss(self, z):
        ev = eval_loss(self.kind, z[None, :], np.array([self.label]))
        return ev.value, ev.grad_logits[0]

    def __call__(self, idx, p):
        up = self.update(idx, p)
        z, _ = aggregate_row(self.params, up.indices, up.values, self.H)
        loss, gz = self._loss(z)
        _, g_vals = aggregate_row(self.params, up.indices, up.values, self.H, gz)
        g_row = np.zeros(self.n)
        g_row[up.indices] = g_vals
        return loss, up.vjp(g_row), float(np.argmax(z) == self.label)

    def discrete(self, idx):
        idx = np.asarray(idx, np.int64)
        up = self.update(idx, np.ones(idx.size))
        # the model only ever sees top-k rows, so truncate like the recomputation does
        keep = np.sort(np.argsort(-up.values, kind="stable")[:self.k])
        z, _ = aggregate_row(self.params, up.indices[keep], up.values[keep], self.H)
        return self._loss(z)[0], z

    def perturbed(self, idx) -> sp.csr_matrix:
        rows, cols = self.space.decode(np.asarray(idx, np.int64))
        return apply_flips(self.A, rows, cols, symmetric=False)


def recomputed_logits(params: ModelParams, adjacency: sp.csr_matrix, H: np.ndarray, target: int,
                      tcfg: TeleportConfig) -> np.ndarray:
    row = ppr_power_iteration(adjacency, tcfg, sources=[target])
    idx, vals = row.row(target)
    return aggregate_row(params, idx, vals, H)[0]


def _margin(z, label):
    from scipy.special import softmax
    return float(probability_margin(softmax(z)[None, :], np.array([label]))[0])


def prbcd_local_pprgo(g: Graph, params: ModelParams, ppr: PprMatrix, target: int, budget,
                      cfg: PRBCDConfig = PRBCDConfig(block_size=200, epochs=30, resample_epochs=20,
                                                     base_lr=0.1),
                      tcfg: Optional[TeleportConfig] = None, label: Optional[int] = None) -> AttackResult:
    """Local PR-BCD on the incoming-edge row of ``target`` of a PPRGo model."""
    t0 = time.perf_counter()
    delta = as_budget(budget).delta
    tcfg = tcfg or TeleportConfig(alpha=ppr.alpha, k=ppr.k)
    label = int(g.labels[target]) if label is None else int(label)
    obj = PprGoRowObjective(params, g, ppr, target, label)
    idx0, v0 = ppr.row(target)
    z_clean, _ = aggregate_row(params, idx0, v0, obj.H)
    clean_margin = _margin(z_clean, label)
    meter = StateMeter()
    conf = {"attack": "prbcd_local", **asdict(cfg), "budget": delta, "target": int(target)}
    if delta == 0:
        return AttackResult(np.zeros((0, 2)), g.adjacency, [], -1, cfg.seed, 0, False, config=conf,
                            extra={"clean_margin": clean_margin, "approx_margin": clean_margin,
                                   "recomputed_margin": clean_margin, "margin_gap": 0.0,
                                   "flipped": clean_margin < 0})
    if cfg.block_size <= delta:
        raise ValueError("the local attack needs a block larger than the budget")
    rng = np.random.default_rng(cfg.seed)
    idx, p, trace, best_epoch = optimize(obj, obj.space.size, delta, cfg, rng, meter)
    pick = sample_final(p, delta, lambda pos: obj.discrete(idx[pos])[0], cfg.final_tries, rng)
    chosen = np.sort(idx[pick["positions"]])
    _, z_approx = obj.discrete(chosen)
    adj = obj.perturbed(chosen)
    z_exact = recomputed_logits(params, adj, obj.H, target, tcfg)
    rows, cols = obj.space.decode(chosen)
    approx_margin, exact_margin = _margin(z_approx, label), _margin(z_exact, label)
    return AttackResult(np.stack([rows, cols], axis=1), adj, trace, best_epoch, cfg.seed, delta, False,
                        peak_bytes=meter.peak, runtime_s=time.perf_counter() - t0, config=conf,
                        extra={"clean_margin": clean_margin, "approx_margin": approx_margin,
                               "recomputed_margin": exact_margin,
                               "margin_gap": abs(approx_margin - exact_margin),
                               "flipped": exact_margin < 0})


def local_margin_after(g: Graph, params: ModelParams, cols: np.ndarray, target: int,
                       tcfg: TeleportConfig, H: Optional[np.ndarray] = None) -> float:
    """Recomputed margin of ``target`` after toggling entries (target, cols)."""
    H = encode(params, g.features) if H is None else H
    cols = np.asarray(cols, np.int64)
    adj = apply_flips(g.adjacency, np.full(cols.size, target), cols, symmetric=False)
    return _margin(recomputed_logits(params, adj, H, target, tcfg), int(g.labels[target]))
