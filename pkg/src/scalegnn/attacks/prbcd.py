"""Projected randomized block coordinate descent (PR-BCD) and dense L0-PGD.

Both attacks run the same optimization loop. PR-BCD keeps a random block of
candidate coordinates and resamples unpromising ones; dense PGD uses the full
candidate space as a single fixed block and computes gradients with dense
matrices.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..graph import Graph, degrees
from ..losses import LossKind, eval_loss
from ..models import ModelParams, backward_wrt_edges, forward_on_adjacency, program, run_program
from .core import (FLOOR, AttackError, AttackResult, CapacityError, StateMeter, apply_flips, as_budget,
                   perturb_weighted, project_onto_budget, sample_final)
from .spaces import CandidateSpace, EdgeLookup, space_for


@dataclass
class PRBCDConfig:
    block_size: int = 100_000
    epochs: int = 500
    resample_epochs: int = 400
    base_lr: float = 0.1
    seed: int = 0
    xi: float = 1e-5
    max_bisect: int = 64
    final_tries: int = 20
    lr_decay: float = 0.5
    plateau_patience: int = 10
    freeze_normalization: bool = False
    record_weights: bool = False


def sample_block(rng: np.random.Generator, size: int, b: int,
                 exclude: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw ``b`` indices with replacement and drop duplicates (and ``exclude``)."""
    if b >= size and (exclude is None or exclude.size == 0):
        return np.arange(size, dtype=np.int64)
    idx = np.unique(rng.integers(0, size, size=b, dtype=np.int64))
    if exclude is not None and exclude.size:
        idx = np.setdiff1d(idx, exclude, assume_unique=True)
    return idx


def resample(rng: np.random.Generator, idx: np.ndarray, p: np.ndarray, size: int, b: int,
             floor: float = FLOOR):
    """Keep the promising half of the block and refill it with fresh coordinates.

    If more than half of the entries are above the floor, the top half by weight
    survives; otherwise only the entries above the floor survive.
    """
    live = p > floor
    if live.sum() > 0.5 * idx.size:
        keep = np.sort(np.argsort(-p, kind="stable")[: idx.size // 2])
    else:
        keep = np.flatnonzero(live)
    kept_idx, kept_p = idx[keep], p[keep]
    if b >= size:
        fresh = np.setdiff1d(np.arange(size, dtype=np.int64), kept_idx)
    else:
        fresh = np.unique(rng.integers(0, size, size=max(b - kept_idx.size, 0), dtype=np.int64))
        fresh = np.setdiff1d(fresh, kept_idx)
    return np.r_[kept_idx, fresh], np.r_[kept_p, np.full(fresh.size, floor)]


def learning_rate(base_lr: float, delta: int, b: int, space_size: int) -> float:
    return base_lr * delta * math.sqrt(min(1.0, b / space_size))


def optimize(objective, space_size: int, delta: int, cfg: PRBCDConfig, rng: np.random.Generator,
             meter: StateMeter, block: Optional[np.ndarray] = None, resampling: bool = True):
    """The PR-BCD epoch loop. Returns (block indices, weights, trace, best epoch)."""
    b = cfg.block_size
    idx = sample_block(rng, space_size, b) if block is None else block
    p = np.full(idx.size, FLOOR)
    lr = learning_rate(cfg.base_lr, delta, b, space_size)
    e_res = cfg.resample_epochs if resampling else 0
    trace = []
    best = (-np.inf, idx, p, -1)
    wait = 0
    for t in range(cfg.epochs):
        loss, grad, acc = objective(idx, p)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise AttackError(f"non-finite loss or gradient at epoch {t}")
        rec = {"epoch": t, "loss": float(loss), "acc": float(acc), "lr": lr, "block": int(idx.size)}
        if cfg.record_weights:
            rec["p"] = p.copy()
        trace.append(rec)
        improved = loss > best[0]
        if improved:
            best = (loss, idx.copy(), p.copy(), t)
        if t >= e_res:
            wait = 0 if improved else wait + 1
            if wait >= cfg.plateau_patience:
                lr *= cfg.lr_decay
                wait = 0
        p = project_onto_budget(p + lr * grad, delta, cfg.xi, cfg.max_bisect)
        np.maximum(p, FLOOR, out=p)
        if t < e_res:
            idx, p = resample(rng, idx, p, space_size, b)
        meter.track(block=idx, weights=p, grad=grad, best_block=best[1], best_weights=best[2])
        if t == e_res - 1:
            # the fine-tuning stage starts from the best resampling-stage state
            _, idx, p, _ = best
            idx, p = idx.copy(), p.copy()
            best = (-np.inf, idx, p, best[3])
            wait = 0
    _, idx, p, best_epoch = best
    return idx, p, trace, best_epoch


# ----------------------------------------------------------------------------
# Objectives

class GcnObjective:
    """Relaxed and discrete attack loss of a GCN/SGC on A (+) p over a candidate space."""

    def __init__(self, params: ModelParams, adjacency: sp.csr_matrix, X: np.ndarray, labels: np.ndarray,
                 nodes: np.ndarray, loss_kind, space: CandidateSpace, freeze_normalization: bool = False):
        self.params, self.X, self.labels = params, X, labels
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.kind = LossKind.parse(loss_kind)
        self.space = space
        self.A = sp.csr_matrix(adjacency)
        self.coo = self.A.tocoo()
        self.lookup = EdgeLookup(self.A)
        self.clean_deg = degrees(self.A) + 1.0 if freeze_normalization else None

    def _acc(self, pred) -> float:
        return float(np.mean(pred.predicted[self.nodes] == self.labels[self.nodes]))

    def __call__(self, idx, p):
        rows, cols = self.space.decode(idx)
        s = self.lookup.signs(rows, cols)
        At = perturb_weighted(self.coo, rows, cols, s * p, self.space.symmetric)
        pred, tape = forward_on_adjacency(self.params, At, self.X, clean_degrees=self.clean_deg)
        ev = eval_loss(self.kind, pred.logits, self.labels, self.nodes)
        grad = backward_wrt_edges(tape, self.params, ev.grad_logits, rows, cols, s, self.space.symmetric)
        return ev.value, grad, self._acc(pred)

    def perturbed(self, idx) -> sp.csr_matrix:
        rows, cols = self.space.decode(np.asarray(idx, np.int64))
        return apply_flips(self.A, rows, cols, self.space.symmetric)

    def discrete(self, idx):
        pred, _ = forward_on_adjacency(self.params, self.perturbed(idx), self.X)
        return eval_loss(self.kind, pred.logits, self.labels, self.nodes).value, self._acc(pred)


class DenseGcnObjective(GcnObjective):
    """Same objective with dense n x n matrices and a dense backward pass."""

    def __init__(self, *args, cap: int = 5000, meter: Optional[StateMeter] = None, **kwargs):
        super().__init__(*args, **kwargs)
        n = self.A.shape[0]
        if n > cap:
            raise CapacityError(f"dense attack on n={n} exceeds the cap of {cap} nodes")
        if self.params.aggregation != "sum":
            raise ValueError("the dense objective supports weighted-sum aggregation only")
        self.Ad = self.A.toarray()
        self.rows, self.cols = self.space.decode(np.arange(self.space.size))
        self.signs = np.where(self.Ad[self.rows, self.cols] != 0, -1.0, 1.0)
        self.meter = meter

    def __call__(self, idx, p):
        n = self.Ad.shape[0]
        rows, cols, signs = self.rows[idx], self.cols[idx], self.signs[idx]
        P = np.zeros((n, n))
        P[rows, cols] = signs * p
        if self.space.symmetric:
            P[cols, rows] = signs * p
        At = self.Ad + P + np.eye(n)
        deg = At.sum(axis=1) if self.clean_deg is None else self.clean_deg
        dinv = 1.0 / np.sqrt(deg)
        Ahat = dinv[:, None] * At * dinv[None, :]
        ops = program(self.params)
        Z, inputs, _ = run_program(self.params, Ahat, self.X, ops)
        ev = eval_loss(self.kind, Z, self.labels, self.nodes)
        G = ev.grad_logits
        gA = np.zeros((n, n))
        for op, H in zip(reversed(ops), reversed(inputs)):
            if op[0] == "linear":
                G = G @ self.params.weights[op[1]].T
            elif op[0] == "relu":
                G = G * (H > 0)
            elif op[0] == "propagate":
                gA += G @ H.T
                G = Ahat.T @ G
        gAt = gA * (dinv[:, None] * dinv[None, :])
        if self.clean_deg is None:
            contrib = gA * Ahat
            gd = -(contrib.sum(axis=1) + contrib.sum(axis=0)) / (2.0 * deg)
            gAt += gd[:, None]
        grad = gAt[rows, cols]
        if self.space.symmetric:
            grad = grad + gAt[cols, rows]
        grad = signs * grad
        if self.meter is not None:
            self.meter.track(dense_perturbation=P, dense_adjacency=At, dense_grad=gAt,
                             candidate_rows=self.rows, candidate_cols=self.cols)
        acc = float(np.mean(np.argmax(Z[self.nodes], axis=1) == self.labels[self.nodes]))
        return ev.value, grad, acc


# ----------------------------------------------------------------------------
# Entry points

def _nodes(g: Graph, nodes):
    if nodes is not None:
        return np.asarray(nodes, dtype=np.int64)
    return g.splits.test if g.splits is not None else np.arange(g.n)


def _finish(objective: GcnObjective, idx, p, delta, cfg, rng, trace, best_epoch, meter, t0,
            name: str, eval_nodes, extra=None) -> AttackResult:
    pick = sample_final(p, delta, lambda pos: objective.discrete(idx[pos])[0], cfg.final_tries, rng)
    chosen = idx[pick["positions"]]
    rows, cols = objective.space.decode(chosen)
    adj = objective.perturbed(chosen)
    params, X, y = objective.params, objective.X, objective.labels
    clean_pred, _ = forward_on_adjacency(params, objective.A, X)
    adv_pred, _ = forward_on_adjacency(params, adj, X)
    clean_acc = float(np.mean(clean_pred.predicted[eval_nodes] == y[eval_nodes]))
    adv_acc = float(np.mean(adv_pred.predicted[eval_nodes] == y[eval_nodes]))
    conf = {"attack": name, **asdict(cfg), "budget": delta}
    return AttackResult(np.stack([rows, cols], axis=1), adj, trace, best_epoch, cfg.seed, delta,
                        objective.space.symmetric, clean_acc, adv_acc, meter.peak,
                        time.perf_counter() - t0, conf,
                        {"final_loss": pick["loss"], "accepted_samples": pick["accepted"], **(extra or {})})


def _empty_result(g, params, delta, cfg, name, eval_nodes, symmetric):
    pred, _ = forward_on_adjacency(params, g.adjacency, g.features)
    acc = float(np.mean(pred.predicted[eval_nodes] == g.labels[eval_nodes]))
    return AttackResult(np.zeros((0, 2)), g.adjacency, [], -1, cfg.seed, delta, symmetric, acc, acc,
                        0, 0.0, {"attack": name, **asdict(cfg), "budget": delta})


def prbcd_global(g: Graph, params: ModelParams, loss_kind, budget, cfg: PRBCDConfig = PRBCDConfig(),
                 attack_nodes=None, eval_nodes=None) -> AttackResult:
    """Global evasion attack on a GCN/SGC with PR-BCD."""
    delta = as_budget(budget).delta
    attack_nodes, eval_nodes = _nodes(g, attack_nodes), _nodes(g, eval_nodes)
    space = space_for(g.adjacency, g.directed)
    if delta == 0:
        return _empty_result(g, params, 0, cfg, "prbcd", eval_nodes, space.symmetric)
    if min(cfg.block_size, space.size) < delta:
        raise ValueError(f"block size {cfg.block_size} is smaller than the budget {delta}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    meter = StateMeter()
    obj = GcnObjective(params, g.adjacency, g.features, g.labels, attack_nodes, loss_kind, space,
                       cfg.freeze_normalization)
    idx, p, trace, best_epoch = optimize(obj, space.size, delta, cfg, rng, meter)
    return _finish(obj, idx, p, delta, cfg, rng, trace, best_epoch, meter, t0, "prbcd", eval_nodes)


def pgd_dense(g: Graph, params: ModelParams, loss_kind, budget, cfg: PRBCDConfig = PRBCDConfig(),
              attack_nodes=None, eval_nodes=None, cap: int = 5000) -> AttackResult:
    """Dense L0-PGD: the full candidate space as one fixed block, dense gradients."""
    delta = as_budget(budget).delta
    attack_nodes, eval_nodes = _nodes(g, attack_nodes), _nodes(g, eval_nodes)
    space = space_for(g.adjacency, g.directed)
    if g.n > cap:
        raise CapacityError(f"dense attack on n={g.n} exceeds the cap of {cap} nodes")
    if delta == 0:
        return _empty_result(g, params, 0, cfg, "pgd", eval_nodes, space.symmetric)
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    meter = StateMeter()
    obj = DenseGcnObjective(params, g.adjacency, g.features, g.labels, attack_nodes, loss_kind, space,
                            cfg.freeze_normalization, cap=cap, meter=meter)
    full = np.arange(space.size, dtype=np.int64)
    dense_cfg = PRBCDConfig(**{**asdict(cfg), "block_size": space.size})
    idx, p, trace, best_epoch = optimize(obj, space.size, delta, dense_cfg, rng, meter, block=full,
                                         resampling=False)
    return _finish(obj, idx, p, delta, dense_cfg, rng, trace, best_epoch, meter, t0, "pgd", eval_nodes)
