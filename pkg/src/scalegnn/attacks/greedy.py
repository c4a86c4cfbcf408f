"""Greedy attacks: GR-BCD (block-wise greedy flips under an even budget
schedule) and dense greedy FGSM (one flip per step)."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from ..graph import Graph
from ..models import ModelParams, forward_on_adjacency
from .core import FLOOR, AttackResult, CapacityError, StateMeter, as_budget
from .prbcd import DenseGcnObjective, GcnObjective, _nodes, sample_block
from .spaces import space_for


@dataclass
class GRBCDConfig:
    block_size: int = 100_000
    epochs: int = 100
    seed: int = 0
    freeze_normalization: bool = False


def budget_schedule(delta: int, epochs: int) -> np.ndarray:
    """Even split of ``delta`` over ``epochs`` (earlier epochs take the remainder)."""
    if delta < epochs:
        return np.ones(delta, dtype=np.int64)
    sched = np.full(epochs, delta // epochs, dtype=np.int64)
    sched[: delta % epochs] += 1
    return sched


def _greedy_loop(make_objective, adjacency, space, schedule, block_fn, meter):
    """Flip the top-gradient block entries epoch by epoch on the running graph."""
    flipped = np.zeros(0, dtype=np.int64)
    trace = []
    A = adjacency
    for t, k in enumerate(schedule):
        obj = make_objective(A)
        idx = block_fn(flipped)
        if idx.size < k:
            raise ValueError(f"block of size {idx.size} cannot hold {k} flips")
        p = np.full(idx.size, FLOOR)
        loss, grad, acc = obj(idx, p)
        order = np.argsort(-grad, kind="stable")[:k]
        new = idx[order]
        A = obj.perturbed(new)
        flipped = np.union1d(flipped, new)
        trace.append({"epoch": t, "loss": float(loss), "acc": float(acc), "flips": int(k),
                      "block": int(idx.size)})
        meter.track(block=idx, grad=grad, flipped=flipped)
    return A, flipped, trace


def _result(g, params, space, A_adv, flipped, trace, cfg, delta, meter, t0, eval_nodes, name):
    rows, cols = space.decode(flipped)
    y = g.labels
    clean, _ = forward_on_adjacency(params, g.adjacency, g.features)
    adv, _ = forward_on_adjacency(params, A_adv, g.features)
    return AttackResult(np.stack([rows, cols], axis=1), A_adv, trace, len(trace) - 1, cfg.seed, delta,
                        space.symmetric,
                        float(np.mean(clean.predicted[eval_nodes] == y[eval_nodes])),
                        float(np.mean(adv.predicted[eval_nodes] == y[eval_nodes])),
                        meter.peak, time.perf_counter() - t0, {"attack": name, **asdict(cfg), "budget": delta})


def grbcd_global(g: Graph, params: ModelParams, loss_kind, budget, cfg: GRBCDConfig = GRBCDConfig(),
                 attack_nodes=None, eval_nodes=None) -> AttackResult:
    delta = as_budget(budget).delta
    attack_nodes, eval_nodes = _nodes(g, attack_nodes), _nodes(g, eval_nodes)
    space = space_for(g.adjacency, g.directed)
    schedule = budget_schedule(delta, cfg.epochs)
    if schedule.size and cfg.block_size < schedule.max():
        raise ValueError(f"block size {cfg.block_size} is smaller than the per-epoch budget {schedule.max()}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    meter = StateMeter()

    def make(A):
        return GcnObjective(params, A, g.features, g.labels, attack_nodes, loss_kind, space,
                            cfg.freeze_normalization)

    A_adv, flipped, trace = _greedy_loop(make, g.adjacency, space, schedule,
                                         lambda ex: sample_block(rng, space.size, cfg.block_size, ex), meter)
    return _result(g, params, space, A_adv, flipped, trace, cfg, delta, meter, t0, eval_nodes, "grbcd")


@dataclass
class FGSMConfig:
    seed: int = 0
    freeze_normalization: bool = False


def fgsm_dense(g: Graph, params: ModelParams, loss_kind, budget, cfg: FGSMConfig = FGSMConfig(),
               attack_nodes=None, eval_nodes=None, cap: int = 5000) -> AttackResult:
    """Greedy FGSM: ``delta`` steps, each flipping the single best entry of the dense gradient."""
    delta = as_budget(budget).delta
    if g.n > cap:
        raise CapacityError(f"dense attack on n={g.n} exceeds the cap of {cap} nodes")
    attack_nodes, eval_nodes = _nodes(g, attack_nodes), _nodes(g, eval_nodes)
    space = space_for(g.adjacency, g.directed)
    t0 = time.perf_counter()
    meter = StateMeter()

    def make(A):
        return DenseGcnObjective(params, A, g.features, g.labels, attack_nodes, loss_kind, space,
                                 cfg.freeze_normalization, cap=cap, meter=meter)

    full = np.arange(space.size, dtype=np.int64)
    A_adv, flipped, trace = _greedy_loop(make, g.adjacency, space, np.ones(delta, dtype=np.int64),
                                         lambda ex: np.setdiff1d(full, ex), meter)
    return _result(g, params, space, A_adv, flipped, trace, cfg, delta, meter, t0, eval_nodes, "fgsm")
