"""DICE baseline: delete edges inside classes, connect nodes across classes."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from ..graph import Graph, degrees
from .core import AttackError, AttackResult, apply_flips, as_budget
from .spaces import EdgeLookup, space_for


@dataclass
class DICEConfig:
    seed: int = 0
    add_fraction: float = 0.6
    max_draws: int = 10_000_000


def _split(delta: int, add_fraction: float):
    n_add = int(round(add_fraction * delta))
    return n_add, delta - n_add


def _removals(rng, rows, cols, labels, deg, wanted, symmetric):
    """Same-label edges in random order, skipping any that would isolate a node."""
    same = np.flatnonzero(labels[rows] == labels[cols])
    chosen = []
    for e in rng.permutation(same):
        if len(chosen) == wanted:
            break
        i, j = rows[e], cols[e]
        if deg[i] > 1 and (deg[j] > 1 or not symmetric):
            chosen.append(e)
            deg[i] -= 1
            if symmetric:
                deg[j] -= 1
    return np.asarray(chosen, dtype=np.int64)


def dice(g: Graph, budget, cfg: DICEConfig = DICEConfig(), labels=None) -> AttackResult:
    """Global DICE. Shortfalls in removals are moved to additions."""
    t0 = time.perf_counter()
    delta = as_budget(budget).delta
    labels = g.labels if labels is None else np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    A = g.adjacency
    space = space_for(A, g.directed)
    coo = sp.triu(A, k=1).tocoo() if space.symmetric else A.tocoo()
    off = coo.row != coo.col
    rows, cols = coo.row[off].astype(np.int64), coo.col[off].astype(np.int64)
    n_add, n_rem = _split(delta, cfg.add_fraction)
    deg = np.diff(A.indptr).astype(np.int64)
    rem = _removals(rng, rows, cols, labels, deg, n_rem, space.symmetric)
    n_add += n_rem - rem.size

    # additions: rejection sampling of cross-label non-edges
    lookup = EdgeLookup(A)
    counts = np.bincount(labels, minlength=labels.max() + 1)
    cross_pairs = (g.n ** 2 - int((counts ** 2).sum()))
    cross_pairs = cross_pairs // 2 if space.symmetric else cross_pairs
    cross_edges = int(np.sum(labels[rows] != labels[cols]))
    if n_add > cross_pairs - cross_edges:
        raise AttackError("not enough cross-label non-edges to spend the budget")
    added = set()
    draws = 0
    while len(added) < n_add:
        if draws > cfg.max_draws:
            raise AttackError("DICE could not place all additions")
        k = 2 * (n_add - len(added)) + 16
        idx = rng.integers(0, space.size, size=k)
        draws += k
        r, c = space.decode(idx)
        ok = (labels[r] != labels[c]) & (lookup.values_at(r, c) == 0)
        for key in idx[ok]:
            if len(added) == n_add:
                break
            added.add(int(key))
    add_idx = np.array(sorted(added), dtype=np.int64)
    ar, ac = space.decode(add_idx)
    fr = np.r_[rows[rem], ar]
    fc = np.r_[cols[rem], ac]
    adj = apply_flips(A, fr, fc, space.symmetric)
    return AttackResult(np.stack([fr, fc], axis=1), adj, [], -1, cfg.seed, delta, space.symmetric,
                        runtime_s=time.perf_counter() - t0,
                        config={"attack": "dice", **asdict(cfg), "budget": delta},
                        extra={"added": int(ar.size), "removed": int(rem.size)})


def dice_local(g: Graph, target: int, budget, cfg: DICEConfig = DICEConfig(), labels=None) -> np.ndarray:
    """DICE restricted to row ``target``: returns the flipped columns."""
    delta = as_budget(budget).delta
    labels = g.labels if labels is None else np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    A = g.adjacency
    lo, hi = A.indptr[target], A.indptr[target + 1]
    nbrs = A.indices[lo:hi]
    nbrs = nbrs[nbrs != target]
    n_add, n_rem = _split(delta, cfg.add_fraction)
    same = rng.permutation(nbrs[labels[nbrs] == labels[target]])
    # keep at least one neighbor so the row never empties
    room = max(nbrs.size - 1, 0) if n_add == 0 else nbrs.size
    rem = same[: min(n_rem, room)]
    n_add += n_rem - rem.size
    pool = np.setdiff1d(np.flatnonzero(labels != labels[target]), nbrs)
    if pool.size < n_add:
        raise AttackError("not enough cross-label candidates for the local budget")
    add = rng.choice(pool, size=n_add, replace=False)
    return np.sort(np.r_[rem, add]).astype(np.int64)
