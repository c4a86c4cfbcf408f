"""Shared attack machinery: budgets, flip application, L0 projection, final
sampling, memory telemetry and the result container."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

FLOOR = 1e-12


class AttackError(RuntimeError):
    pass


class CapacityError(MemoryError):
    """Dense attack refused because the candidate space is too large."""


@dataclass(frozen=True)
class AttackBudget:
    delta: int
    epsilon: Optional[float] = None

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("budget must be nonnegative")

    @classmethod
    def from_epsilon(cls, epsilon: float, n_edges: int) -> "AttackBudget":
        if not 0 < epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        delta = int(math.floor(epsilon * n_edges))
        if delta < 1:
            raise ValueError(f"epsilon={epsilon} gives an empty budget for m={n_edges}")
        return cls(delta, epsilon)


def as_budget(budget) -> AttackBudget:
    return budget if isinstance(budget, AttackBudget) else AttackBudget(int(budget))


class StateMeter:
    """Bytes held by attack-owned arrays (current and peak)."""

    def __init__(self):
        self.current = {}
        self.peak = 0

    def track(self, **arrays) -> None:
        for name, arr in arrays.items():
            self.current[name] = 0 if arr is None else int(np.asarray(arr).nbytes)
        self.peak = max(self.peak, sum(self.current.values()))

    def release(self, *names) -> None:
        for name in names:
            self.current.pop(name, None)


# ----------------------------------------------------------------------------
# Projection and sampling

def project_onto_budget(p, delta: float, xi: float = 1e-5, max_iter: int = 64,
                        return_info: bool = False):
    """Project ``p`` onto {x in [0, 1]^b : sum(x) <= delta}.

    If clipping alone is feasible it is the answer; otherwise the shift ``eta`` of
    ``clip(p - eta)`` is found by bisection. The upper end of the final bracket
    is returned so the budget holds exactly.
    """
    p = np.asarray(p, dtype=np.float64)
    clipped = np.clip(p, 0.0, 1.0)
    if clipped.sum() <= delta:
        return (clipped, {"iterations": 0, "eta": 0.0}) if return_info else clipped
    lo, hi = float(p.min()) - 1.0, float(p.max())
    its = 0
    while hi - lo > xi and its < max_iter:
        mid = 0.5 * (lo + hi)
        if np.clip(p - mid, 0.0, 1.0).sum() > delta:
            lo = mid
        else:
            hi = mid
        its += 1
    out = np.clip(p - hi, 0.0, 1.0)
    return (out, {"iterations": its, "eta": hi}) if return_info else out


def top_delta(p: np.ndarray, delta: int, floor: float = FLOOR) -> np.ndarray:
    """Positions of the ``delta`` largest entries above ``floor`` (ties: lower position)."""
    order = np.argsort(-p, kind="stable")[:delta]
    return np.sort(order[p[order] > floor])


def sample_final(p, delta: int, evaluate: Callable[[np.ndarray], float], tries: int = 20,
                 rng: Optional[np.random.Generator] = None, floor: float = FLOOR) -> dict:
    """Turn relaxed weights into at most ``delta`` discrete flips.

    The first candidate is the top-``delta`` mass; the others are Bernoulli draws
    (draws above budget are discarded). ``evaluate(positions)`` scores a
    candidate (higher is better for the attacker); earlier candidates win ties.
    """
    p = np.asarray(p, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    best = top_delta(p, delta, floor)
    best_loss = evaluate(best)
    accepted = 1
    for _ in range(tries - 1):
        pos = np.flatnonzero(rng.random(p.size) < p)
        if pos.size > delta:
            continue
        accepted += 1
        loss = evaluate(pos)
        if loss > best_loss:
            best, best_loss = pos, loss
    return {"positions": best, "loss": float(best_loss), "accepted": accepted}


# ----------------------------------------------------------------------------
# Flips

def perturb_weighted(A_coo: sp.coo_matrix, rows, cols, delta_vals, symmetric: bool) -> sp.csr_matrix:
    """A plus ``delta_vals`` at (rows, cols) (and mirrored), keeping every touched entry stored."""
    rows = np.asarray(rows, np.int64)
    cols = np.asarray(cols, np.int64)
    delta_vals = np.asarray(delta_vals, np.float64)
    if symmetric:
        rows, cols = np.r_[rows, cols], np.r_[cols, rows]
        delta_vals = np.r_[delta_vals, delta_vals]
    M = sp.coo_matrix((np.r_[A_coo.data, delta_vals], (np.r_[A_coo.row, rows], np.r_[A_coo.col, cols])),
                      shape=A_coo.shape).tocsr()
    M.sort_indices()
    return M


def apply_flips(A: sp.csr_matrix, rows, cols, symmetric: bool) -> sp.csr_matrix:
    """Toggle entries (XOR on the sparsity pattern): stored entries vanish, absent ones become 1."""
    A = sp.csr_matrix(A)
    n_cols = A.shape[1]
    rows = np.asarray(rows, np.int64)
    cols = np.asarray(cols, np.int64)
    if symmetric:
        rows, cols = np.r_[rows, cols], np.r_[cols, rows]
    flip_keys = np.unique(rows * n_cols + cols)
    coo = A.tocoo()
    keys = coo.row.astype(np.int64) * n_cols + coo.col
    keep = ~np.isin(keys, flip_keys)
    added = np.setdiff1d(flip_keys, keys)
    r = np.r_[coo.row[keep], added // n_cols]
    c = np.r_[coo.col[keep], added % n_cols]
    v = np.r_[coo.data[keep], np.ones(added.size)]
    out = sp.csr_matrix((v, (r, c)), shape=A.shape)
    out.sort_indices()
    return out


# ----------------------------------------------------------------------------
# Result

@dataclass
class AttackResult:
    flips: np.ndarray                 # (k, 2) node pairs
    perturbed_adjacency: sp.csr_matrix
    trace: list
    best_epoch: int
    seed: int
    budget: int
    symmetric: bool = True
    clean_acc: Optional[float] = None
    adv_acc: Optional[float] = None
    peak_bytes: int = 0
    runtime_s: float = 0.0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.flips = np.asarray(self.flips, dtype=np.int64).reshape(-1, 2)
        if self.flips.shape[0] > self.budget:
            raise AttackError("flip set exceeds the budget")

    @property
    def n_flips(self) -> int:
        return int(self.flips.shape[0])

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, np.generic):
                return v.item()
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v
        return clean({"flips": self.flips, "trace": self.trace, "best_epoch": self.best_epoch,
                      "seed": self.seed, "budget": self.budget, "symmetric": self.symmetric,
                      "clean_acc": self.clean_acc, "adv_acc": self.adv_acc,
                      "peak_bytes": self.peak_bytes, "config": self.config, "extra": self.extra})

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=1))
        tmp.replace(path)

    def write_diff(self, path, clean: sp.csr_matrix) -> None:
        """Edge-list diff: one ``src dst +1|-1`` line per flip."""
        vals = np.asarray(clean[self.flips[:, 0], self.flips[:, 1]]).ravel() if self.n_flips else []
        with open(path, "w", encoding="utf-8") as fh:
            for (s, t), v in zip(self.flips, vals):
                fh.write(f"{s} {t} {'-1' if v != 0 else '+1'}\n")


def read_diff(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                s, t, _ = line.split()
                pairs.append((int(s), int(t)))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
