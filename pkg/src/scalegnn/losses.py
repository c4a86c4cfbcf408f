"""Global surrogate losses for structure attacks and their property checks.

Every loss is oriented so that the attacker maximizes it. Per node, with
``m = max_{c != y} z_c - z_y`` the logit margin:

=========== ===============================
CE          logsumexp(z) - z_y
Margin      m
CW          min(m, 0)
NCE         z_b - logsumexp(z), b = argmax_{c != y} z_c
EluMargin   -elu(-m)
MCE         CE restricted to correctly classified nodes
TanhMargin  tanh(m)
=========== ===============================
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax


class LossKind(str, enum.Enum):
    CE = "ce"
    MARGIN = "margin"
    CW = "cw"
    NCE = "nce"
    ELU_MARGIN = "elu_margin"
    MCE = "mce"
    TANH_MARGIN = "tanh_margin"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_").replace(" ", "_")
        aliases = {"tanh": "tanh_margin", "elu": "elu_margin", "cross_entropy": "ce"}
        return cls(aliases.get(key, key))


@dataclass
class Prediction:
    logits: np.ndarray
    confidences: np.ndarray = field(init=False)
    margins: np.ndarray = field(init=False)
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.confidences = softmax(self.logits, axis=1)
        ref = self.labels if self.labels is not None else self.predicted
        self.margins = probability_margin(self.confidences, ref)

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def _best_other(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    masked = values.copy()
    masked[np.arange(values.shape[0]), labels] = -np.inf
    return np.argmax(masked, axis=1)


def probability_margin(conf: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """min over c != y of p_y - p_c (C = 1 gives margin 1)."""
    n, C = conf.shape
    if C == 1:
        return np.ones(n)
    rows = np.arange(n)
    other = _best_other(conf, labels)
    return conf[rows, labels] - conf[rows, other]


@dataclass
class LossEval:
    value: float
    grad_logits: np.ndarray
    per_node: np.ndarray
    correct_set: Optional[np.ndarray] = None
    empty: bool = False


def _per_node(kind: LossKind, z: np.ndarray, y: np.ndarray):
    """Per-node losses and gradients w.r.t. the logits of those nodes."""
    n, C = z.shape
    rows = np.arange(n)
    onehot = np.zeros_like(z)
    onehot[rows, y] = 1.0
    if kind in (LossKind.CE, LossKind.MCE):
        lse = logsumexp(z, axis=1)
        return lse - z[rows, y], softmax(z, axis=1) - onehot
    b = _best_other(z, y)
    other = np.zeros_like(z)
    other[rows, b] = 1.0
    m = z[rows, b] - z[rows, y]
    dm = other - onehot
    if kind is LossKind.MARGIN:
        return m, dm
    if kind is LossKind.CW:
        neg = m < 0
        return np.where(neg, m, 0.0), dm * neg[:, None]
    if kind is LossKind.NCE:
        lse = logsumexp(z, axis=1)
        return z[rows, b] - lse, other - softmax(z, axis=1)
    if kind is LossKind.ELU_MARGIN:
        neg = m < 0
        e = np.exp(-np.maximum(m, 0.0))
        return np.where(neg, m, 1.0 - e), dm * np.where(neg, 1.0, e)[:, None]
    if kind is LossKind.TANH_MARGIN:
        t = np.tanh(m)
        return t, dm * (1.0 - t ** 2)[:, None]
    raise ValueError(f"unknown loss {kind}")


def eval_loss(kind, logits: np.ndarray, labels: np.ndarray, mask=None) -> LossEval:
    """Mean loss over ``mask`` (MCE: over correctly classified masked nodes)."""
    kind = LossKind.parse(kind)
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    y = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if mask is None:
        idx = np.arange(n)
    else:
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    per_node = np.zeros(n)
    grad = np.zeros_like(z)
    correct = None
    if kind is LossKind.MCE:
        correct = idx[np.argmax(z[idx], axis=1) == y[idx]]
        idx = correct
    if idx.size == 0:
        return LossEval(0.0, grad, per_node, correct, empty=True)
    vals, g = _per_node(kind, z[idx], y[idx])
    per_node[idx] = vals
    grad[idx] = g / idx.size
    return LossEval(float(vals.mean()), grad, per_node, correct)


# ----------------------------------------------------------------------------
# Property checks on the binary logit parameterization z = (z0, 0)

PROPERTY_TOL = 1e-12
ZERO_TOL = 1e-9


def psi_grid(size: int = 401) -> np.ndarray:
    grid = np.linspace(-1.0, 1.0, size + 2)[1:-1]
    return grid[grid != 0.0]


def _binary_eval(kind: LossKind, z0: np.ndarray):
    z = np.stack([z0, np.zeros_like(z0)], axis=1)
    y = np.zeros(z0.size, dtype=np.int64)
    vals = np.empty(z0.size)
    dz = np.empty(z0.size)
    for i in range(z0.size):
        ev = eval_loss(kind, z[i:i + 1], y[i:i + 1])
        vals[i] = ev.value
        dz[i] = ev.grad_logits[0, 0]
    return vals, dz


def check_loss_properties(kind, grid: Optional[Sequence[float]] = None) -> dict:
    """Numerically decide properties (I), (II), (A) and (B) for ``kind``.

    The true-class derivative dL/dz_y is evaluated on ``z = (2 artanh(psi), 0)``
    for each margin ``psi`` in the grid. Saturation (A) compares the loss at
    increasingly negative logits.
    """
    kind = LossKind.parse(kind)
    psi = psi_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    z0 = 2.0 * np.arctanh(psi)
    _, d = _binary_eval(kind, z0)
    neg, pos = psi < 0, psi > 0
    d_pos, d_neg = d[pos], d[neg]

    prop_i = bool(np.all(np.abs(d_neg) < ZERO_TOL))
    prop_ii = bool(np.all(np.diff(d_pos) > PROPERTY_TOL))
    far = -np.array([25.0, 50.0, 100.0, 200.0])
    vals_far, _ = _binary_eval(kind, far)
    steps = np.abs(np.diff(vals_far))
    prop_a = bool(np.all(np.isfinite(vals_far)) and steps[-1] < 1e-6 and np.all(steps[1:] <= steps[:-1] + 1e-15))
    prop_b = bool(np.all(d < 0) and np.all(np.diff(d_pos) > PROPERTY_TOL)
                  and np.all(np.diff(d_neg) < -PROPERTY_TOL))
    return {"loss": kind.value, "I": prop_i, "II": prop_ii, "A": prop_a, "B": prop_b,
            "grid_size": int(psi.size)}


# Definite cells of the reference property table (None = subjective "o"/"o/+").
REFERENCE_PROPERTIES = {
    LossKind.CE: {"I": False, "II": True, "A": False, "B": None},
    LossKind.MARGIN: {"I": False, "II": False, "A": False, "B": False},
    LossKind.CW: {"I": True, "II": False, "A": True, "B": False},
    LossKind.NCE: {"I": None, "II": True, "A": True, "B": None},
    LossKind.ELU_MARGIN: {"I": None, "II": False, "A": True, "B": None},
    LossKind.MCE: {"I": True, "II": None, "A": True, "B": None},
    LossKind.TANH_MARGIN: {"I": None, "II": True, "A": True, "B": True},
}


# ----------------------------------------------------------------------------
# Margin histograms

HIST_BINS = np.linspace(-1.0, 1.0, 41)


def margin_distribution(pred: Prediction, labels, mask=None) -> dict:
    labels = np.asarray(labels, dtype=np.int64)
    psi = probability_margin(pred.confidences, labels)
    if mask is not None:
        mask = np.asarray(mask)
        psi = psi[np.flatnonzero(mask) if mask.dtype == bool else mask]
    counts, edges = np.histogram(np.clip(psi, -1, 1), bins=HIST_BINS)
    return {"psi": psi, "counts": counts, "edges": edges}
