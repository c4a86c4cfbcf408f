"""GCN, SGC, GDC-GCN and PPRGo with hand-written forward/backward passes.

A model is a short program of ops (``linear``, ``propagate``, ``bias``,
``relu``, ``dropout``). The forward pass records a tape that the backward pass
replays in reverse to obtain parameter gradients and gradients with respect to
the values of the message-passing matrix. For GCN-normalized matrices those are
chained through the normalization to the raw (perturbed) edge weights.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .aggregation import soft_median_propagate, soft_median_propagate_backward
from .graph import Graph, add_self_loops, degrees, scale_entries
from .losses import LossKind, Prediction, eval_loss

KINDS = ("GCN", "SGC", "GDC", "PPRGo")


class StaleTapeError(RuntimeError):
    """The tape was recorded for different parameters or a different matrix."""


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelParams:
    kind: str
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_dim: int
    aggregation: str = "sum"          # "sum" or "soft_median"
    temperature: float = 0.5
    steps: int = 2                    # propagation steps for SGC
    seed: Optional[int] = None
    version: int = 0
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.aggregation not in ("sum", "soft_median"):
            raise ValueError("aggregation must be 'sum' or 'soft_median'")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("inconsistent layer shapes")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.hidden_dim, self.aggregation, self.temperature, self.steps,
                           self.seed, self.version, dict(self.history))

    def touch(self) -> None:
        self.version += 1

    # -- checkpoints ------------------------------------------------------
    def save(self, path) -> None:
        """Binary blob (u32 count, per array u32 ndim + u32 dims, then f64 payloads) + JSON manifest."""
        path = Path(path)
        arrays = self.arrays()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(arrays)))
            for a in arrays:
                fh.write(struct.pack("<I", a.ndim))
                fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            for a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        manifest = {"kind": self.kind, "dims": [self.in_dim] + [w.shape[1] for w in self.weights],
                    "hidden_dim": self.hidden_dim, "n_layers": self.n_layers,
                    "aggregation": self.aggregation, "temperature": self.temperature,
                    "steps": self.steps, "seed": self.seed}
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path) -> "ModelParams":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        raw = path.read_bytes()
        (count,) = struct.unpack_from("<I", raw, 0)
        pos, shapes = 4, []
        for _ in range(count):
            (nd,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shapes.append(struct.unpack_from(f"<{nd}I", raw, pos))
            pos += 4 * nd
        arrays = []
        for shp in shapes:
            size = int(np.prod(shp))
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shp).copy())
            pos += 8 * size
        k = meta["n_layers"]
        return cls(meta["kind"], arrays[:k], arrays[k:], meta["hidden_dim"], meta["aggregation"],
                   meta["temperature"], meta["steps"], meta["seed"])


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(kind: str, in_dim: int, n_classes: int, hidden_dim: int = 64, n_layers: int = 2,
                seed: int = 0, aggregation: str = "sum", temperature: float = 0.5,
                steps: int = 2) -> ModelParams:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    if kind == "SGC":
        dims = [in_dim, n_classes]
    else:
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [n_classes]
    weights = [glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return ModelParams(kind, weights, biases, hidden_dim, aggregation, temperature, steps, seed)


def program(params: ModelParams, dropout: float = 0.0) -> list:
    """Op sequence of the model; PPRGo's final ``propagate`` uses the PPR rows."""
    ops = []
    L = params.n_layers
    if params.kind == "SGC":
        ops += [("linear", 0)] + [("propagate",)] * params.steps + [("bias", 0)]
        return ops
    for l in range(L):
        if dropout > 0:
            ops.append(("dropout",))
        ops.append(("linear", l))
        if params.kind != "PPRGo":
            ops.append(("propagate",))
        ops.append(("bias", l))
        if l < L - 1:
            ops.append(("relu",))
    if params.kind == "PPRGo":
        ops.append(("propagate",))
    return ops


@dataclass
class ForwardTape:
    ops: list
    inputs: list                 # input of every op
    states: list                 # per-op auxiliary state (soft median, dropout mask)
    matrix: sp.csr_matrix        # message-passing matrix actually used
    params_version: int
    params_id: int
    adjacency: Optional[sp.csr_matrix] = None     # raw perturbed matrix (with self-loops)
    deg: Optional[np.ndarray] = None               # degrees used in the normalization
    frozen: bool = False
    output: Optional[np.ndarray] = None


def _propagate(params: ModelParams, M: sp.csr_matrix, H: np.ndarray):
    if params.aggregation == "soft_median":
        return soft_median_propagate(M, H, params.temperature)
    return M @ H, None


def run_program(params: ModelParams, M: sp.csr_matrix, X: np.ndarray, ops: list,
                rng: Optional[np.random.Generator] = None, dropout: float = 0.0):
    inputs, states = [], []
    H = X
    for op in ops:
        inputs.append(H)
        state = None
        name = op[0]
        if name == "linear":
            H = H @ params.weights[op[1]]
        elif name == "bias":
            H = H + params.biases[op[1]]
        elif name == "relu":
            H = np.maximum(H, 0.0)
        elif name == "propagate":
            H, state = _propagate(params, M, H)
        elif name == "dropout":
            keep = rng.random(H.shape) >= dropout
            state = keep / (1.0 - dropout)
            H = H * state
        else:
            raise ValueError(name)
        states.append(state)
    return H, inputs, states


def _check_inputs(params: ModelParams, M: sp.csr_matrix, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ValueError(f"features have {X.shape[-1]} columns, model expects {params.in_dim}")
    if M.shape[1] != X.shape[0]:
        raise ValueError("message-passing matrix does not match the number of nodes")


def forward(params: ModelParams, mp_matrix: sp.csr_matrix, X: np.ndarray, *,
            labels=None, dropout: float = 0.0, rng=None):
    """Forward pass on a given (already normalized) message-passing matrix.

    For PPRGo ``mp_matrix`` holds the PPR rows of the queried nodes.
    """
    M = sp.csr_matrix(mp_matrix)
    X = np.asarray(X, dtype=np.float64)
    _check_inputs(params, M, X)
    if params.kind != "PPRGo" and M.shape[0] != M.shape[1]:
        raise ValueError("message-passing matrix must be square")
    ops = program(params, dropout)
    Z, inputs, states = run_program(params, M, X, ops, rng, dropout)
    tape = ForwardTape(ops, inputs, states, M, params.version, id(params), output=Z)
    return Prediction(Z, labels), tape


def gcn_matrix(adjacency: sp.csr_matrix, clean_degrees: Optional[np.ndarray] = None):
    """GCN normalization of ``adjacency + I``; returns (normalized, A + I, degrees)."""
    At = add_self_loops(adjacency)
    deg = degrees(At) if clean_degrees is None else np.asarray(clean_degrees, float)
    if np.any(deg <= 0):
        raise ValueError("non-positive degree in GCN normalization")
    dinv = 1.0 / np.sqrt(deg)
    return scale_entries(At, dinv, dinv), At, deg


def forward_on_adjacency(params: ModelParams, adjacency: sp.csr_matrix, X: np.ndarray, *,
                         labels=None, clean_degrees: Optional[np.ndarray] = None):
    """GCN/SGC forward on a raw weighted adjacency (normalized internally).

    With ``clean_degrees`` the normalization is frozen at those degrees.
    """
    if params.kind not in ("GCN", "SGC"):
        raise ValueError("edge-weight forward is defined for GCN and SGC")
    M, At, deg = gcn_matrix(adjacency, clean_degrees)
    pred, tape = forward(params, M, X, labels=labels)
    tape.adjacency, tape.deg, tape.frozen = At, deg, clean_degrees is not None
    return pred, tape


def pprgo_forward(params: ModelParams, ppr_rows, X: np.ndarray, nodes, labels=None):
    """PPRGo logits of ``nodes``: aggregation of encoded features weighted by PPR scores."""
    from .ppr import PprMatrix
    nodes = np.asarray(nodes, dtype=np.int64)
    if isinstance(ppr_rows, PprMatrix):
        for v in nodes:
            if not ppr_rows.has_row(int(v)):
                raise ValueError(f"missing PPR row for node {v}")
        M = ppr_rows.matrix[nodes]
    else:
        M = sp.csr_matrix(ppr_rows)[nodes]
    lab = None if labels is None else np.asarray(labels)[nodes]
    return forward(params, M, X, labels=lab)


def _check_tape(tape: ForwardTape, params: ModelParams):
    if tape.params_id != id(params) or tape.params_version != params.version:
        raise StaleTapeError("tape does not belong to the current parameters")


def backward(tape: ForwardTape, params: ModelParams, loss_grad: np.ndarray, *,
             need_params: bool = True, need_matrix: bool = False):
    """Reverse pass. Returns (parameter grads or None, d loss / d matrix values or None, d X)."""
    _check_tape(tape, params)
    G = np.asarray(loss_grad, dtype=np.float64)
    M = tape.matrix
    gW = [np.zeros_like(w) for w in params.weights] if need_params else None
    gb = [np.zeros_like(b) for b in params.biases] if need_params else None
    gvals = np.zeros(M.nnz) if need_matrix else None
    if need_matrix:
        rows = np.repeat(np.arange(M.shape[0]), np.diff(M.indptr))
    MT = None
    for op, H, state in zip(reversed(tape.ops), reversed(tape.inputs), reversed(tape.states)):
        name = op[0]
        if name == "linear":
            if need_params:
                gW[op[1]] += H.T @ G
            G = G @ params.weights[op[1]].T
        elif name == "bias":
            if need_params:
                gb[op[1]] += G.sum(axis=0)
        elif name == "relu":
            G = G * (H > 0)
        elif name == "dropout":
            G = G * state
        elif name == "propagate":
            if state is not None:
                dH, dv = soft_median_propagate_backward(state, G)
                if need_matrix:
                    gvals += dv
                G = dH
            else:
                if need_matrix:
                    # chunked so that G[rows] never holds nnz x width at once
                    step = max(1, (1 << 22) // max(G.shape[1], 1))
                    for lo in range(0, M.nnz, step):
                        hi = min(lo + step, M.nnz)
                        gvals[lo:hi] += np.einsum("ij,ij->i", G[rows[lo:hi]], H[M.indices[lo:hi]])
                if MT is None:
                    MT = M.T.tocsr()
                G = MT @ G
    grads = (gW, gb) if need_params else None
    return grads, gvals, G


def _lookup(M: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Positions of (rows, cols) in the CSR data array (-1 if absent)."""
    n_cols = M.shape[1]
    stored_rows = np.repeat(np.arange(M.shape[0]), np.diff(M.indptr))
    keys = stored_rows.astype(np.int64) * n_cols + M.indices
    q = np.asarray(rows, np.int64) * n_cols + np.asarray(cols, np.int64)
    pos = np.searchsorted(keys, q)
    pos_c = np.minimum(pos, max(keys.size - 1, 0))
    found = (pos < keys.size) & (keys[pos_c] == q) if keys.size else np.zeros(q.size, bool)
    return np.where(found, pos_c, -1)


def backward_wrt_edges(tape: ForwardTape, params: ModelParams, loss_grad: np.ndarray,
                       rows, cols, signs=None, symmetric: bool = False) -> np.ndarray:
    """d loss / d p for candidate edge weights, where entry (row, col) of the
    raw adjacency equals ``A + sign * p``.

    With ``symmetric`` each candidate also drives the mirrored entry (col, row).
    Candidates must be stored in the taped adjacency (possibly as explicit zeros).
    """
    if tape.adjacency is None:
        raise ValueError("tape was not recorded on a raw adjacency")
    _, gvals, _ = backward(tape, params, loss_grad, need_params=False, need_matrix=True)
    M, At, deg = tape.matrix, tape.adjacency, tape.deg
    stored_rows = np.repeat(np.arange(M.shape[0]), np.diff(M.indptr))
    # dL/dAt_ij through the scaling 1/sqrt(d_i d_j), then through the degrees
    scale = 1.0 / np.sqrt(deg[stored_rows] * deg[M.indices])
    g_raw = gvals * scale
    if not tape.frozen:
        contrib = gvals * M.data
        g_deg = -(np.bincount(stored_rows, contrib, minlength=deg.size)
                  + np.bincount(M.indices, contrib, minlength=deg.size)) / (2.0 * deg)
        g_raw = g_raw + g_deg[stored_rows]
    rows = np.asarray(rows, np.int64)
    cols = np.asarray(cols, np.int64)
    pos = _lookup(At, rows, cols)
    if np.any(pos < 0):
        raise ValueError("candidate edge is not stored in the taped adjacency")
    out = g_raw[pos]
    if symmetric:
        pos_t = _lookup(At, cols, rows)
        if np.any(pos_t < 0):
            raise ValueError("mirrored candidate edge is not stored in the taped adjacency")
        out = out + g_raw[pos_t]
    if signs is not None:
        out = out * np.asarray(signs, float)
    return out


# ----------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 1e-3
    max_epochs: int = 3000
    patience: int = 300
    dropout: float = 0.5
    seed: int = 0


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g + self.wd * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(params: ModelParams, g: Graph, mp_matrix: sp.csr_matrix,
          cfg: TrainConfig = TrainConfig()) -> ModelParams:
    """Full-batch training with cross entropy on the train split and early
    stopping on the validation loss. Returns the best-validation parameters.

    For PPRGo ``mp_matrix`` is the (n x n) top-k PPR matrix.
    """
    if g.splits is None:
        raise ValueError("graph has no splits")
    if params.aggregation == "soft_median" and params.temperature == 0:
        # hard selection has no useful gradient; evaluation only
        raise ValueError("temperature 0 is supported for evaluation, not training")
    params = params.copy()
    tr, va = g.splits.train, g.splits.val
    X, y = g.features, g.labels
    rng = np.random.default_rng(cfg.seed)
    M = sp.csr_matrix(mp_matrix)
    # PPRGo only needs the rows of the nodes that carry a loss
    if params.kind == "PPRGo":
        M = M[np.r_[tr, va]]
        y = y[np.r_[tr, va]]
        tr, va = np.arange(tr.size), tr.size + np.arange(va.size)
    opt = Adam(params.arrays(), cfg.lr, cfg.weight_decay)
    best = params.copy()
    best_loss, best_epoch, wait = np.inf, -1, 0
    curves = {"train_loss": [], "val_loss": [], "val_acc": []}

    def validate(pred):
        vl = eval_loss(LossKind.CE, pred.logits, y, va)
        return vl.value, float(np.mean(pred.predicted[va] == y[va]))

    for epoch in range(cfg.max_epochs):
        if cfg.dropout == 0:
            # without dropout one forward pass serves both the step and validation
            pred, tape = forward(params, M, X)
            vloss, vacc = validate(pred)
            snapshot = params.copy()
        else:
            pred, tape = forward(params, M, X, dropout=cfg.dropout, rng=rng)
        ev = eval_loss(LossKind.CE, pred.logits, y, tr)
        if not np.isfinite(ev.value):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        (gW, gb), _, _ = backward(tape, params, ev.grad_logits)
        opt.step([*gW, *gb])
        params.touch()
        if cfg.dropout != 0:
            vpred, _ = forward(params, M, X)
            vloss, vacc = validate(vpred)
            snapshot = params
        curves["train_loss"].append(ev.value)
        curves["val_loss"].append(vloss)
        curves["val_acc"].append(vacc)
        if vloss < best_loss:
            best_loss, best_epoch, wait = vloss, epoch, 0
            best = snapshot.copy()
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    best.history = {**curves, "best_epoch": best_epoch, "best_val_loss": float(best_loss)}
    best.version = params.version + 1
    return best


def predict(params: ModelParams, g: Graph, mp_matrix: sp.csr_matrix) -> np.ndarray:
    """Predicted classes for all nodes (PPRGo: ``mp_matrix`` is the PPR matrix)."""
    pred, _ = forward(params, mp_matrix, g.features)
    return pred.predicted
