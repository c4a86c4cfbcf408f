"""Experiment configuration: JSON files validated against a schema, then
mapped onto the dataclass configs used by the library."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import jsonschema

from .attacks.greedy import GRBCDConfig
from .attacks.prbcd import PRBCDConfig
from .models import TrainConfig
from .ppr import TeleportConfig

ATTACK_KINDS = ("prbcd", "grbcd", "pgd", "fgsm", "dice", "prbcd_local", "dice_local")
LOSS_NAMES = ("ce", "margin", "cw", "nce", "elu_margin", "mce", "tanh_margin")

OUT_ENV = "SCALEGNN_OUT"
THREADS_ENV = "SCALEGNN_THREADS"


class ConfigError(ValueError):
    """Raised for schema violations and unmet config invariants (CLI exit code 2)."""


_num = {"type": "number"}
_int = {"type": "integer"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sbm": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["sizes", "p_in", "p_out"],
                    "properties": {
                        "sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                        "p_in": {"type": "number", "minimum": 0, "maximum": 1},
                        "p_out": {"type": "number", "minimum": 0, "maximum": 1},
                        "feature_dim": {"type": "integer", "minimum": 1},
                        "noise": {"type": "number", "minimum": 0},
                        "seed": _int,
                    },
                },
                "edges": {"type": "string"},
                "features": {"type": "string"},
                "labels": {"type": "string"},
                "splits": {"type": "string"},
                "directed": {"type": "boolean"},
                "largest_component": {"type": "boolean"},
                "per_class": {"type": "integer", "minimum": 1},
                "split_seed": _int,
            },
            "oneOf": [{"required": ["sbm"]}, {"required": ["edges", "features", "labels"]}],
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["GCN", "SGC", "GDC", "PPRGo"]},
                "hidden_dim": {"type": "integer", "minimum": 1},
                "n_layers": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 1},
                "aggregation": {"enum": ["sum", "soft_median"]},
                "temperature": {"type": "number", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "max_epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kinds": {"type": "array", "items": {"enum": list(ATTACK_KINDS)}, "minItems": 1},
                "losses": {"type": "array", "items": {"enum": list(LOSS_NAMES)}, "minItems": 1},
                "epsilons": {"type": "array", "items": _num, "minItems": 1},
                "block_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "resample_epochs": {"type": "integer", "minimum": 0},
                "base_lr": {"type": "number", "exclusiveMinimum": 0},
                "greedy_epochs": {"type": "integer", "minimum": 1},
                "freeze_normalization": {"type": "boolean"},
                "dense_cap": {"type": "integer", "minimum": 1},
                "targets": {"type": "integer", "minimum": 1},
                "budget_scale": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "defense": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["GCN", "GDC", "PPRGo"]},
                "aggregation": {"enum": ["sum", "soft_median"]},
                "temperature": {"type": "number", "minimum": 0},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "k": {"type": "integer", "minimum": 1},
                "hidden_dim": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "out_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}


@dataclass
class DatasetSpec:
    sbm: Optional[dict] = None
    edges: Optional[str] = None
    features: Optional[str] = None
    labels: Optional[str] = None
    splits: Optional[str] = None
    directed: bool = False
    largest_component: bool = False
    per_class: int = 20
    split_seed: int = 0


@dataclass
class ModelSpec:
    kind: str = "GCN"
    hidden_dim: int = 64
    n_layers: int = 2
    steps: int = 2
    aggregation: str = "sum"
    temperature: float = 0.5
    lr: float = 0.01
    weight_decay: float = 1e-3
    max_epochs: int = 1000
    patience: int = 100
    dropout: float = 0.5

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, max_epochs=self.max_epochs,
                           patience=self.patience, dropout=self.dropout, seed=seed)


@dataclass
class AttackSpec:
    kinds: List[str] = field(default_factory=lambda: ["prbcd"])
    losses: List[str] = field(default_factory=lambda: ["tanh_margin"])
    epsilons: List[float] = field(default_factory=lambda: [0.1])
    block_size: int = 100_000
    epochs: int = 100
    resample_epochs: int = 70
    base_lr: float = 1.0
    greedy_epochs: int = 50
    freeze_normalization: bool = False
    dense_cap: int = 5000
    targets: int = 20
    budget_scale: List[float] = field(default_factory=lambda: [1.0])

    def prbcd(self, seed: int) -> PRBCDConfig:
        return PRBCDConfig(block_size=self.block_size, epochs=self.epochs,
                           resample_epochs=min(self.resample_epochs, self.epochs), base_lr=self.base_lr,
                           seed=seed, freeze_normalization=self.freeze_normalization)

    def grbcd(self, seed: int) -> GRBCDConfig:
        return GRBCDConfig(block_size=self.block_size, epochs=self.greedy_epochs, seed=seed,
                           freeze_normalization=self.freeze_normalization)


@dataclass
class DefenseSpec:
    kind: str = "GDC"
    aggregation: str = "soft_median"
    temperature: float = 0.5
    alpha: float = 0.15
    k: int = 64
    hidden_dim: int = 64
    dropout: float = 0.0

    def teleport(self) -> TeleportConfig:
        return TeleportConfig(alpha=self.alpha, k=self.k)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    model: ModelSpec = field(default_factory=ModelSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    seeds: List[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    threads: int = 1

    def to_dict(self) -> dict:
        # unset optional fields are left out so the result validates again
        out = asdict(self)
        out["dataset"] = {k: v for k, v in out["dataset"].items() if v is not None}
        return out

    def validate(self, base: Optional[Path] = None) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        bad = [e for e in self.attack.epsilons if not 0 < e <= 1]
        if bad:
            raise ConfigError(f"epsilon values must lie in (0, 1], got {bad}")
        for name in ("edges", "features", "labels", "splits"):
            path = getattr(self.dataset, name)
            if path is not None:
                resolved = _resolve(path, base)
                if not resolved.exists():
                    raise ConfigError(f"dataset.{name}: file not found: {path}")
                setattr(self.dataset, name, str(resolved))
        return self


def _resolve(path: str, base: Optional[Path]) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def _build(cls, data: Optional[dict]):
    data = data or {}
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in known})


def from_dict(data: dict, base: Optional[Path] = None) -> ExperimentConfig:
    """Validate ``data`` against the schema and build an :class:`ExperimentConfig`.

    Relative file paths are resolved against ``base`` (the config file's directory).
    """
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    cfg = ExperimentConfig(
        dataset=_build(DatasetSpec, data["dataset"]),
        model=_build(ModelSpec, data.get("model")),
        attack=_build(AttackSpec, data.get("attack")),
        defense=_build(DefenseSpec, data.get("defense")),
        seeds=list(data.get("seeds", [0])),
        out_dir=data.get("out_dir", "runs"),
        threads=int(data.get("threads", 1)),
    )
    return cfg.validate(base)


def load_config(path, env=None) -> ExperimentConfig:
    """Read a JSON config. Only the output directory and thread count can be
    overridden from the environment."""
    env = os.environ if env is None else env
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    cfg = from_dict(data, base=path.parent)
    if env.get(OUT_ENV):
        cfg.out_dir = env[OUT_ENV]
    if env.get(THREADS_ENV):
        try:
            cfg.threads = int(env[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
        if cfg.threads < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive")
    return cfg
