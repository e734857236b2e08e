"""Training configuration and the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from ..features import SlotGrid
from ..mtl import LossWeights
from ..stdg import StdgConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    cells: int = 3
    dim: int = 20
    hidden: int = 60
    history: int = 12
    slot_seconds: int = 300
    kernel: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    lr_decay: float = 0.5
    lr_patience: int = 2
    seed: int = 0
    alpha: float = 0.4
    beta: float = 0.3
    eps: float = 5.0
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    multiscale: bool = True
    tcn: bool = True
    gcn: bool = True
    node_stream: bool = True
    edge_stream: bool = True
    p_matrix: bool = True
    separate_direction_weights: bool = False
    sigma_mode: str = "total"
    default_speed: float = 8.0

    def __post_init__(self) -> None:
        problems = []
        for name in ("cells", "dim", "hidden", "history", "slot_seconds", "kernel", "batch_size", "epochs", "patience",
                     "lr_patience"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer")
        if self.lr < 0 or not math.isfinite(self.lr):
            problems.append("lr must be a finite nonnegative number")
        if not 0 < self.lr_decay <= 1:
            problems.append("lr_decay must be in (0, 1]")
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            problems.append(f"split fractions {fr} must be nonnegative and sum to 1")
        if self.sigma_mode not in ("total", "in", "out"):
            problems.append("sigma_mode must be one of total, in, out")
        if self.default_speed <= 0:
            problems.append("default_speed must be positive")
        if not (self.node_stream or self.edge_stream):
            problems.append("node_stream and edge_stream cannot both be disabled")
        try:
            self.loss_weights
            self.grid
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.eps)

    @property
    def grid(self) -> SlotGrid:
        return SlotGrid(self.slot_seconds, self.history)

    @property
    def stdg(self) -> StdgConfig:
        return StdgConfig(
            n_cells=self.cells, dim=self.dim, history=self.history, kernel=self.kernel,
            multiscale=self.multiscale, use_tcn=self.tcn, use_gcn=self.gcn,
            node_stream=self.node_stream, edge_stream=self.edge_stream, use_p=self.p_matrix,
            separate_direction_weights=self.separate_direction_weights,
        )

    @property
    def fractions(self) -> tuple[float, float, float]:
        return self.train_frac, self.val_frac, self.test_frac

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**coerce_values(cls, d))


ABLATIONS = {
    "no-multiscale": "multiscale",
    "no-tcn": "tcn",
    "no-gcn": "gcn",
    "no-node-stream": "node_stream",
    "no-edge-stream": "edge_stream",
    "no-p-matrix": "p_matrix",
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce_values(cls, raw: dict) -> dict:
    """Convert raw values to the dataclass field types; unknown keys are errors."""
    types = {f.name: f.type for f in fields(cls)}
    out, errors = {}, []
    for key, value in raw.items():
        name = key.replace("-", "_")
        if name not in types:
            errors.append(f"unknown key {key!r}")
            continue
        kind = types[name]
        try:
            if not isinstance(value, str):
                out[name] = value
            elif kind in ("bool", bool):
                out[name] = _parse_bool(value)
            elif kind in ("int", int):
                out[name] = int(value)
            elif kind in ("float", float):
                out[name] = float(value)
            else:
                out[name] = value.strip()
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    return out


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{n}: empty key")
            out[key] = value
    return out


def write_kv(values: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n")


def load_config(path=None, **overrides) -> TrainConfig:
    """Defaults, then the file, then ``overrides`` (``None`` values ignored)."""
    raw: dict = read_kv(path) if path is not None else {}
    values = coerce_values(TrainConfig, raw)
    values.update(coerce_values(TrainConfig, {k: v for k, v in overrides.items() if v is not None}))
    return TrainConfig(**values)
