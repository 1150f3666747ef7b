"""Run configuration: model shape, training schedule, flat key/value files.

``ModelConfig()`` and ``TrainConfig.pretrain_defaults()`` /
``TrainConfig.adapt_defaults()`` carry the full-scale values;
``ModelConfig.desk()`` and the ``desk_*`` constructors are the small CPU
variants the tests and scripts use.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


# "ramp" is the usual gradient-reversal warm-up 2 / (1 + exp(-10 p)) - 1
LAMBDA_SCHEDULES = ("constant", "ramp")


@dataclass
class ModelConfig:
    d_in: int = 2048
    d: int = 512
    H: int = 6
    L: int = 2
    d_ff: int = 2048
    T: int = 12
    C: int = 8
    N_c: int = 6
    N_v: int = 6
    d_ra: int = 64
    positional_encoding: bool = False
    init_std: float = 0.02
    lambda_ada: float = 1.0
    lambda_schedule: str = "constant"
    disc_hidden: int | None = None
    ema_momentum: float = 0.9
    exact_source_mean: bool = False

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        base = dict(d_in=64, d=64, H=2, L=2, d_ff=256, T=12, C=5, N_c=6, N_v=6, d_ra=8)
        base.update(kw)
        return cls(**base)

    @property
    def d_head(self) -> int:
        return self.d // self.H

    @property
    def disc_width(self) -> int:
        return self.disc_hidden if self.disc_hidden is not None else self.d // 2

    def validate(self) -> None:
        if self.lambda_schedule not in LAMBDA_SCHEDULES:
            raise ConfigError(f"lambda_schedule must be one of {LAMBDA_SCHEDULES}")
        if not 1 <= self.H <= self.d:
            raise ConfigError(f"need 1 <= H <= d, got H={self.H}, d={self.d}")
        if self.N_c < 2 or self.N_v < 2:
            raise ConfigError(f"need at least 2 decomposers per level, got N_c={self.N_c}, N_v={self.N_v}")
        for name in ("d_in", "d", "L", "d_ff", "T", "C", "d_ra"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class TrainConfig:
    stage: str = "adapt"
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    k: int = 5
    use_ldd: bool = True
    use_lrd: bool = True
    use_lac: bool = True
    use_lada: bool = True
    # steps per epoch; None means one pass over the source set
    steps_per_epoch: int | None = None

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "pretrain", "epochs": 2, "lr": 1e-5, "batch_size": 128, **kw})

    @classmethod
    def adapt_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "adapt", "epochs": 50, "lr": 1e-4, "batch_size": 128, **kw})

    @classmethod
    def desk_pretrain(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "pretrain", "epochs": 2, "lr": 2e-3, "batch_size": 16, **kw})

    @classmethod
    def desk_adapt(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "adapt", "epochs": 6, "lr": 5e-4, "batch_size": 16, **kw})

    def validate(self) -> None:
        if self.stage not in ("pretrain", "adapt"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("epochs, lr and batch_size must be positive")
        if self.stage == "adapt" and self.batch_size < 2:
            raise ConfigError("adaptation batches need room for both domains")

    def toggles(self) -> dict[str, bool]:
        return {"ldd": self.use_ldd, "lrd": self.use_lrd, "lac": self.use_lac, "lada": self.use_lada}


def to_dict(cfg) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out


def from_dict(cls, data: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        if k == "betas":
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def config_hash(*cfgs) -> str:
    blob = json.dumps([to_dict(c) for c in cfgs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# flat key/value files -------------------------------------------------------


def read_flat(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"config must be flat, key {k!r} holds a table")
    return data


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_flat(path: str | Path, data: dict[str, Any]) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in data.items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def merge_overrides(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """CLI flags win over file values; ``None`` means 'not given'."""
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


__all__ = [
    "ConfigError", "ModelConfig", "TrainConfig", "to_dict", "from_dict", "config_hash",
    "read_flat", "write_flat", "merge_overrides", "field_names",
]
