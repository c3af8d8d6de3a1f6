"""Attack configuration and its flat key-value file format (TOML subset)."""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field

from .augment import AugmentPolicy
from .core import ConfigError
from .defenses import DefenseTransform
from .losses import LossVariant

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class DeskSetup:
    """Sizes and seed of the synthetic desk corpus splits."""

    data_seed: int = 0
    image_size: int = 16
    pretrain_size: int = 4000
    surrogate_size: int = 2000
    select_train: int = 1000
    select_test: int = 500
    probe_train: int = 2000
    probe_test: int = 1000
    # fraction of surrogate images drawn from the shifted rendering rather than the pre-training one
    surrogate_shift: float = 0.5

    def __post_init__(self):
        if isinstance(self.surrogate_shift, bool) or not 0.0 <= self.surrogate_shift <= 1.0:
            raise ConfigError(f"data.surrogate_shift must lie in [0, 1], got {self.surrogate_shift!r}")
        for f in dataclasses.fields(self):
            if f.name == "surrogate_shift":
                continue
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < (0 if f.name == "data_seed" else 1):
                raise ConfigError(f"data.{f.name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class AttackConfig:
    n_proto_patches: int = 10
    m_train_patches: int = 5
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 0.001
    seed: int = 0
    loss_variant: LossVariant = LossVariant.RDA
    epsilon_floor: float = 1e-8
    precision: str = "float32"  # "float64" is the bit-reproducible reference mode
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    defenses: tuple = ()
    data: DeskSetup = field(default_factory=DeskSetup)

    def __post_init__(self):
        try:
            object.__setattr__(self, "loss_variant", LossVariant(self.loss_variant))
        except ValueError:
            raise ConfigError(f"unknown loss_variant {self.loss_variant!r}; "
                              f"expected one of {[v.value for v in LossVariant]}") from None
        if self.n_proto_patches < 1 or self.m_train_patches < 1:
            raise ConfigError("n_proto_patches and m_train_patches must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ConfigError("lambda1, lambda2 must be >= 0 and not both zero")
        if self.epsilon_floor <= 0:
            raise ConfigError("epsilon_floor must be > 0")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        object.__setattr__(self, "defenses", tuple(self.defenses))

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["loss_variant"] = self.loss_variant.value
        d["augment"] = self.augment.to_dict()
        d["defenses"] = [t.to_dict() for t in self.defenses]
        d["data"] = dataclasses.asdict(self.data)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "AttackConfig":
        raw = dict(raw)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            if "augment" in raw:
                raw["augment"] = AugmentPolicy.from_dict(raw["augment"])
            if "data" in raw:
                data_names = {f.name for f in dataclasses.fields(DeskSetup)}
                bad = sorted(set(raw["data"]) - data_names)
                if bad:
                    raise ConfigError(f"unknown config keys: {', '.join('data.' + b for b in bad)}")
                raw["data"] = DeskSetup(**raw["data"])
            if "defenses" in raw:
                raw["defenses"] = tuple(DefenseTransform.from_dict(d) for d in raw["defenses"])
            for k in ("n_proto_patches", "m_train_patches", "epochs", "batch_size", "seed"):
                if k in raw and (isinstance(raw[k], bool) or int(raw[k]) != raw[k]):
                    raise ConfigError(f"{k} must be an integer")
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"unknown augment key or bad value: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_fmt(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"cannot serialize {v!r}")


def dumps(config: AttackConfig) -> str:
    d = config.to_dict()
    lines = []
    for k, v in d.items():
        if k in ("augment", "data", "defenses"):
            continue
        lines.append(f"{k} = {_fmt(v)}")
    for prefix in ("augment", "data"):
        for k, v in d[prefix].items():
            if v is not None:
                lines.append(f"{prefix}.{k} = {_fmt(v)}")
    lines.append(f"defenses = {_fmt(d['defenses'])}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> AttackConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    return AttackConfig.from_dict(raw)


def save_config(config: AttackConfig, path) -> None:
    with open(path, "w") as f:
        f.write(dumps(config))


def load_config(path) -> AttackConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)
