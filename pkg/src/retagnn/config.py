"""Model and run configuration with key=value persistence."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

ABLATIONS = ("no_ragnn", "no_attrs", "no_rar", "no_rel_attention", "no_ssa", "no_short",
             "no_long")


class ConfigError(ValueError):
    """Unknown key or invalid value (exit code 2)."""


@dataclass
class ModelConfig:
    d: int = 32
    t: int = 11
    g: int = 3
    h: int = 2
    tau: int = 4
    l_lo: int = 2
    l_sh: int = 3
    rar_lambda: float = 0.6
    l2_eta: float = 1e-5
    lr: float = 0.001
    batch_size: int = 32
    leaky_slope: float = 0.2
    inter_layer_activation: str = "none"
    max_nodes_per_hop: int = 0
    use_attributes: bool = True
    no_ragnn: bool = False
    no_attrs: bool = False
    no_rar: bool = False
    no_rel_attention: bool = False
    no_ssa: bool = False
    no_short: bool = False
    no_long: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def pi(self) -> int:
        return math.ceil(self.t / self.tau)

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.no_rar else self.rar_lambda

    @property
    def attributes_enabled(self) -> bool:
        return self.use_attributes and not self.no_attrs

    @property
    def node_cap(self) -> int | None:
        return self.max_nodes_per_hop or None

    def validate(self) -> None:
        for name in ("d", "t", "g", "tau", "l_lo", "l_sh", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.t < 2:
            raise ConfigError("t must be >= 2")
        if self.h < 0:
            raise ConfigError("h must be >= 0")
        if self.lr <= 0 or self.rar_lambda < 0 or self.l2_eta < 0 or self.leaky_slope < 0:
            raise ConfigError("lr must be positive; rar_lambda, l2_eta, leaky_slope non-negative")
        if self.inter_layer_activation not in ("none", "relu", "leaky_relu"):
            raise ConfigError(f"unknown inter_layer_activation {self.inter_layer_activation!r}")
        if self.no_short and self.no_long:
            raise ConfigError("no_short and no_long cannot both be set")

    def with_ablation(self, name: str | None) -> "ModelConfig":
        if name is None:
            return dataclasses.replace(self)
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
        return dataclasses.replace(self, **{name: True})


@dataclass
class TrainConfig:
    epochs: int = 30
    patience: int = 5
    k: int = 10
    precision: int = 64
    num_neg_eval: int = 0


@dataclass
class RunConfig:
    """Everything a CLI run needs; every field is a ``key=value`` config key."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    dataset: str = ""
    data: str = ""
    bundle: str = ""
    out: str = "."
    protocol: str = "csr"
    train_frac: float = 0.7
    stride: int = 0
    source: str = ""
    target: str = ""
    checkpoint: str = ""
    fine_tune_epochs: int = 0
    reinit_embed_ffn: bool = False
    threshold: int = 0
    min_interactions: int = 4
    workers: int = 1
    split: str = "both"
    planted_users: int = 300
    planted_items: int = 200
    planted_attrs: int = 8

    def keys(self) -> dict[str, tuple[object, str]]:
        """Flat key -> (owner, attribute) map."""
        out = {}
        for owner in (self.model, self.train, self):
            for f in fields(owner):
                if f.name in ("model", "train"):
                    continue
                out[f.name] = (owner, f.name)
        return out

    def set(self, key: str, raw) -> None:
        key = key.strip().replace("-", "_")
        table = self.keys()
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}")
        owner, attr = table[key]
        current = getattr(owner, attr)
        setattr(owner, attr, _coerce(key, raw, type(current)))

    def as_dict(self) -> dict[str, object]:
        return {k: getattr(o, a) for k, (o, a) in sorted(self.keys().items())}

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def validate(self) -> None:
        self.model.validate()
        if self.protocol not in ("csr", "isr", "tsr"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError("train_frac must be in (0, 1)")
        if self.split not in ("train", "validation", "test", "both"):
            raise ConfigError(f"unknown split {self.split!r}")
        if self.train.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")


def _coerce(key: str, raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then command-line overrides."""
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        for k, v in parse_kv_text(p.read_text(encoding="utf-8")).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    cfg.validate()
    return cfg


def model_config_from_dict(values: dict[str, str]) -> ModelConfig:
    cfg = ModelConfig()
    names = {f.name: f for f in fields(ModelConfig)}
    for k, v in values.items():
        if k in names:
            setattr(cfg, k, _coerce(k, v, type(getattr(cfg, k))))
    cfg.validate()
    return cfg
