"""Run configuration: model hyperparameters, variants, data, grid policy and schedule.

Config files are INI-style (sections of `key = value`), values written as JSON
literals. Missing keys fall back to the defaults of the chosen variant; unknown
keys and variant violations are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .datagen import GridPolicy, ProblemSpec

log = logging.getLogger(__name__)

VARIANTS = ("base", "noGroups", "SASA", "fixedTime", "ponderReg")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "base"
    d_emb: int = 64
    dropout: float = 0.1
    s2g_hidden: int = 64
    kernel: int = 3
    groups: int = 8
    heads: int = 64
    ut_hidden: int = 256
    ctx_hidden: int = 64
    halt_hidden: int = 128
    context_len: int = 3
    ctx_heads: int = 8
    max_steps: int = 40
    eps: float = 0.05
    fixed_steps: int = 12
    lambda_p: float = 0.2

    @property
    def halting(self) -> bool:
        return self.variant != "fixedTime"

    @property
    def regularizer(self) -> str | None:
        return {"fixedTime": None, "ponderReg": "kl"}.get(self.variant, "er")


@dataclass
class DataConfig:
    train_terms: list[int] = field(default_factory=lambda: [1, 4])
    train_digits: list[int] = field(default_factory=lambda: [1, 10])
    term_groups: list[list[int]] = field(default_factory=lambda: [[1, 2], [3, 4]])
    batch_per_group: int = 64

    def group_specs(self) -> list[ProblemSpec]:
        return [ProblemSpec(tuple(g), tuple(self.train_digits)) for g in self.term_groups]


@dataclass
class GridConfig:
    f_h: int = 0
    f_w: int = 2
    r_h: list[int] = field(default_factory=lambda: [0, 3])
    r_w: list[int] = field(default_factory=lambda: [0, 3])

    def policy(self) -> GridPolicy:
        return GridPolicy(self.f_h, self.f_w, tuple(self.r_h), tuple(self.r_w))


@dataclass
class TrainConfig:
    epochs: int = 510
    steps_per_epoch: int = 10
    lr_max: float = 1e-3
    lr_min: float = 5e-5
    lr_period: int = 30
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 10.0
    beta_reg: float = 5e-2
    pad_weight: float = 0.1
    overtrain_epochs: int = 300
    overtrain_beta: float = 5e-4
    dtype: str = "float32"
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        m = self.model
        if m.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {m.variant!r}; expected one of {', '.join(VARIANTS)}")
        if m.variant == "noGroups" and m.groups != 1:
            raise ConfigError("noGroups requires g=1")
        if m.variant == "SASA" and m.groups != m.heads:
            raise ConfigError("SASA requires g=h")
        if m.d_emb % m.groups or m.d_emb % m.heads:
            raise ConfigError(f"g={m.groups} and h={m.heads} must divide d_emb={m.d_emb}")
        if m.d_emb % m.ctx_heads:
            raise ConfigError(f"ctx_heads={m.ctx_heads} must divide d_emb={m.d_emb}")
        if m.kernel % 2 == 0:
            raise ConfigError("kernel must be odd")
        if not 0.0 < m.eps < 1.0:
            raise ConfigError("eps must lie in (0, 1)")
        if m.variant == "ponderReg" and not 0.0 < m.lambda_p < 1.0:
            raise ConfigError("lambda_p must lie in (0, 1)")
        if self.train.beta_reg <= 0 or self.train.overtrain_beta <= 0:
            raise ConfigError("regularizer weights must be positive")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        ProblemSpec(tuple(self.data.train_terms), tuple(self.data.train_digits))
        for g in self.data.term_groups:
            ProblemSpec(tuple(g), tuple(self.data.train_digits))
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    def run_name(self) -> str:
        return f"{self.model.variant}-{self.hash()}-s{self.seed}"


VARIANT_DEFAULTS: dict[str, dict[str, Any]] = {
    "base": {},
    "noGroups": {"groups": 1},
    "SASA": {"groups": 8, "heads": 8},
    "fixedTime": {},
    "ponderReg": {},
}

SECTIONS = {"model": ModelConfig, "data": DataConfig, "grid": GridConfig, "train": TrainConfig}


def default_config(variant: str = "base") -> RunConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    model = ModelConfig(variant=variant, **VARIANT_DEFAULTS[variant])
    return RunConfig(model=model)


def smoke_config(variant: str = "base", seed: int = 0) -> RunConfig:
    """Desk-scale preset: d_emb 32, 60 epochs on P([1,2],[1,5])."""
    cfg = default_config(variant)
    m = cfg.model
    m.d_emb, m.s2g_hidden, m.ut_hidden, m.ctx_hidden, m.halt_hidden = 32, 32, 128, 32, 64
    if variant != "SASA":
        m.heads = 32
    cfg.data = DataConfig(train_terms=[1, 2], train_digits=[1, 5], term_groups=[[1, 2]], batch_per_group=64)
    cfg.train.epochs = 60
    cfg.seed = seed
    return cfg.validate()


def tiny_config(variant: str = "base") -> RunConfig:
    """Gradient-check dimensions: d_emb 4 with small hidden layers, double precision."""
    cfg = default_config(variant)
    m = cfg.model
    m.d_emb, m.dropout, m.s2g_hidden, m.ut_hidden = 4, 0.0, 5, 6
    m.ctx_hidden, m.halt_hidden, m.ctx_heads, m.max_steps = 5, 5, 2, 6
    m.groups, m.heads = {"noGroups": (1, 4), "SASA": (2, 2)}.get(variant, (2, 4))
    cfg.train.dtype = "float64"
    return cfg.validate()


PRESETS = {"base": default_config, "smoke": smoke_config, "tiny": tiny_config}


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _check_type(section: str, key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if type(value) is not type(default):
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {value!r}")
    return value


def loads_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    unknown = set(parser.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    variant = _coerce(parser.get("model", "variant", fallback='"base"'))
    cfg = default_config(variant)
    for section, cls in SECTIONS.items():
        target = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(cls)}
        given = dict(parser.items(section)) if parser.has_section(section) else {}
        for key in given:
            if key not in names:
                raise ConfigError(f"[{section}] unknown key {key!r}")
        for name in sorted(names):
            if name in given:
                value = _check_type(section, name, _coerce(given[name]), getattr(target, name))
                setattr(target, name, value)
            else:
                log.info("[%s] %s not set, using default %r", section, name, getattr(target, name))
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key != "seed":
                raise ConfigError(f"[run] unknown key {key!r}")
            cfg.seed = int(_coerce(raw))
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads_config(path.read_text(encoding="utf-8"))


def dumps_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    d = cfg.to_dict()
    for section in SECTIONS:
        parser[section] = {k: json.dumps(v) for k, v in d[section].items()}
    parser["run"] = {"seed": json.dumps(cfg.seed)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg), encoding="utf-8")


def config_from_dict(d: dict[str, Any]) -> RunConfig:
    cfg = RunConfig(
        model=ModelConfig(**d["model"]),
        data=DataConfig(**d["data"]),
        grid=GridConfig(**d["grid"]),
        train=TrainConfig(**d["train"]),
        seed=d.get("seed", 0),
    )
    return cfg.validate()
