"""Line-oriented ``section.key = value`` configuration.

Absent keys take defaults; the model defaults are the full-size settings
(8 slots x 8 blocks x 256 dims, 256 prototypes, 3 iterations). ``Config.toy()``
shrinks the model to the desk-scale benchmark setting.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class ModelConfig:
    d_raw: int = 32
    d: int = 64
    K: int = 8
    M: int = 8
    d_c: int = 256
    d_h: int = 2048
    K_m: int = 256
    T: int = 3
    tau_p: float = 1.0
    d_e: int = 64


@dataclass
class LossConfig:
    lambda_s: float = 0.5
    lambda_b: float = 0.5
    lambda_r: float = 0.01
    tau_init: float = 0.07
    tau_s_init: float = 0.07
    tau_b_init: float = 0.07
    bidirectional_local: bool = False
    slot_id: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch: int = 32
    steps: int = 2000
    precision: int = 32


@dataclass
class DataConfig:
    P: int = 4
    F: int = 2
    V: int = 6
    n_ids: int = 200
    N: int = 32
    sigma: float = 0.3
    p: float = 0.3
    renders_per_id: int = 4
    train_frac: float = 0.5
    n_filler: int = 4


@dataclass
class SeedConfig:
    data: int = 0
    train: int = 0


@dataclass
class EvalConfig:
    w_global: float = 1.0
    w_slot: float = 1.0
    w_block: float = 1.0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def toy(cls) -> "Config":
        cfg = cls()
        cfg.model = ModelConfig(d_raw=32, d=32, K=4, M=2, d_c=16, d_h=32, K_m=16, T=3, d_e=32)
        return cfg

    def replace(self, **sections) -> "Config":
        """Copy with per-section overrides, e.g. ``cfg.replace(loss={"lambda_r": 0.1})``."""
        out = from_dict(to_dict(self))
        for sec, kv in sections.items():
            setattr(out, sec, dataclasses.replace(getattr(out, sec), **kv))
        validate(out)
        return out


SECTIONS = tuple(f.name for f in dataclasses.fields(Config))


def to_dict(cfg: Config) -> dict[str, object]:
    flat = {}
    for sec in SECTIONS:
        for f in dataclasses.fields(getattr(cfg, sec)):
            flat[f"{sec}.{f.name}"] = getattr(getattr(cfg, sec), f.name)
    return flat


def from_dict(flat: dict[str, object]) -> Config:
    cfg = Config()
    for key, val in flat.items():
        sec, name = key.split(".", 1)
        setattr(getattr(cfg, sec), name, val)
    return cfg


def _field_type(sec: str, name: str):
    for f in dataclasses.fields(getattr(Config(), sec)):
        if f.name == name:
            return f.type
    return None


def _convert(raw: str, typ: str, key: str, line: int | None):
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"type mismatch for {key}: expected {typ}, got {raw!r}", line) from None
    raise ConfigError(f"unsupported type for {key}", line)


def validate(cfg: Config, lines: dict[str, int] | None = None) -> None:
    lines = lines or {}

    def fail(msg, key):
        raise ConfigError(msg, lines.get(key))

    m = cfg.model
    for name in ("d_raw", "d", "K", "M", "d_c", "d_h", "K_m", "T", "d_e"):
        if getattr(m, name) < 1:
            fail(f"model.{name} must be >= 1", f"model.{name}")
    if m.d_h != m.M * m.d_c:
        key = "model.d_h" if "model.d_h" in lines else max(
            ("model.M", "model.d_c"), key=lambda k: lines.get(k, -1))
        fail(f"model.d_h ({m.d_h}) must equal M*d_c ({m.M * m.d_c})", key)
    if m.tau_p <= 0:
        fail("model.tau_p must be > 0", "model.tau_p")
    lo = cfg.loss
    for name in ("lambda_s", "lambda_b", "lambda_r"):
        if getattr(lo, name) < 0:
            fail(f"loss.{name} must be >= 0", f"loss.{name}")
    for name in ("tau_init", "tau_s_init", "tau_b_init"):
        if getattr(lo, name) <= 0:
            fail(f"loss.{name} must be > 0", f"loss.{name}")
    o = cfg.optim
    if o.lr <= 0:
        fail("optim.lr must be > 0", "optim.lr")
    if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1):
        fail("optim betas must lie in [0, 1)", "optim.beta1")
    if o.weight_decay < 0:
        fail("optim.weight_decay must be >= 0", "optim.weight_decay")
    if o.batch < 1:
        fail("optim.batch must be >= 1", "optim.batch")
    if o.steps < 0:
        fail("optim.steps must be >= 0", "optim.steps")
    if o.precision not in (32, 64):
        fail("optim.precision must be 32 or 64", "optim.precision")
    dc = cfg.data
    for name in ("P", "F", "V", "n_ids", "N", "renders_per_id"):
        if getattr(dc, name) < 1:
            fail(f"data.{name} must be >= 1", f"data.{name}")
    if dc.n_filler < 0:
        fail("data.n_filler must be >= 0", "data.n_filler")
    if dc.sigma < 0:
        fail("data.sigma must be >= 0", "data.sigma")
    if not 0 <= dc.p < 1:
        fail("data.p must lie in [0, 1)", "data.p")
    if not 0 < dc.train_frac < 1:
        fail("data.train_frac must lie in (0, 1)", "data.train_frac")
    ev = cfg.eval
    for name in ("w_global", "w_slot", "w_block"):
        if getattr(ev, name) < 0:
            fail(f"eval.{name} must be >= 0", f"eval.{name}")


def parse_text(text: str, base: Config | None = None) -> Config:
    cfg = from_dict(to_dict(base)) if base is not None else Config()
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'section.key = value', got {body!r}", lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if "." not in key:
            raise ConfigError(f"unknown key {key!r}", lineno)
        sec, name = key.split(".", 1)
        typ = _field_type(sec, name) if sec in SECTIONS else None
        if typ is None:
            raise ConfigError(f"unknown key {key!r}", lineno)
        setattr(getattr(cfg, sec), name, _convert(raw, typ, key, lineno))
        lines[key] = lineno
    validate(cfg, lines)
    return cfg


def parse_config(path: str | Path, base: Config | None = None) -> Config:
    return parse_text(Path(path).read_text(encoding="utf-8"), base)


def serialize(cfg: Config) -> str:
    out = []
    for key, val in to_dict(cfg).items():
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        out.append(f"{key} = {val}")
    return "\n".join(out) + "\n"


ABLATION_VARIANTS = {
    0: "global alignment only",
    1: "+ slot-level alignment",
    2: "+ block-level alignment",
    3: "+ slot identity supervision",
    4: "+ reconstruction (full)",
}


def ablation_variant(cfg: Config, n: int) -> Config:
    """Incrementally enabled loss terms; fusion weights follow the trained levels.

    Variant 4 keeps ``cfg``'s own weights. Lower variants switch off the later
    terms (weights that are zero in ``cfg`` stay zero).
    """
    if n not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {n}")
    lo = cfg.loss
    return cfg.replace(
        loss={"lambda_s": lo.lambda_s if n >= 1 else 0.0,
              "lambda_b": lo.lambda_b if n >= 2 else 0.0,
              "slot_id": lo.slot_id and n >= 3,
              "lambda_r": lo.lambda_r if n >= 4 else 0.0},
        eval={"w_slot": cfg.eval.w_slot if n >= 1 else 0.0,
              "w_block": cfg.eval.w_block if n >= 2 else 0.0},
    )
