"""AdamW optimization loop, metrics log and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from . import config as C
from . import tensor as T
from .losses import LOG_COLUMNS, PART_NAMES
from .model import DiCoModel, dtype_for
from .synthdata import PairSet

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, parts: dict[str, float]):
        self.step = step
        self.parts = parts
        detail = ", ".join(f"{k}={v:.6g}" for k, v in parts.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: set[str] = field(default_factory=set)

    @classmethod
    def from_config(cls, o: C.OptimConfig, params: dict[str, np.ndarray]) -> "OptimState":
        st = cls(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
            # matrices, prototypes and slots decay; biases, norms and temperatures do not
            if p.ndim < 2:
                st.no_decay.add(name)
        return st


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
                   st: OptimState) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for name in params:
        if grads.get(name) is None:
            raise KeyError(f"missing gradient for registered parameter {name!r}")
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for name, p in params.items():
        g = grads[name]
        m = st.m.setdefault(name, np.zeros_like(p))
        v = st.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if st.weight_decay and name not in st.no_decay:
            p *= 1.0 - st.lr * st.weight_decay
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# ---------------------------------------------------------------- batching

class BatchSampler:
    """Batches of pairs with distinct identities when the pool allows it."""

    def __init__(self, ids: np.ndarray, batch: int, rng: np.random.Generator):
        self.rng = rng
        self.batch = batch
        self.unique, self.labels = np.unique(ids, return_inverse=True)
        self.by_id = [np.flatnonzero(self.labels == c) for c in range(len(self.unique))]

    def __call__(self) -> np.ndarray:
        n_ids = len(self.unique)
        if self.batch <= n_ids:
            chosen = self.rng.choice(n_ids, size=self.batch, replace=False)
            return np.array([self.by_id[c][self.rng.integers(len(self.by_id[c]))] for c in chosen])
        return self.rng.choice(len(self.labels), size=min(self.batch, len(self.labels)), replace=False)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: DiCoModel
    optim: OptimState
    rng: np.random.Generator
    log: list[dict[str, float]]

    @property
    def step(self) -> int:
        return self.optim.step

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint.from_state(self.model, self.optim, self.rng)


def train(cfg: C.Config, dataset: PairSet, steps: int | None = None, seed: int | None = None,
          model: DiCoModel | None = None, log_every: int = 0) -> TrainResult:
    """Optimize the full objective on ``dataset`` (a training :class:`PairSet`)."""
    steps = cfg.optim.steps if steps is None else steps
    seed = cfg.seeds.train if seed is None else seed
    C.validate(cfg)
    rng = np.random.default_rng([seed, 0x7EA1])
    sampler = BatchSampler(dataset.ids, cfg.optim.batch, rng)
    if model is None:
        model = DiCoModel(cfg, n_classes=len(sampler.unique), seed=seed,
                          text_len=dataset.text.shape[1])
    params = model.state_dict()
    st = OptimState.from_config(cfg.optim, params)
    dtype = dtype_for(cfg.optim.precision)
    image = dataset.image.astype(dtype)
    text = dataset.text.astype(dtype)
    history: list[dict[str, float]] = []
    named = list(model.named_parameters())
    for step in range(steps):
        idx = sampler()
        model.zero_grad()
        try:
            total, parts = model.loss(image[idx], text[idx], sampler.labels[idx])
        except T.NumericError as exc:
            raise TrainingDivergedError(step, {}) from exc
        row = {"step": step, **{k: float(parts[k].data) for k in PART_NAMES}, "total": float(total.data)}
        if not all(math.isfinite(row[k]) for k in LOG_COLUMNS):
            raise TrainingDivergedError(step, {k: row[k] for k in LOG_COLUMNS})
        history.append(row)
        T.backward(total)
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in named}
        optimizer_step(params, grads, st)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d total %.4f", step, row["total"])
    return TrainResult(model, st, rng, history)


def write_metrics_csv(path: str | Path, history: list[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step",) + LOG_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(row[k]) for k in LOG_COLUMNS])


# ---------------------------------------------------------------- checkpoints

_RNG_KEYS = ("state", "has_uint32", "uinteger")


@dataclass
class Checkpoint:
    config: C.Config
    params: dict[str, np.ndarray]
    optim: OptimState
    rng_state: dict
    n_classes: int
    text_len: int

    @property
    def step(self) -> int:
        return self.optim.step

    @classmethod
    def from_state(cls, model: DiCoModel, optim: OptimState, rng: np.random.Generator) -> "Checkpoint":
        return cls(model.cfg, {k: v.copy() for k, v in model.state_dict().items()}, optim,
                   rng.bit_generator.state, model.n_classes, model.enc_text.pos.shape[0])

    def build_model(self) -> DiCoModel:
        model = DiCoModel(self.config, self.n_classes, seed=0, text_len=self.text_len)
        model.load_state_dict(self.params)
        return model

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g

    def to_bytes(self) -> bytes:
        records = {f"param/{k}": v for k, v in self.params.items()}
        for k in self.params:
            records[f"optim.m/{k}"] = self.optim.m[k]
            records[f"optim.v/{k}"] = self.optim.v[k]
        meta = {k: _fmt(v) for k, v in C.to_dict(self.config).items()}
        o = self.optim
        meta.update({
            "train.step": str(o.step), "train.n_classes": str(self.n_classes),
            "train.text_len": str(self.text_len),
            "optim_state.lr": repr(o.lr), "optim_state.beta1": repr(o.beta1),
            "optim_state.beta2": repr(o.beta2), "optim_state.eps": repr(o.eps),
            "optim_state.weight_decay": repr(o.weight_decay),
            "optim_state.no_decay": ",".join(sorted(o.no_decay)),
            "rng.bit_generator": self.rng_state["bit_generator"],
        })
        for key in _RNG_KEYS:
            val = self.rng_state[key]
            if isinstance(val, dict):
                for sub, x in val.items():
                    meta[f"rng.{key}.{sub}"] = str(x)
            else:
                meta[f"rng.{key}"] = str(val)
        return ckio.encode(records, meta)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        records, meta = ckio.decode(buf)
        cfg_text = "\n".join(f"{k} = {v}" for k, v in meta.items() if k.split(".", 1)[0] in C.SECTIONS)
        cfg = C.parse_text(cfg_text)
        params = {k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")}
        st = OptimState(float(meta["optim_state.lr"]), float(meta["optim_state.beta1"]),
                        float(meta["optim_state.beta2"]), float(meta["optim_state.eps"]),
                        float(meta["optim_state.weight_decay"]), int(meta["train.step"]))
        st.m = {k: records[f"optim.m/{k}"] for k in params}
        st.v = {k: records[f"optim.v/{k}"] for k in params}
        nd = meta.get("optim_state.no_decay", "")
        st.no_decay = set(nd.split(",")) if nd else set()
        rng_state = {"bit_generator": meta["rng.bit_generator"],
                     "state": {"state": int(meta["rng.state.state"]), "inc": int(meta["rng.state.inc"])},
                     "has_uint32": int(meta["rng.has_uint32"]), "uinteger": int(meta["rng.uinteger"])}
        return cls(cfg, params, st, rng_state, int(meta["train.n_classes"]), int(meta["train.text_len"]))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
