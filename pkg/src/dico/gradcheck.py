"""Finite-difference verification of the full objective on a small model."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import tensor as T
from .config import Config
from .model import DiCoModel
from .synthdata import build_splits

TOLERANCE = 1e-6


def small_config() -> Config:
    """d_raw=8, d=8, K=2, M=2, d_c=4, K_m=3, T=2, batch 4, float64, every loss term on."""
    cfg = Config()
    return cfg.replace(
        model={"d_raw": 8, "d": 8, "K": 2, "M": 2, "d_c": 4, "d_h": 8, "K_m": 3, "T": 2, "d_e": 8},
        optim={"batch": 4, "precision": 64},
        data={"P": 2, "F": 2, "V": 3, "n_ids": 8, "N": 4, "n_filler": 2, "renders_per_id": 1},
        loss={"lambda_s": 0.5, "lambda_b": 0.5, "lambda_r": 0.01, "slot_id": True},
    )


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def run_gradcheck(seed: int = 0, h: float = 1e-6, cfg: Config | None = None) -> dict[str, float]:
    """Max relative error per parameter group (top-level module name)."""
    cfg = small_config() if cfg is None else cfg
    sp = build_splits(cfg.data, cfg.model.d_raw, seed)
    batch = sp.train.subset(np.arange(cfg.optim.batch))
    labels = np.unique(batch.ids, return_inverse=True)[1]
    model = DiCoModel(cfg, n_classes=len(labels), seed=seed, text_len=batch.text.shape[1])
    image, text = batch.image.astype(np.float64), batch.text.astype(np.float64)

    def f():
        return model.loss(image, text, labels)[0]

    groups: dict[str, list] = defaultdict(list)
    for name, p in model.named_parameters():
        groups[group_of(name)].append(p)
    return {g: T.finite_difference_check(f, ps, h) for g, ps in groups.items()}
