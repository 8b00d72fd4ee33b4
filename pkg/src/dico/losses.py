"""Training objectives: three contrastive alignment terms, two identity
terms, token reconstruction, and their weighted total."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import LossConfig
from .nn import Linear, Module
from .tensor import Tensor

PART_NAMES = ("global", "slot", "block", "id_global", "id_slot", "rec")
LOG_COLUMNS = PART_NAMES + ("total",)


class Temperatures(Module):
    """Learnable temperatures stored as logs so they stay positive."""

    def __init__(self, cfg: LossConfig, dtype=np.float32):
        self.log_tau = T.parameter(np.array(np.log(cfg.tau_init), dtype=dtype))
        self.log_tau_s = T.parameter(np.array(np.log(cfg.tau_s_init), dtype=dtype))
        self.log_tau_b = T.parameter(np.array(np.log(cfg.tau_b_init), dtype=dtype))

    @property
    def tau(self) -> Tensor:
        return T.exp(self.log_tau)

    @property
    def tau_s(self) -> Tensor:
        return T.exp(self.log_tau_s)

    @property
    def tau_b(self) -> Tensor:
        return T.exp(self.log_tau_b)


class IdentityHeads(Module):
    """Identity classifiers on the global and slot embeddings, shared across modalities."""

    def __init__(self, d_e: int, n_classes: int, rng, dtype=np.float32):
        if n_classes < 1:
            raise ValueError("id_class_count must be positive")
        self.global_cls = Linear(d_e, n_classes, rng, dtype)
        self.slot_cls = Linear(d_e, n_classes, rng, dtype)

    @property
    def n_classes(self) -> int:
        return self.global_cls.W.shape[1]


def _diag_log_softmax_sum(logits: Tensor) -> Tensor:
    """Sum over leading axes of the diagonal of the row-wise log-softmax of ``[..., B, B]``."""
    B = logits.shape[-1]
    eye = np.eye(B, dtype=logits.dtype)
    return (T.log_softmax_axis(logits, axis=-1) * eye).sum()


def _batch(z: Tensor) -> int:
    B = z.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    return B


def loss_global(zg_v: Tensor, zg_t: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE between image and text global embeddings ``[B, d_e]``."""
    B = _batch(zg_v)
    if zg_t.shape != zg_v.shape:
        raise T.DimensionError(f"global embeddings disagree: {zg_v.shape} vs {zg_t.shape}")
    G = (zg_v @ zg_t.T) / tau
    return -(_diag_log_softmax_sum(G) + _diag_log_softmax_sum(G.T)) * (1.0 / B)


def _local_nce(zv: Tensor, zt: Tensor, tau, bidirectional: bool) -> Tensor:
    B = _batch(zv)
    if zt.shape != zv.shape:
        raise T.DimensionError(f"embeddings disagree: {zv.shape} vs {zt.shape}")
    n = zv.ndim
    # move batch axis next to the feature axis: [..., B, d_e] and [..., d_e, B]
    lead = tuple(range(1, n - 1))
    G = (zv.transpose(lead + (0, n - 1)) @ zt.transpose(lead + (n - 1, 0))) / tau
    total = _diag_log_softmax_sum(G)
    if bidirectional:
        total = total + _diag_log_softmax_sum(G.T)
    return -total * (1.0 / B)


def loss_slot(zs_v: Tensor, zs_t: Tensor, tau_s, bidirectional: bool = False) -> Tensor:
    """Per-slot InfoNCE over ``[B, K, d_e]``, image-anchored unless ``bidirectional``."""
    return _local_nce(zs_v, zs_t, tau_s, bidirectional)


def loss_block(zb_v: Tensor, zb_t: Tensor, tau_b, bidirectional: bool = False) -> Tensor:
    """Per-(slot, block) InfoNCE over ``[B, K, M, d_e]``."""
    return _local_nce(zb_v, zb_t, tau_b, bidirectional)


def _one_hot(labels: np.ndarray, shape: tuple[int, ...], n_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    oh = np.zeros(shape[:-1] + (n_classes,), dtype=dtype)
    idx = labels.reshape((-1,) + (1,) * (len(shape) - 2))
    idx = np.broadcast_to(idx, shape[:-1])
    np.put_along_axis(oh, idx[..., None], 1.0, axis=-1)
    return oh


def cross_entropy_sum(logits: Tensor, labels) -> Tensor:
    """Sum of -log softmax(logits)[label] with labels indexed by the leading axis."""
    oh = _one_hot(labels, logits.shape, logits.shape[-1], logits.dtype)
    return -(T.log_softmax_axis(logits, axis=-1) * oh).sum()


def loss_id(z_v: Tensor, z_t: Tensor, labels, classifier: Linear) -> Tensor:
    """Identity cross-entropy for both modalities.

    ``z`` is ``[B, d_e]`` for the global term or ``[B, K, d_e]`` for the slot
    term (every slot carries the sample label).
    """
    B = _batch(z_v)
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    return (cross_entropy_sum(classifier(z_v), labels)
            + cross_entropy_sum(classifier(z_t), labels)) * (1.0 / B)


def reconstruct(assignment: Tensor, slots_flat: Tensor, decoder: Linear) -> Tensor:
    """X_hat[i] = sum_k A[i, k] Dec(s_k)."""
    return assignment @ decoder(slots_flat)


def loss_rec(X_v: Tensor, X_t: Tensor, records_v, records_t, S_v, S_t,
             dec_v: Linear, dec_t: Linear) -> Tensor:
    """Squared reconstruction error of the encoded tokens, averaged over the batch.

    ``records_*`` are per-iteration attention records; the last one is used.
    ``S_*`` are the final :class:`~dico.slots.SlotState`.
    """
    total = None
    for X, recs, S, dec in ((X_v, records_v, S_v, dec_v), (X_t, records_t, S_t, dec_t)):
        if len(recs) != S.iteration:
            raise ValueError(f"{len(recs)} attention records for a slot state at iteration {S.iteration}")
        diff = reconstruct(recs[-1].assignment, S.flat(), dec) - X
        term = (diff * diff).sum()
        total = term if total is None else total + term
    B = X_v.shape[0] if X_v.ndim == 3 else 1
    return total * (1.0 / B)


def total_loss(parts: Mapping[str, object] | Sequence, cfg: LossConfig):
    """Weighted objective: alignment + identity + lambda_r * reconstruction.

    ``parts`` is a mapping keyed by :data:`PART_NAMES` or a sequence in that order.
    """
    if not isinstance(parts, Mapping):
        parts = dict(zip(PART_NAMES, parts))
    for name in ("lambda_s", "lambda_b", "lambda_r"):
        if getattr(cfg, name) < 0:
            raise ValueError(f"{name} must be non-negative")
    align = parts["global"]
    if cfg.lambda_s:
        align = align + cfg.lambda_s * parts["slot"]
    if cfg.lambda_b:
        align = align + cfg.lambda_b * parts["block"]
    ident = parts["id_global"]
    if cfg.slot_id:
        ident = ident + parts["id_slot"]
    out = align + ident
    if cfg.lambda_r:
        out = out + cfg.lambda_r * parts["rec"]
    return out
