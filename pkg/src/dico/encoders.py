"""Toy token encoders and the heads that map representations into the
shared alignment space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, normal
from .slots import SlotState
from .tensor import Tensor

IMAGE, TEXT = "image", "text"
MODALITIES = (IMAGE, TEXT)


@dataclass
class TokenSequence:
    tokens: Tensor           # [..., n, d]
    global_: Tensor          # [..., d]
    modality: str
    part_labels: np.ndarray | None = None


class TokenEncoder(Module):
    """Linear token embedding (+ learned positions on the text path) with layer norm.

    The global summary is the mean of the encoded tokens.
    """

    def __init__(self, d_raw: int, d: int, modality: str, rng, max_len: int = 0, dtype=np.float32):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        self.embed = Linear(d_raw, d, rng, dtype)
        self.pos = normal(rng, (max_len, d), 0.02, dtype) if modality == TEXT else None
        self.norm = LayerNorm(d, dtype)

    def __call__(self, raw: Tensor, part_labels=None) -> TokenSequence:
        return encode(raw, self.modality, self, part_labels)


def encode(raw, modality: str, params: TokenEncoder, part_labels=None) -> TokenSequence:
    raw = raw if isinstance(raw, Tensor) else T.tensor(raw, dtype=params.embed.W.dtype)
    n = raw.shape[-2] if raw.ndim >= 2 else 0
    if n == 0:
        raise ValueError("cannot encode an empty token sequence")
    x = params.embed(raw)
    if modality == TEXT:
        if n > params.pos.shape[0]:
            raise ValueError(f"text length {n} exceeds positional table {params.pos.shape[0]}")
        x = x + _rows(params.pos, n)
    tokens = params.norm(x)
    return TokenSequence(tokens, tokens.mean(axis=-2), modality, part_labels)


def _rows(table: Tensor, n: int) -> Tensor:
    if n == table.shape[0]:
        return table
    # slicing a parameter: select the first n rows through a constant matmul
    sel = np.eye(table.shape[0], dtype=table.dtype)[:n]
    return T.tensor(sel) @ table


class EmbeddingHeads(Module):
    """Linear maps into the d_e alignment space (shared by both modalities)."""

    def __init__(self, d: int, M: int, d_c: int, d_e: int, rng, dtype=np.float32):
        self.global_head = Linear(d, d_e, rng, dtype)
        self.slot_head = Linear(M * d_c, d_e, rng, dtype)
        self.block_head = Linear(d_c, d_e, rng, dtype)


def embed_levels(g: Tensor, S: SlotState | Tensor, heads: EmbeddingHeads):
    """Unit-norm global, slot and block embeddings.

    Returns ``z_g [..., d_e]``, ``z_slots [..., K, d_e]``, ``z_blocks [..., K, M, d_e]``.
    """
    s = S.slots if isinstance(S, SlotState) else S
    K, M, d_c = s.shape[-3:]
    z_g = T.l2_normalize(heads.global_head(g))
    z_slots = T.l2_normalize(heads.slot_head(s.reshape(s.shape[:-2] + (M * d_c,))))
    z_blocks = T.l2_normalize(heads.block_head(s))
    return z_g, z_slots, z_blocks
