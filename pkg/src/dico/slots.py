"""Slot-concept attention.

Shared slots ``S0`` of shape ``[K, M, d_c]`` are refined against a token
sequence for ``T`` iterations. Each iteration:

1. tokens pick slots: ``A = softmax_k(k(X) q(S)^T / sqrt(d_h))``
2. each slot column of ``A`` is rescaled to sum to one and slot summaries
   ``U = A_norm^T v(X)`` are formed
3. every summary row is split into ``M`` blocks, each block updated by its
   own GRU and residual LN+MLP (weights shared over slots)
4. every block is re-expressed as a softmax-weighted mix of the prototypes
   of its concept memory ``C_m``
5. blocks are reassembled and the slots pass through a residual
   single-head self-attention.

All functions accept an optional leading batch axis on the tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, normal, zeros
from .tensor import DimensionError, GRUParams, Tensor

NORM_EPS = 1e-8
INIT_STD = 0.02


class SlotState:
    def __init__(self, slots: Tensor, iteration: int = 0):
        if slots.ndim < 3 or min(slots.shape[-3:]) < 1:
            raise DimensionError(f"slots must end in [K, M, d_c], got {slots.shape}")
        self.slots = slots
        self.iteration = iteration

    @property
    def K(self) -> int:
        return self.slots.shape[-3]

    @property
    def M(self) -> int:
        return self.slots.shape[-2]

    @property
    def d_c(self) -> int:
        return self.slots.shape[-1]

    def flat(self) -> Tensor:
        """Slots as ``[..., K, M*d_c]`` (blocks concatenated)."""
        s = self.slots
        return s.reshape(s.shape[:-2] + (self.M * self.d_c,))


def init_slots(K: int, M: int, d_c: int, seed: int, dtype=np.float32) -> SlotState:
    """Learnable initial slots drawn from N(0, 0.02^2)."""
    if min(K, M, d_c) < 1:
        raise ValueError(f"slot dims must be positive, got K={K}, M={M}, d_c={d_c}")
    rng = np.random.default_rng(seed)
    return SlotState(normal(rng, (K, M, d_c), INIT_STD, dtype), 0)


@dataclass
class AttentionRecord:
    raw: Tensor         # [..., n, K] token-to-slot scores
    assignment: Tensor  # softmax over slots, rows sum to 1
    normalized: Tensor | None = None  # columns rescaled to sum to 1


class ModalityProjections(Module):
    """q maps slots (M*d_c) to d_h; k and v map tokens (d) to d_h."""

    def __init__(self, d: int, slot_dim: int, d_h: int, rng, dtype=np.float32):
        self.q = Linear(slot_dim, d_h, rng, dtype, bias=False)
        self.k = Linear(d, d_h, rng, dtype, bias=False)
        self.v = Linear(d, d_h, rng, dtype, bias=False)

    @property
    def d_h(self) -> int:
        return self.q.W.shape[1]


class PrototypeMemory(Module):
    """M concept dictionaries, stored stacked as ``[M, K_m, d_c]``."""

    def __init__(self, M: int, K_m: int, d_c: int, rng, tau_p: float = 1.0, dtype=np.float32):
        if K_m < 1:
            raise ValueError("K_m must be >= 1")
        if tau_p <= 0:
            raise ValueError("tau_p must be positive")
        self.C = normal(rng, (M, K_m, d_c), 1.0, dtype)
        self.tau_p = float(tau_p)

    @property
    def M(self) -> int:
        return self.C.shape[0]

    @property
    def K_m(self) -> int:
        return self.C.shape[1]

    def memory(self, m: int) -> np.ndarray:
        return self.C.data[m]


class BlockUpdaters(Module):
    """Per-block GRU and LN+MLP; weights stacked over the block axis."""

    def __init__(self, M: int, d_c: int, rng, dtype=np.float32):
        s = 1.0 / np.sqrt(d_c)
        for g in ("z", "r", "h"):
            setattr(self, f"W_{g}", normal(rng, (M, d_c, d_c), s, dtype))
            setattr(self, f"U_{g}", normal(rng, (M, d_c, d_c), s, dtype))
            setattr(self, f"b_{g}", zeros((M, d_c), dtype))
        self.ln_gamma = T.parameter(np.ones((M, d_c), dtype=dtype))
        self.ln_beta = zeros((M, d_c), dtype)
        self.fc1_W = normal(rng, (M, d_c, d_c), s, dtype)
        self.fc1_b = zeros((M, d_c), dtype)
        self.fc2_W = normal(rng, (M, d_c, d_c), s, dtype)
        self.fc2_b = zeros((M, d_c), dtype)

    @property
    def M(self) -> int:
        return self.W_z.shape[0]

    def gru(self) -> GRUParams:
        return GRUParams(**{n: getattr(self, n) for n in GRUParams.names})

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0


class SlotSelfAttention(Module):
    def __init__(self, dim: int, rng, dtype=np.float32):
        self.q = Linear(dim, dim, rng, dtype, bias=False)
        self.k = Linear(dim, dim, rng, dtype, bias=False)
        self.v = Linear(dim, dim, rng, dtype, bias=False)

    def __call__(self, slots: Tensor) -> Tensor:
        return slot_self_attention(slots, self)


class SlotConcept(Module):
    """Refinement machinery for one modality (projections, updaters, self-attention)."""

    def __init__(self, d: int, M: int, d_c: int, d_h: int, rng, dtype=np.float32):
        if d_h % M:
            raise ValueError(f"d_h={d_h} is not divisible by M={M}")
        if d_h != M * d_c:
            raise ValueError(f"d_h={d_h} must equal M*d_c={M * d_c}")
        self.proj = ModalityProjections(d, M * d_c, d_h, rng, dtype)
        self.updaters = BlockUpdaters(M, d_c, rng, dtype)
        self.self_attn = SlotSelfAttention(M * d_c, rng, dtype)


# ---------------------------------------------------------------- operations

def _flatten_slots(slots: Tensor) -> Tensor:
    return slots.reshape(slots.shape[:-2] + (slots.shape[-2] * slots.shape[-1],))


def compute_assignment(slots: SlotState | Tensor, tokens: Tensor,
                       proj: ModalityProjections, keys: Tensor | None = None) -> AttentionRecord:
    """Scaled token-slot scores and the softmax over slots.

    ``keys`` may carry a precomputed ``k(tokens)``.
    """
    s = slots.slots if isinstance(slots, SlotState) else slots
    if tokens.shape[-2] == 0:
        raise ValueError("empty token sequence")
    if tokens.shape[-1] != proj.k.W.shape[0]:
        raise DimensionError(f"token dim {tokens.shape[-1]} != projection input {proj.k.W.shape[0]}")
    q = proj.q(_flatten_slots(s))                       # [..., K, d_h]
    k = proj.k(tokens) if keys is None else keys        # [..., n, d_h]
    raw = (k @ q.T) * (1.0 / np.sqrt(proj.d_h))         # [..., n, K]
    return AttentionRecord(raw=raw, assignment=T.softmax_axis(raw, axis=-1))


def normalize_and_aggregate(rec: AttentionRecord, tokens: Tensor, proj: ModalityProjections,
                            values: Tensor | None = None) -> Tensor:
    """Rescale assignment columns to unit mass and pool projected token values.

    Fills ``rec.normalized`` and returns the slot summaries ``[..., K, d_h]``.
    """
    A = rec.assignment
    col = A.sum(axis=-2, keepdims=True) + NORM_EPS
    rec.normalized = A / col
    v = proj.v(tokens) if values is None else values
    return rec.normalized.T @ v


def update_blocks(slots: SlotState | Tensor, U: Tensor, updaters: BlockUpdaters) -> Tensor:
    """GRU + residual LN/MLP per concept block; returns ``[..., K, M, d_c]``."""
    s = slots.slots if isinstance(slots, SlotState) else slots
    M, d_c = s.shape[-2], s.shape[-1]
    if U.shape[-1] % M:
        raise ValueError(f"summary dim {U.shape[-1]} is not divisible by M={M}")
    if U.shape[-1] // M != d_c:
        raise DimensionError(f"summary blocks of size {U.shape[-1] // M} do not match d_c={d_c}")
    u = U.reshape(U.shape[:-1] + (M, d_c))
    s_hat = T.gru_cell(s, u, updaters.gru())
    # layer norm with per-block affine: normalize with unit affine, then scale per block
    one = T.tensor(np.ones(d_c, dtype=s_hat.dtype))
    zero = T.tensor(np.zeros(d_c, dtype=s_hat.dtype))
    normed = T.layer_norm(s_hat, one, zero) * updaters.ln_gamma + updaters.ln_beta
    hidden = T.gelu(T._affine(normed, updaters.fc1_W) + updaters.fc1_b)
    return s_hat + (T._affine(hidden, updaters.fc2_W) + updaters.fc2_b)


def prototype_weights(blocks: Tensor, mem: PrototypeMemory) -> Tensor:
    """Softmax weights of every block over its memory's prototypes, ``[..., K, M, K_m]``."""
    M, d_c = blocks.shape[-2], blocks.shape[-1]
    if d_c != mem.C.shape[-1] or M != mem.M:
        raise DimensionError(f"blocks {blocks.shape} do not match memory {mem.C.shape}")
    lead = blocks.shape[:-1]
    scores = blocks.reshape(lead + (1, d_c)) @ mem.C.T        # [..., M, 1, K_m]
    scores = scores * (1.0 / (np.sqrt(d_c) * mem.tau_p))
    w = T.softmax_axis(scores, axis=-1)
    return w.reshape(lead + (mem.K_m,))


def project_prototypes(blocks: Tensor, mem: PrototypeMemory, return_weights: bool = False):
    w = prototype_weights(blocks, mem)
    lead = w.shape[:-1]
    out = (w.reshape(lead + (1, mem.K_m)) @ mem.C).reshape(lead + (mem.C.shape[-1],))
    return (out, w) if return_weights else out


def slot_self_attention(slots: Tensor, params: SlotSelfAttention) -> Tensor:
    """``slots + softmax(q k^T / sqrt(D)) v`` over the K slots, ``slots`` is ``[..., K, D]``."""
    D = slots.shape[-1]
    q, k, v = params.q(slots), params.k(slots), params.v(slots)
    attn = T.softmax_axis((q @ k.T) * (1.0 / np.sqrt(D)), axis=-1)
    return slots + attn @ v


@dataclass
class IterationTrace:
    """Everything one refinement step produced (for analytics)."""
    record: AttentionRecord
    summaries: Tensor
    updated: Tensor
    proto_weights: Tensor
    projected: Tensor


def refine(S0: SlotState, tokens: Tensor, module: SlotConcept, memory: PrototypeMemory,
           T_iters: int, trace: list | None = None) -> tuple[SlotState, list[AttentionRecord]]:
    """Run ``T_iters`` refinement steps from ``S0``.

    Returns the final state and one :class:`AttentionRecord` per iteration.
    If ``trace`` is a list it receives an :class:`IterationTrace` per step.
    """
    if T_iters < 1:
        raise ValueError("T must be >= 1")
    proj = module.proj
    keys = proj.k(tokens)
    values = proj.v(tokens)
    s = S0.slots
    K, M, d_c = S0.K, S0.M, S0.d_c
    records = []
    for _ in range(T_iters):
        rec = compute_assignment(s, tokens, proj, keys=keys)
        U = normalize_and_aggregate(rec, tokens, proj, values=values)
        s_bar = update_blocks(s, U, module.updaters)
        s_proj, w = project_prototypes(s_bar, memory, return_weights=True)
        flat = s_proj.reshape(s_proj.shape[:-2] + (M * d_c,))
        flat = slot_self_attention(flat, module.self_attn)
        s = flat.reshape(flat.shape[:-1] + (M, d_c))
        records.append(rec)
        if trace is not None:
            trace.append(IterationTrace(rec, U, s_bar, w, s_proj))
    return SlotState(s, T_iters), records

