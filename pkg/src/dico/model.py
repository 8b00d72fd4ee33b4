"""Full model: encoders, shared slots and prototype memory, per-modality
slot-concept refinement, embedding heads, identity heads, decoders."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .config import Config
from .encoders import IMAGE, TEXT, EmbeddingHeads, TokenEncoder, embed_levels
from .nn import Linear, Module
from .slots import AttentionRecord, PrototypeMemory, SlotConcept, SlotState, init_slots, refine
from .tensor import Tensor


def dtype_for(precision: int):
    return np.float64 if precision == 64 else np.float32


@dataclass
class Embeddings:
    z_g: Tensor       # [B, d_e]
    z_slots: Tensor   # [B, K, d_e]
    z_blocks: Tensor  # [B, K, M, d_e]

    def numpy(self) -> "Embeddings":
        return Embeddings(*(np.asarray(t.data if isinstance(t, Tensor) else t)
                            for t in (self.z_g, self.z_slots, self.z_blocks)))


@dataclass
class ModalityOutput:
    tokens: Tensor
    global_: Tensor
    slots: SlotState
    records: list[AttentionRecord]
    emb: Embeddings
    trace: list | None = None


class DiCoModel(Module):
    def __init__(self, cfg: Config, n_classes: int, seed: int = 0, text_len: int | None = None):
        m = cfg.model
        if m.d_h != m.M * m.d_c:
            raise ValueError(f"d_h={m.d_h} must equal M*d_c={m.M * m.d_c}")
        self.cfg = cfg
        dtype = dtype_for(cfg.optim.precision)
        rng = np.random.default_rng([seed, 0xD1C0])
        if text_len is None:
            text_len = cfg.data.P * cfg.data.F + cfg.data.n_filler
        self.S0 = init_slots(m.K, m.M, m.d_c, int(rng.integers(2**31)), dtype).slots
        self.memory = PrototypeMemory(m.M, m.K_m, m.d_c, rng, m.tau_p, dtype)
        self.enc_image = TokenEncoder(m.d_raw, m.d, IMAGE, rng, dtype=dtype)
        self.enc_text = TokenEncoder(m.d_raw, m.d, TEXT, rng, max_len=text_len, dtype=dtype)
        self.sc_image = SlotConcept(m.d, m.M, m.d_c, m.d_h, rng, dtype)
        self.sc_text = SlotConcept(m.d, m.M, m.d_c, m.d_h, rng, dtype)
        self.heads = EmbeddingHeads(m.d, m.M, m.d_c, m.d_e, rng, dtype)
        self.id_heads = L.IdentityHeads(m.d_e, n_classes, rng, dtype)
        self.dec_image = Linear(m.M * m.d_c, m.d, rng, dtype)
        self.dec_text = Linear(m.M * m.d_c, m.d, rng, dtype)
        self.temps = L.Temperatures(cfg.loss, dtype)

    @property
    def dtype(self):
        return self.S0.dtype

    @property
    def n_classes(self) -> int:
        return self.id_heads.n_classes

    def _parts(self, modality):
        if modality == IMAGE:
            return self.enc_image, self.sc_image
        if modality == TEXT:
            return self.enc_text, self.sc_text
        raise ValueError(f"unknown modality {modality!r}")

    def forward_modality(self, raw, modality: str, trace: bool = False) -> ModalityOutput:
        enc, sc = self._parts(modality)
        raw = raw if isinstance(raw, Tensor) else T.tensor(np.asarray(raw, dtype=self.dtype))
        seq = enc(raw)
        steps = [] if trace else None
        S, records = refine(SlotState(self.S0), seq.tokens, sc, self.memory, self.cfg.model.T, steps)
        emb = Embeddings(*embed_levels(seq.global_, S, self.heads))
        return ModalityOutput(seq.tokens, seq.global_, S, records, emb, steps)

    def loss_parts(self, out_v: ModalityOutput, out_t: ModalityOutput, labels) -> dict[str, Tensor]:
        lc = self.cfg.loss
        ev, et = out_v.emb, out_t.emb
        return {
            "global": L.loss_global(ev.z_g, et.z_g, self.temps.tau),
            "slot": L.loss_slot(ev.z_slots, et.z_slots, self.temps.tau_s, lc.bidirectional_local),
            "block": L.loss_block(ev.z_blocks, et.z_blocks, self.temps.tau_b, lc.bidirectional_local),
            "id_global": L.loss_id(ev.z_g, et.z_g, labels, self.id_heads.global_cls),
            "id_slot": L.loss_id(ev.z_slots, et.z_slots, labels, self.id_heads.slot_cls),
            "rec": L.loss_rec(out_v.tokens, out_t.tokens, out_v.records, out_t.records,
                              out_v.slots, out_t.slots, self.dec_image, self.dec_text),
        }

    def loss(self, image, text, labels) -> tuple[Tensor, dict[str, Tensor]]:
        out_v = self.forward_modality(image, IMAGE)
        out_t = self.forward_modality(text, TEXT)
        parts = self.loss_parts(out_v, out_t, labels)
        return L.total_loss(parts, self.cfg.loss), parts

    def embed(self, raw, modality: str, batch: int = 256) -> Embeddings:
        """Alignment-space embeddings for many samples, without recording a graph."""
        raw = np.asarray(raw)
        chunks = []
        with T.no_grad():
            for i in range(0, len(raw), batch):
                chunks.append(self.forward_modality(raw[i:i + batch], modality).emb.numpy())
        return Embeddings(*(np.concatenate([getattr(c, f) for c in chunks])
                            for f in ("z_g", "z_slots", "z_blocks")))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr
