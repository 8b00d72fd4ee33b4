"""Synthetic attribute-grounded image/caption pairs.

An identity is a ``P x F`` table of categorical attribute values (parts by
factors, each factor taking one of ``V`` values). Rendering draws:

* image tokens: ``N`` tokens split evenly over the parts, each token
  ``part_basis[p] + sum_f value_basis[f, v_pf] + sigma * noise``;
* caption tokens: one token ``part_basis[p] + value_basis[f, v_pf]`` per
  mentioned ``(part, factor)`` cell, shuffled, padded with filler words.

Value bases are shared across parts, so mean-pooling the image tokens keeps
the bag of values but loses which part carries which value.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckio
from .config import DataConfig


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    attributes: np.ndarray  # [P, F] ints in [0, V)

    @property
    def key(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.attributes.ravel())


@dataclass
class Bases:
    part: np.ndarray    # [P, d_raw]
    value: np.ndarray   # [F, V, d_raw]
    filler: np.ndarray  # [n_vocab, d_raw]


def make_bases(P: int, F: int, V: int, d_raw: int, seed: int, n_filler_vocab: int = 8) -> Bases:
    """Seeded Gaussian basis vectors with unit expected norm."""
    rng = np.random.default_rng([seed, 0xBA5E])
    s = 1.0 / np.sqrt(d_raw)
    return Bases(part=rng.normal(0, s, (P, d_raw)),
                 value=rng.normal(0, s, (F, V, d_raw)),
                 filler=rng.normal(0, s, (n_filler_vocab, d_raw)))


def generate_universe(P: int, F: int, V: int, n_ids: int, seed: int) -> list[IdentitySpec]:
    """``n_ids`` distinct attribute tables, sampled without replacement."""
    cells = P * F
    capacity = V ** cells
    if n_ids > capacity:
        raise ValueError(f"cannot draw {n_ids} distinct identities from {capacity} attribute tuples")
    rng = np.random.default_rng(seed)
    if capacity <= 4 * n_ids or capacity <= 4096:
        all_tuples = np.array(list(itertools.product(range(V), repeat=cells)), dtype=np.int64)
        chosen = all_tuples[rng.choice(capacity, size=n_ids, replace=False)]
    else:
        seen: set[tuple[int, ...]] = set()
        rows = []
        while len(rows) < n_ids:
            t = rng.integers(0, V, size=cells)
            key = tuple(int(v) for v in t)
            if key not in seen:
                seen.add(key)
                rows.append(t)
        chosen = np.stack(rows)
    return [IdentitySpec(i, chosen[i].reshape(P, F)) for i in range(n_ids)]


@dataclass
class SyntheticPair:
    image_tokens: np.ndarray   # [N, d_raw]
    part_labels: np.ndarray    # [N]
    text_tokens: np.ndarray    # [L, d_raw]
    text_part_labels: np.ndarray  # [L], -1 for filler
    id: int
    caption_mask: np.ndarray   # [P, F] bool


def render_pair(spec: IdentitySpec, sigma: float, p: float, seed, bases: Bases,
                N: int = 32, n_filler: int = 4) -> SyntheticPair:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not 0 <= p < 1:
        raise ValueError("caption drop probability must lie in [0, 1)")
    P, F = spec.attributes.shape
    if N < P:
        raise ValueError(f"need at least one token per part (N={N}, P={P})")
    rng = np.random.default_rng(seed)
    d_raw = bases.part.shape[1]
    parts = (np.arange(N) * P) // N
    per_part = bases.part + bases.value[np.arange(F)[None, :], spec.attributes].sum(axis=1)
    image = per_part[parts] + sigma * rng.normal(size=(N, d_raw))

    mask = rng.random((P, F)) >= p
    if not mask.any():
        mask[divmod(int(rng.integers(P * F)), F)] = True
    cells = np.argwhere(mask)
    mention = bases.part[cells[:, 0]] + bases.value[cells[:, 1], spec.attributes[cells[:, 0], cells[:, 1]]]
    L = P * F + n_filler
    n_fill = L - len(cells)
    filler = bases.filler[rng.integers(0, len(bases.filler), size=n_fill)]
    text = np.concatenate([mention, filler])
    text_parts = np.concatenate([cells[:, 0], np.full(n_fill, -1)])
    order = rng.permutation(L)
    return SyntheticPair(image, parts, text[order], text_parts[order], spec.id, mask)


@dataclass
class PairSet:
    """Stacked renders. Arrays share the leading sample axis."""
    image: np.ndarray         # [n, N, d_raw]
    text: np.ndarray          # [n, L, d_raw]
    ids: np.ndarray           # [n]
    part_labels: np.ndarray   # [n, N]
    text_part_labels: np.ndarray  # [n, L]
    caption_mask: np.ndarray  # [n, P, F]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def stack(cls, pairs: list[SyntheticPair]) -> "PairSet":
        return cls(np.stack([q.image_tokens for q in pairs]),
                   np.stack([q.text_tokens for q in pairs]),
                   np.array([q.id for q in pairs], dtype=np.int64),
                   np.stack([q.part_labels for q in pairs]),
                   np.stack([q.text_part_labels for q in pairs]),
                   np.stack([q.caption_mask for q in pairs]))

    def subset(self, idx) -> "PairSet":
        return PairSet(self.image[idx], self.text[idx], self.ids[idx], self.part_labels[idx],
                       self.text_part_labels[idx], self.caption_mask[idx])


@dataclass
class Splits:
    train: PairSet
    test: PairSet
    universe: list[IdentitySpec] = field(repr=False)
    bases: Bases = field(repr=False)

    @property
    def gallery(self) -> PairSet:
        """Test images (use ``.image``, ``.ids``, ``.part_labels``)."""
        return self.test

    @property
    def query(self) -> PairSet:
        """Test captions (use ``.text``, ``.ids``)."""
        return self.test


def make_splits(universe: list[IdentitySpec], renders_per_id: int, train_frac: float, seed: int,
                bases: Bases, sigma: float = 0.3, p: float = 0.3, N: int = 32,
                n_filler: int = 4) -> Splits:
    """Identity-disjoint train/test renders."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie in (0, 1)")
    n = len(universe)
    n_train = int(round(train_frac * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"{n} identities are too few to split at train_frac={train_frac}")
    order = np.random.default_rng([seed, 0x5B17]).permutation(n)
    train_ids, test_ids = sorted(order[:n_train]), sorted(order[n_train:])

    def render(ids):
        return PairSet.stack([render_pair(universe[i], sigma, p, [seed, universe[i].id, r], bases, N, n_filler)
                              for i in ids for r in range(renders_per_id)])

    return Splits(render(train_ids), render(test_ids), universe, bases)


def build_splits(data: DataConfig, d_raw: int, seed: int, **overrides) -> Splits:
    """Universe, bases and splits from a data config; keyword overrides replace config fields."""
    cfg = {k: getattr(data, k) for k in ("P", "F", "V", "n_ids", "N", "sigma", "p",
                                          "renders_per_id", "train_frac", "n_filler")}
    cfg.update(overrides)
    universe = generate_universe(cfg["P"], cfg["F"], cfg["V"], cfg["n_ids"], seed)
    bases = make_bases(cfg["P"], cfg["F"], cfg["V"], d_raw, seed)
    return make_splits(universe, cfg["renders_per_id"], cfg["train_frac"], seed, bases,
                       cfg["sigma"], cfg["p"], cfg["N"], cfg["n_filler"])


def part_pooled_features(pairs: PairSet, bases: Bases, modality: str) -> np.ndarray:
    """Model-free per-part attribute features, ``[n, P * d_raw]``.

    Image: mean of each part's tokens minus the part basis. Caption: sum over
    that part's mention tokens of (token - part basis). Both equal
    ``sum_f value_basis[f, v_pf]`` for a noiseless, fully mentioned pair.
    """
    P = bases.part.shape[0]
    if modality == "image":
        tokens, labels = pairs.image, pairs.part_labels
    else:
        tokens, labels = pairs.text, pairs.text_part_labels
    out = np.zeros((len(pairs), P, tokens.shape[-1]))
    for p in range(P):
        sel = (labels == p)[..., None]
        centered = (tokens - bases.part[p]) * sel
        total = centered.sum(axis=1)
        if modality == "image":
            total = total / np.maximum(sel.sum(axis=1), 1)
        out[:, p] = total
    return out.reshape(len(pairs), -1)


# ---------------------------------------------------------------- export

_PAIR_FIELDS = ("image", "text", "ids", "part_labels", "text_part_labels", "caption_mask")


def save_pairs(path, pairs: PairSet, meta: dict[str, str] | None = None) -> None:
    """Write one split in the tensor-record format (integer arrays as float64, exact)."""
    records = {}
    for name in _PAIR_FIELDS:
        arr = getattr(pairs, name)
        records[name] = arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float64)
    ckio.write(path, records, meta)


def load_pairs(path) -> tuple[PairSet, dict[str, str]]:
    records, meta = ckio.read(path)
    missing = [k for k in _PAIR_FIELDS if k not in records]
    if missing:
        raise ValueError(f"{path}: not a split file (missing {', '.join(missing)})")
    ints = {"ids", "part_labels", "text_part_labels"}
    vals = {k: records[k].astype(np.int64) if k in ints else records[k] for k in _PAIR_FIELDS}
    vals["caption_mask"] = vals["caption_mask"].astype(bool)
    return PairSet(**vals), meta
