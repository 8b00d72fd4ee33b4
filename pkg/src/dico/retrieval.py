"""Fused multi-level similarity, recall@K, and attention/prototype analytics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .encoders import IMAGE, TEXT
from .model import DiCoModel, Embeddings

DEFAULT_KS = (1, 5, 10)


@dataclass
class GalleryIndex:
    emb: Embeddings        # numpy arrays, unit-norm rows
    ids: np.ndarray
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, model: DiCoModel, images: np.ndarray, ids: np.ndarray, weights=None) -> "GalleryIndex":
        if weights is None:
            e = model.cfg.eval
            weights = (e.w_global, e.w_slot, e.w_block)
        return cls(model.embed(images, IMAGE), np.asarray(ids), tuple(weights))


def fused_similarity(query: Embeddings, entry: Embeddings, weights=(1.0, 1.0, 1.0)) -> float:
    """w_g cos(global) + w_s mean_k cos(slot k) + w_b mean_{k,m} cos(block k,m), for one pair."""
    q, g = query.numpy(), entry.numpy()
    for a, b in ((q.z_g, g.z_g), (q.z_slots, g.z_slots), (q.z_blocks, g.z_blocks)):
        if a.shape != b.shape:
            raise T.DimensionError(f"embedding shapes disagree: {a.shape} vs {b.shape}")
    w_g, w_s, w_b = weights
    s_g = float(np.dot(q.z_g, g.z_g))
    s_s = float(np.mean(np.sum(q.z_slots * g.z_slots, axis=-1)))
    s_b = float(np.mean(np.sum(q.z_blocks * g.z_blocks, axis=-1)))
    return w_g * s_g + w_s * s_s + w_b * s_b


def similarity_matrix(queries: Embeddings, gallery: Embeddings, weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Fused similarity for all query/gallery pairs, ``[n_query, n_gallery]``."""
    w_g, w_s, w_b = weights
    K = queries.z_slots.shape[1]
    KM = K * queries.z_blocks.shape[2]
    out = w_g * (queries.z_g @ gallery.z_g.T)
    if w_s:
        out = out + w_s * np.einsum("qkd,gkd->qg", queries.z_slots, gallery.z_slots) / K
    if w_b:
        out = out + w_b * np.einsum("qkmd,gkmd->qg", queries.z_blocks, gallery.z_blocks) / KM
    return out


def rank_and_recall(scores: np.ndarray, query_ids: np.ndarray, gallery_ids: np.ndarray,
                    ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    """Fraction of queries whose identity appears in the top-K gallery items.

    Ties are broken by gallery insertion order.
    """
    scores = np.asarray(scores)
    if scores.shape[0] == 0:
        raise ValueError("empty query set")
    if scores.shape[1] == 0:
        raise ValueError("empty gallery")
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = np.asarray(gallery_ids)[order] == np.asarray(query_ids)[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), scores.shape[1])
    return {k: float(np.mean(first < k)) for k in ks}


def evaluate(model: DiCoModel, gallery_images: np.ndarray, gallery_ids: np.ndarray,
             query_texts: np.ndarray, query_ids: np.ndarray, weights=None,
             ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    index = GalleryIndex.build(model, gallery_images, gallery_ids, weights)
    q = model.embed(query_texts, TEXT)
    return rank_and_recall(similarity_matrix(q, index.emb, index.weights), query_ids, index.ids, ks)


# ---------------------------------------------------------------- analytics

def slot_purity(assignment: np.ndarray, part_labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Share of each slot's attention mass on its most-attended part.

    ``assignment`` is ``[n, N, K]`` (or ``[N, K]``), ``part_labels`` ``[n, N]``.
    Returns per-slot purity averaged over samples, and its mean over slots.
    """
    if part_labels is None:
        raise ValueError("slot purity needs part labels")
    A = np.asarray(assignment, dtype=np.float64)
    labels = np.asarray(part_labels)
    if A.ndim == 2:
        A, labels = A[None], labels[None]
    parts = np.unique(labels[labels >= 0])
    mass = np.stack([(A * (labels == p)[..., None]).sum(axis=1) for p in parts], axis=1)  # [n, P, K]
    total = A.sum(axis=1)  # [n, K]
    purity = mass.max(axis=1) / total
    per_slot = purity.mean(axis=0)
    return per_slot, float(per_slot.mean())


def final_records(model: DiCoModel, raw: np.ndarray, modality: str = IMAGE, batch: int = 256):
    """Final-iteration assignment ``[n, tokens, K]`` and prototype weights ``[n, K, M, K_m]``."""
    A, W = [], []
    with T.no_grad():
        for i in range(0, len(raw), batch):
            out = model.forward_modality(np.asarray(raw[i:i + batch]), modality, trace=True)
            A.append(out.records[-1].assignment.data)
            W.append(out.trace[-1].proto_weights.data)
    return np.concatenate(A), np.concatenate(W)


def prototype_coverage(model: DiCoModel, raw: np.ndarray, modality: str = IMAGE,
                       weights: np.ndarray | None = None) -> np.ndarray:
    """Mean final-iteration prototype weight per block and prototype, summed over slots.

    Returns ``[M, K_m]``; every row sums to K.
    """
    if weights is None:
        if len(raw) == 0:
            raise ValueError("empty dataset")
        _, weights = final_records(model, raw, modality)
    w = np.asarray(weights)
    if w.shape[0] == 0:
        raise ValueError("empty dataset")
    return w.sum(axis=1).mean(axis=0)


def prototype_attention_dump(model: DiCoModel, raw: np.ndarray, blocks: Iterable[int],
                             modality: str = IMAGE) -> dict[int, np.ndarray]:
    """Per-block prototype weight rows ``[n * K, K_m]`` (sample-major, then slot)."""
    blocks = list(blocks)
    M = model.cfg.model.M
    for b in blocks:
        if not 0 <= b < M:
            raise IndexError(f"block index {b} out of range for M={M}")
    _, w = final_records(model, raw, modality)
    return {b: w[:, :, b, :].reshape(-1, w.shape[-1]) for b in blocks}


# ---------------------------------------------------------------- CSV export

def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def write_recall_csv(path, recalls: dict[int, float]) -> None:
    write_csv(path, ("k", "recall"), ((k, float(v)) for k, v in recalls.items()))


def recall_csv_text(recalls: dict[int, float]) -> str:
    lines = ["k,recall"] + [f"{k},{float(v)!r}" for k, v in recalls.items()]
    return "\n".join(lines) + "\n"


def export_analytics(model: DiCoModel, images: np.ndarray, part_labels: np.ndarray, out_dir,
                     blocks: Sequence[int] | None = None) -> dict[str, Path]:
    """Write slot attention maps, purity, prototype coverage and prototype dumps as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    A, W = final_records(model, images, IMAGE)
    n, N, K = A.shape
    M, K_m = W.shape[2], W.shape[3]
    paths = {}

    paths["attention"] = out / "slot_attention.csv"
    write_csv(paths["attention"], ["sample", "token", "part"] + [f"slot_{k}" for k in range(K)],
              ([i, j, int(part_labels[i, j])] + list(A[i, j]) for i in range(n) for j in range(N)))

    per_slot, mean = slot_purity(A, part_labels)
    paths["purity"] = out / "slot_purity.csv"
    write_csv(paths["purity"], ["slot", "purity"],
              [[k, float(per_slot[k])] for k in range(K)] + [[-1, mean]])

    cov = prototype_coverage(model, images, weights=W)
    paths["coverage"] = out / "prototype_coverage.csv"
    write_csv(paths["coverage"], ["block"] + [f"proto_{j}" for j in range(K_m)],
              ([m] + list(cov[m]) for m in range(M)))

    blocks = list(range(min(3, M))) if blocks is None else list(blocks)
    for b in blocks:
        if not 0 <= b < M:
            raise IndexError(f"block index {b} out of range for M={M}")
        key = f"prototype_attention_block{b}"
        paths[key] = out / f"{key}.csv"
        write_csv(paths[key], ["sample", "slot"] + [f"proto_{j}" for j in range(K_m)],
                  ([i, k] + list(W[i, k, b]) for i in range(n) for k in range(K)))
    return paths
