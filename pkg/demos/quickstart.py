"""Build a desk-scale model, push one synthetic batch through it, look inside.

    python demos/quickstart.py
"""
import numpy as np

from dico import tensor as T
from dico.config import Config
from dico.encoders import IMAGE, TEXT
from dico.model import DiCoModel
from dico.synthdata import build_splits

cfg = Config.toy()
splits = build_splits(cfg.data, cfg.model.d_raw, seed=0)
batch = splits.train.subset(np.arange(8))
print(f"{len(splits.train)} training pairs, {len(splits.test)} test pairs")
print(f"image tokens {batch.image.shape}, caption tokens {batch.text.shape}")

model = DiCoModel(cfg, n_classes=len(np.unique(splits.train.ids)), seed=0,
                  text_len=batch.text.shape[1])
print(f"{sum(p.data.size for _, p in model.named_parameters())} parameters")

with T.no_grad():
    out = model.forward_modality(batch.image, IMAGE, trace=True)

# Slots compete for tokens: every token's assignment is a distribution over slots.
A = out.records[-1].assignment.data
print("assignment rows sum to", np.round(A.sum(axis=-1)[0, :4], 6))

# Each concept block is re-expressed through its prototype memory.
w = out.trace[-1].proto_weights.data
print("prototype weights", w.shape, "top prototype of slot 0 / block 0:", int(w[0, 0, 0].argmax()))

emb = out.emb
print("embeddings: global", emb.z_g.shape, "slots", emb.z_slots.shape, "blocks", emb.z_blocks.shape)

labels = np.unique(batch.ids, return_inverse=True)[1]
with T.no_grad():
    total, parts = model.loss(batch.image, batch.text, labels)
print("loss terms at init:", {k: round(float(v.data), 4) for k, v in parts.items()})
print("total", round(float(total.data), 4))

with T.no_grad():
    txt = model.forward_modality(batch.text, TEXT)
sims = emb.z_g.data @ txt.emb.z_g.data.T
print("global cosine, matched vs mismatched:",
      round(float(np.diag(sims).mean()), 4), round(float(sims[~np.eye(8, dtype=bool)].mean()), 4))
