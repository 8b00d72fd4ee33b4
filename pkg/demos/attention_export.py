"""Where do the slots look? Purity of slot attention on clean renders.

    python demos/attention_export.py [steps] [out_dir]

Writes the same CSVs as ``dico export-attn``.
"""
import sys

import numpy as np

from dico.config import Config
from dico.retrieval import export_analytics, final_records, slot_purity
from dico.synthdata import build_splits
from dico.trainer import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
out_dir = sys.argv[2] if len(sys.argv) > 2 else "attn_out"

cfg = Config.toy()
sp = build_splits(cfg.data, cfg.model.d_raw, seed=0)
res = train(cfg, sp.train, steps=steps, seed=0)

# noise-free renders of the test identities make part membership unambiguous
clean = build_splits(cfg.data, cfg.model.d_raw, seed=0, sigma=0.0).test.subset(np.arange(64))
A, _ = final_records(res.model, clean.image)
per_slot, mean = slot_purity(A, clean.part_labels)
print("purity per slot", np.round(per_slot, 3), "mean", round(mean, 3))
print(f"(a slot spread evenly over {cfg.data.P} parts scores about {1 / cfg.data.P:.2f})")

# which part does each slot favour, on average?
parts = np.unique(clean.part_labels[clean.part_labels >= 0])
mass = np.stack([(A * (clean.part_labels == p)[..., None]).sum(axis=1).mean(axis=0) for p in parts])
print("mean attention mass, rows = parts, cols = slots")
print(np.round(mass, 2))

for name, path in export_analytics(res.model, clean.image, clean.part_labels, out_dir).items():
    print(f"{name:28s} {path}")
