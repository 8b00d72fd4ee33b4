"""Train the toy model briefly and compare retrieval at each similarity level.

    python demos/train_and_eval.py [steps]

The acceptance run uses 2000 steps; a few hundred already moves the global
level well above chance.
"""
import sys
import time

from dico.config import Config
from dico.retrieval import evaluate
from dico.synthdata import build_splits
from dico.trainer import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = Config.toy()
sp = build_splits(cfg.data, cfg.model.d_raw, seed=0)

t0 = time.perf_counter()
res = train(cfg, sp.train, steps=steps, seed=0)
print(f"{steps} steps in {time.perf_counter() - t0:.0f}s")
for row in (res.log[0], res.log[-1]):
    print(f"step {row['step']:5d}  total {row['total']:.3f}  global {row['global']:.3f}  "
          f"slot {row['slot']:.3f}  block {row['block']:.3f}  rec {row['rec']:.4f}")

te = sp.test
print(f"chance R@1 = {1 / len(set(te.ids.tolist())):.4f}")
for name, w in [("global", (1, 0, 0)), ("slot", (0, 1, 0)), ("block", (0, 0, 1)), ("fused", (1, 1, 1))]:
    r = evaluate(res.model, te.image, te.ids, te.text, te.ids, weights=w)
    print(f"{name:6s}  R@1 {r[1]:.4f}  R@5 {r[5]:.4f}  R@10 {r[10]:.4f}")
