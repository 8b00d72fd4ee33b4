"""Command-line entry points: train, eval, gradcheck, export-attn, synth.

``DICO_THREADS`` caps BLAS worker threads (0 or unset means one thread,
which keeps runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as C
from .gradcheck import TOLERANCE, run_gradcheck
from .retrieval import DEFAULT_KS, evaluate, export_analytics, recall_csv_text
from .synthdata import build_splits, save_pairs
from .trainer import load_checkpoint, save_checkpoint, train, write_metrics_csv

log = logging.getLogger("dico")


def _load_config(args) -> C.Config:
    base = C.Config.toy() if args.toy else C.Config()
    cfg = C.parse_config(args.config, base) if args.config else base
    if getattr(args, "variant", None) is not None:
        cfg = C.ablation_variant(cfg, args.variant)
    return cfg


def _floats(text: str, n: int) -> tuple[float, ...]:
    vals = tuple(float(x) for x in text.split(","))
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.replace(optim={"steps": args.steps})
    seed = cfg.seeds.train if args.seed is None else args.seed
    sp = build_splits(cfg.data, cfg.model.d_raw, cfg.seeds.data)
    log.info("training %d steps on %d pairs", cfg.optim.steps, len(sp.train))
    res = train(cfg, sp.train, seed=seed, log_every=args.log_every)
    save_checkpoint(args.out, res.checkpoint())
    if args.metrics:
        write_metrics_csv(args.metrics, res.log)
    if res.log:
        print(f"step {res.step} total {res.log[-1]['total']:.6g} -> {args.out}")
    else:
        print(f"step 0 -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    model = ckpt.build_model()
    sp = build_splits(cfg.data, cfg.model.d_raw, args.data_seed)
    te = sp.test
    recalls = evaluate(model, te.image, te.ids, te.text, te.ids, weights=args.weights, ks=DEFAULT_KS)
    sys.stdout.write(recall_csv_text(recalls))
    return 0


def cmd_gradcheck(args) -> int:
    errs = run_gradcheck(seed=args.seed)
    for group, err in errs.items():
        print(f"{group},{err!r}")
    worst = max(errs.values())
    ok = worst <= TOLERANCE
    print(f"max relative error {worst:.3g} ({'ok' if ok else 'FAIL'}, tolerance {TOLERANCE:g})")
    return 0 if ok else 1


def cmd_export_attn(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    model = ckpt.build_model()
    overrides = {} if args.sigma is None else {"sigma": args.sigma}
    sp = build_splits(cfg.data, cfg.model.d_raw, args.data_seed, **overrides)
    te = sp.test.subset(slice(0, args.limit)) if args.limit else sp.test
    paths = export_analytics(model, te.image, te.part_labels, args.out, args.blocks)
    for path in paths.values():
        print(path)
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sp = build_splits(cfg.data, cfg.model.d_raw, cfg.seeds.data)
    meta = {k: str(v) for k, v in C.to_dict(cfg).items() if k.startswith(("data.", "seeds."))}
    for name, pairs in (("train", sp.train), ("gallery", sp.gallery), ("query", sp.query)):
        path = out / f"{name}.dico"
        save_pairs(path, pairs, {**meta, "split": name})
        print(f"{path} {len(pairs)} pairs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dico", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def config_args(p):
        p.add_argument("--config", help="section.key = value file (absent keys take defaults)")
        p.add_argument("--toy", action="store_true", help="start from the small desk-scale model preset")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    config_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, help="override optim.steps")
    p.add_argument("--seed", type=int, help="override seeds.train")
    p.add_argument("--variant", type=int, choices=sorted(C.ABLATION_VARIANTS),
                   help="ablation variant (0 = global alignment only, 4 = full)")
    p.add_argument("--metrics", help="write per-step losses as CSV")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@1/5/10 on the test split, as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--weights", type=lambda s: _floats(s, 3),
                   help="fusion weights global,slot,block (default: from the checkpoint config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective (64-bit)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="write slot attention, purity and prototype CSVs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--sigma", type=float, help="override the rendering noise")
    p.add_argument("--blocks", type=_ints, help="blocks for the prototype dumps, e.g. 0,1,2")
    p.add_argument("--limit", type=int, default=0, help="use only the first n test pairs")
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("synth", help="write train/gallery/query splits as tensor-record files")
    config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return ap


def thread_limit() -> int:
    raw = os.environ.get("DICO_THREADS", "").strip()
    try:
        n = int(raw) if raw else 0
    except ValueError:
        raise SystemExit(f"dico: DICO_THREADS must be an integer, got {raw!r}")
    return n if n > 0 else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    with threadpool_limits(limits=thread_limit()):
        try:
            return args.func(args)
        except Exception as exc:
            print(f"dico {args.command}: {exc}", file=sys.stderr)
            return 1


if __name__ == "__main__":
    sys.exit(main())
