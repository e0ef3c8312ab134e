"""Command-line entry point: gen-data, train, eval, gradcheck, export.

Failures exit nonzero after printing one line to stderr:
``error: <ExceptionType>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import SplitSpec, load_split, make_splits, read_manifest, read_sample
from .harness import TrainConfig, export_heatmap, load_checkpoint, train
from .metrics import evaluate_split

SPLIT_NAMES = {"seen": "seen-eval", "unseen": "unseen-eval", "train": "seen-train"}


def cmd_gen_data(args) -> int:
    entries, _ = make_splits(SplitSpec.default(args.seed), args.n_per_pair, out_dir=args.out)
    print(f"wrote {len(entries)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr0=args.lr, weight_decay=args.wd,
                      seed=args.seed, use_mcam=not (args.no_mcam or args.no_proj),
                      use_stfm=not args.no_stfm, use_proj=not args.no_proj,
                      img_mode=args.img_mode, img_frame=args.img_frame)
    train_set = load_split(args.data, "seen-train")
    eval_set = load_split(args.data, "seen-eval")
    result = train(cfg, train_set, eval_set, out=args.out)
    last = result.history[-1]
    print(f"epochs={len(result.history)} loss={last.loss!r} checkpoint={args.out}")
    if last.eval is not None:
        sys.stdout.write(last.eval.report())
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    res = evaluate_split(ck.model.eval(), load_split(args.data, SPLIT_NAMES[args.split]))
    sys.stdout.write(res.csv_header() + "\n" + res.csv_row() + "\n" if args.csv else res.report())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import MODULES, run_suite

    if args.module is not None and args.module not in MODULES:
        raise ValueError(f"unknown module {args.module!r}; choose from {', '.join(MODULES)}")
    worst = 0.0
    failed = 0
    for row in run_suite(args.module, seed=args.seed):
        status = "ok" if row.passed else "FAIL"
        failed += not row.passed
        worst = max(worst, row.error)
        print(f"{status} {row.module}.{row.name} rel_err={row.error:.3e} tol={row.tol:g}")
    print(f"worst={worst:.3e} failed={failed}")
    return 1 if failed else 0


def cmd_export(args) -> int:
    ck = load_checkpoint(args.ckpt)
    for entry in read_manifest(args.data):
        if entry.id == args.sample:
            path = export_heatmap(ck.model.eval(), read_sample(args.data, entry), args.out)
            print(f"wrote {path}")
            return 0
    raise KeyError(f"sample {args.sample!r} not in manifest {args.data}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vagnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic dataset and manifest")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-per-pair", type=int, default=20)
    g.set_defaults(fn=cmd_gen_data)

    d = TrainConfig()
    t = sub.add_parser("train", help="train on seen-train, log seen-eval metrics")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--no-mcam", action="store_true")
    t.add_argument("--no-stfm", action="store_true")
    t.add_argument("--no-proj", action="store_true", help="drop the whole 2D branch (implies --no-mcam)")
    t.add_argument("--img-mode", action="store_true", help="replicate one frame instead of the video")
    t.add_argument("--img-frame", type=int, default=d.img_frame)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--batch", type=int, default=d.batch_size)
    t.add_argument("--lr", type=float, default=d.lr0)
    t.add_argument("--wd", type=float, default=d.weight_decay)
    t.add_argument("--seed", type=int, default=d.seed)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metrics report for a checkpoint")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", choices=sorted(SPLIT_NAMES), default="seen")
    e.add_argument("--csv", action="store_true", help="header + one comma-separated row")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--module", default=None)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    x = sub.add_parser("export", help="write x,y,z,score for one sample")
    x.add_argument("--ckpt", required=True, type=Path)
    x.add_argument("--data", required=True, type=Path)
    x.add_argument("--sample", required=True)
    x.add_argument("--out", required=True, type=Path)
    x.set_defaults(fn=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - one-line error contract
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
