"""Memorize one synthetic sample and report its loss and metrics."""

import argparse

from vagnet.experiments import OVERFIT_LR, overfit_sanity


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--category", default="mug")
    p.add_argument("--affordance", default="grasp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=OVERFIT_LR)
    args = p.parse_args()
    res = overfit_sanity(args.category, args.affordance, args.seed, args.steps, args.lr)
    print(f"steps={args.steps} loss={res.final_loss:.5f} seconds={res.seconds:.1f}")
    print(" ".join(f"{k}={v:.4f}" if v is not None else f"{k}=undefined" for k, v in res.metrics.items()))


if __name__ == "__main__":
    main()
