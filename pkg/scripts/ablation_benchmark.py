"""Train the four ablation rows on the default split and print the metric table."""

import argparse
import logging

from vagnet.experiments import ABLATION_ROWS, DESK_LR, ablation_benchmark, wins


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--n-per-pair", type=int, default=20)
    p.add_argument("--rows", default=",".join(ABLATION_ROWS), help="comma-separated subset")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    bench = ablation_benchmark(args.seed, args.epochs, args.lr, args.n_per_pair, tuple(args.rows.split(",")))
    print(bench.table())
    if "full" in bench.rows:
        full = bench.rows["full"].seen
        for name, row in bench.rows.items():
            if name != "full":
                print(f"full vs {name}: aIoU {full.aiou - row.seen.aiou:+.2f}, wins {wins(full, row.seen)}/4")


if __name__ == "__main__":
    main()
