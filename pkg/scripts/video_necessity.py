"""Full model vs img mode (one pre-contact frame) on the mirror-symmetric category."""

import argparse
import logging

from vagnet.experiments import DESK_LR, SYMMETRIC_CATEGORY, video_necessity


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--n-per-pair", type=int, default=20)
    p.add_argument("--img-frame", type=int, default=0)
    p.add_argument("--category", default=SYMMETRIC_CATEGORY)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    bench = video_necessity(args.seed, args.epochs, args.lr, args.n_per_pair, args.img_frame, args.category)
    print(bench.table())
    margin = bench.rows["full"].seen.aiou - bench.rows["img_mode"].seen.aiou
    print(f"full - img_mode aIoU: {margin:+.2f}")


if __name__ == "__main__":
    main()
