#!/usr/bin/env python3
"""Generate planted synthetic datasets for demos and offline smoke runs.

Writes an evaluation fixture (tile-coded images with matching head points)
and a training fixture (pyramid-coded images) under the output directory,
each with its own manifest.
"""
import argparse
from pathlib import Path

from crowdrank.synthetic import make_eval_fixture, make_train_fixture


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--eval-images", type=int, default=20)
    parser.add_argument("--train-images", type=int, default=16)
    parser.add_argument("--p", type=int, default=3)
    parser.add_argument("--m", type=int, default=6)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--inconsistent-train", action="store_true",
                        help="shuffle the planted per-ring counts")
    args = parser.parse_args()

    eval_manifest = make_eval_fixture(
        args.out_dir / "eval", n_images=args.eval_images, p=args.p, seed=args.seed)
    train_manifest = make_train_fixture(
        args.out_dir / "train", n_images=args.train_images, m=args.m,
        seed=args.seed, consistent=not args.inconsistent_train)
    print(f"eval manifest:  {eval_manifest}")
    print(f"train manifest: {train_manifest}")


if __name__ == "__main__":
    main()
