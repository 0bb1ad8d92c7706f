#!/usr/bin/env python3
"""Render a digit corpus and write it as standard IDX files.

Example:
    python3 scripts/make_digits.py --out data/digits --train 10000 --test 2000 --seed 101
"""

import argparse

from bsf.datasets import write_digit_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--train", type=int, default=10_000)
    parser.add_argument("--test", type=int, default=2_000)
    parser.add_argument("--seed", type=int, default=101)
    args = parser.parse_args()
    paths = write_digit_corpus(args.out, args.train, args.test, seed=args.seed)
    for name, path in paths.items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
