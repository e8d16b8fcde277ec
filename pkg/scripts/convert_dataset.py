#!/usr/bin/env python3
"""Standalone converter from upstream dataset layouts to the canonical
manifest. Equivalent to `crowdrank convert`; kept as a script so dataset
plumbing stays out of the library core.

Examples:
    convert_dataset.py /data/shanghaitech/part_A --format mat --out partA.jsonl
    convert_dataset.py /data/jhu_crowd_v2.0 --format txt --out jhu.jsonl
"""
import argparse

from crowdrank.converters import CONVERTERS


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root")
    parser.add_argument("--format", required=True, choices=sorted(CONVERTERS))
    parser.add_argument("--out", required=True)
    args = parser.parse_args()
    n = CONVERTERS[args.format](args.root, args.out)
    print(f"converted {n} images -> {args.out}")


if __name__ == "__main__":
    main()
