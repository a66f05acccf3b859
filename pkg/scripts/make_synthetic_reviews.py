#!/usr/bin/env python3
"""Write a synthetic JSON-lines review corpus for desk-scale experiments."""

import argparse
from pathlib import Path

from biconvmf import synthetic


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path, help="output .json path (one record per line)")
    parser.add_argument("--users", type=int, default=900)
    parser.add_argument("--items", type=int, default=120)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    records = synthetic.synthetic_review_corpus(args.users, args.items, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    synthetic.write_jsonl(records, args.out)
    users = {r["reviewerID"] for r in records}
    items = {r["asin"] for r in records}
    print(f"wrote {len(records)} reviews by {len(users)} users on {len(items)} items to {args.out}")


if __name__ == "__main__":
    main()
