#!/usr/bin/env python3
"""Regenerate fixtures/vqa_accuracy_table.json.

Enumerates the leave-one-annotator-out accuracy for a prediction that
matches exactly m of the 10 recorded answers, for m = 0..10. Each subset
drops one annotator and scores min(matches_in_subset / 3, 1); the accuracy
is the mean over the ten subsets. The enumeration runs in exact rational
arithmetic and converts to float only when writing, so the fixture is the
nearest-double image of the true value, independent of any summation order
the metric implementation might use.
"""

from __future__ import annotations

import argparse
import json
from fractions import Fraction
from pathlib import Path

ANNOTATORS = 10
DIVISOR = 3


def accuracy_for_matches(m: int) -> Fraction:
    total = Fraction(0)
    for left_out in range(ANNOTATORS):
        in_subset = m - 1 if left_out < m else m
        total += min(Fraction(in_subset, DIVISOR), Fraction(1))
    return total / ANNOTATORS


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out",
        type=Path,
        default=Path(__file__).resolve().parent.parent
        / "fixtures" / "vqa_accuracy_table.json",
    )
    args = parser.parse_args()

    table = {
        "annotators": ANNOTATORS,
        "divisor": DIVISOR,
        "accuracy_by_matches": [
            float(accuracy_for_matches(m)) for m in range(ANNOTATORS + 1)
        ],
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(table, indent=2) + "\n")
    print(f"wrote {args.out}")
    print("accuracies:", table["accuracy_by_matches"])


if __name__ == "__main__":
    main()
