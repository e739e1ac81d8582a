#!/usr/bin/env python3
"""Regenerate fixtures/apgd_checkpoints_100.json.

Derives the APGD step-halving checkpoints by the integer window recursion of
the reference Auto-PGD implementation: the first window is max(int(0.22*n), 1)
iterations, each later window shrinks by max(int(0.03*n), 1) down to a floor
of max(int(0.06*n), 1), and checkpoints are the cumulative window ends. This
is a different derivation from vlmadv.attacks.apgd_checkpoints (which takes
ceilings of the fractional recursion in exact rational arithmetic); the test
suite requires the two to agree on the frozen budget.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path


def checkpoints_by_windows(n: int) -> list[int]:
    width = max(int(0.22 * n), 1)
    decr = max(int(0.03 * n), 1)
    floor = max(int(0.06 * n), 1)
    out = [0]
    pos = 0
    while True:
        pos += width
        if pos >= n:
            break
        out.append(pos)
        width = max(width - decr, floor)
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iterations", type=int, default=100)
    parser.add_argument(
        "--out",
        type=Path,
        default=Path(__file__).resolve().parent.parent
        / "fixtures" / "apgd_checkpoints_100.json",
    )
    args = parser.parse_args()
    fixture = {
        "iterations": args.iterations,
        "checkpoints": checkpoints_by_windows(args.iterations),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(fixture, indent=2) + "\n")
    print(f"wrote {args.out}: {fixture['checkpoints']}")


if __name__ == "__main__":
    main()
