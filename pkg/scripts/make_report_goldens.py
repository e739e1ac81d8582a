#!/usr/bin/env python3
"""Regenerate the report-layout golden fixtures.

fixtures/report_rows_example.json holds a recorded captioning evaluation
grid (two model sizes, five prompt strategies, three attacks at 8/255 plus
the clean column). The markdown goldens freeze both report layouts for that
grid so formatting changes are deliberate, reviewed diffs.
"""

from __future__ import annotations

import json
from pathlib import Path

from vlmadv.harness import ResultRow, emit_report

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

EPSILON = (8, 255)
COLUMNS = ("FGSM", "PGD", "APGD", "Clean")
STRATEGIES = ("Original", "AC", "AP", "RandomString", "RandomSentence")

# Recorded robust/clean CIDEr x100 values, column order as in COLUMNS.
GRID = {
    "vlm-7b": {
        "Original": (95.55, 22.84, 12.54, 119.02),
        "AC": (63.86, 60.01, 54.05, 64.11),
        "AP": (105.41, 101.61, 91.46, 112.78),
        "RandomString": (108.23, 105.35, 94.61, 120.90),
        "RandomSentence": (101.12, 97.11, 88.45, 108.00),
    },
    "vlm-13b": {
        "Original": (106.40, 14.60, 6.98, 123.71),
        "AC": (113.77, 106.40, 114.65, 122.10),
        "AP": (114.48, 108.83, 113.54, 125.28),
        "RandomString": (110.74, 105.15, 111.69, 120.49),
        "RandomSentence": (113.29, 106.71, 111.13, 120.72),
    },
}


def example_rows() -> list[ResultRow]:
    eps = EPSILON[0] / EPSILON[1]
    rows = []
    for model, per_strategy in GRID.items():
        for strategy in STRATEGIES:
            values = dict(zip(COLUMNS, per_strategy[strategy]))
            cells = [("None", 0.0, values["Clean"])] + [
                (tag, eps, values[tag]) for tag in COLUMNS if tag != "Clean"]
            for tag, cell_eps, value in cells:
                rows.append(ResultRow(
                    model=model, task="captioning", dataset="captions-val",
                    attack=tag, epsilon=cell_eps, strategy=strategy,
                    metric="cider", value=value, sample_count=1000,
                    failures=0, seed=0, config_hash="0" * 12,
                    timestamp="2026-01-01T00:00:00Z", version="example",
                ))
    return rows


def main() -> None:
    FIXTURES.mkdir(exist_ok=True)
    (FIXTURES / "report_rows_example.json").write_text(json.dumps({
        "task": "captioning",
        "metric": "cider",
        "dataset": "captions-val",
        "epsilon": list(EPSILON),
        "columns": list(COLUMNS),
        "strategies": list(STRATEGIES),
        "grid": GRID,
    }, indent=2) + "\n", encoding="utf-8")
    rows = example_rows()
    for layout in ("strategies", "attacks"):
        out = FIXTURES / f"golden_{layout}"
        emit_report(rows, format="markdown", out_dir=out, layout=layout)
        (out / "report.md").replace(FIXTURES / f"report_golden_{layout}.md")
        out.rmdir()
    print("wrote", FIXTURES / "report_rows_example.json")
    print("wrote", FIXTURES / "report_golden_strategies.md")
    print("wrote", FIXTURES / "report_golden_attacks.md")


if __name__ == "__main__":
    main()
