#!/usr/bin/env python3
"""Regenerate src/vlmadv/data/prompt_hashes.json.

Freezes SHA-256 digests of every caption template and VQA rewrite
instruction. The digests guard the strings against accidental edits: the
robustness comparisons attribute effects to exact wording, so any change must
be deliberate and re-frozen by rerunning this script.
"""

from __future__ import annotations

import json

from vlmadv.prompts import GOLDEN_HASH_PATH, prompt_digests


def main() -> None:
    digests = prompt_digests()
    GOLDEN_HASH_PATH.write_text(
        json.dumps(digests, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {GOLDEN_HASH_PATH} ({len(digests)} digests)")


if __name__ == "__main__":
    main()
