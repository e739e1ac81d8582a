"""Prompt-formatting strategies for captioning and VQA evaluation.

Captioning strategies are fixed template strings (the Random variants default
to frozen sentences so runs reproduce; seeded generation is opt-in). VQA
strategies rewrite the question through a pluggable RewriterClient carrying a
fixed instruction paragraph; a stub client (identity), a fixture player
(recorded pairs), and a remote service client are provided, plus an
append-only JSONL cache so repeated grid runs never re-query a rewriter.

The template and instruction strings are load-bearing: robustness deltas are
attributed to their exact wording, so tests pin their SHA-256 digests against
the checked-in manifest data/prompt_hashes.json.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

from .rng import SplitMix64

log = logging.getLogger(__name__)

BASE_CAPTION_PROMPT = "Provide a short caption for this image."

CAPTION_PROMPTS = {
    "Original": BASE_CAPTION_PROMPT,
    "AC": (
        "Consider the given image being adversarially perturbed. "
        "Provide a short caption for this image."
    ),
    "AP": (
        "Given image could be adversarially perturbed. "
        "Provide a short caption for this image."
    ),
    "RandomSentence": (
        "Clouds drift quietly over the ancient, forgotten city. "
        "Provide a short caption for this image."
    ),
    "RandomString": (
        "ryFo8ZVcyNMtLgryNOg64UTjySyEb79e5aq6IJxGuz0GzWNtoz. "
        "Provide a short caption for this image."
    ),
}

VQA_INSTRUCTIONS = {
    "Rephrase": (
        "You will be given a question. Your task is to rephrase the question "
        "so that it is semantically similar to the original question and will "
        "have the same answer as the original question."
    ),
    "Expand": (
        "You will be given a short question. Your task is to generate a "
        "longer question so that it is semantically similar to the original "
        "question and will have the same answer as the original question."
    ),
    "AC": (
        "You will be given a question. However, the image associated with the "
        "question will be adversarially perturbed. Your task is to generate a "
        "longer question so that it is semantically similar to the original "
        "question and will have the same answer as the original question."
    ),
    "AP": (
        "You will be given a question. However, the image associated with the "
        "question could be adversarially perturbed. Your task is to generate "
        "a longer question so that it is semantically similar to the original "
        "question and will have the same answer as the original question."
    ),
}

CAPTION_TAGS = tuple(CAPTION_PROMPTS)
VQA_TAGS = ("Original",) + tuple(VQA_INSTRUCTIONS)

RANDOM_STRING_LENGTH = 50
_ALNUM = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
)

# Word pools for opt-in generated random sentences.
_SENT_OPENERS = ("Clouds", "Rivers", "Lanterns", "Shadows", "Winds", "Echoes")
_SENT_VERBS = ("drift", "wander", "settle", "flicker", "murmur", "linger")
_SENT_ADVERBS = ("quietly", "slowly", "gently", "softly", "strangely")
_SENT_PLACES = (
    "over the ancient, forgotten city",
    "across the silent harbor",
    "beyond the painted hills",
    "through the empty marketplace",
    "beneath the winter sky",
)


@dataclass(frozen=True)
class CaptionStrategy:
    """Captioning prompt strategy; generated=True draws fresh Random content."""

    tag: str
    generated: bool = False

    def __post_init__(self):
        if self.tag not in CAPTION_PROMPTS:
            raise ValueError(f"unknown caption strategy {self.tag!r}")


@dataclass(frozen=True)
class VqaStrategy:
    """VQA question strategy; Original passes the question through."""

    tag: str

    def __post_init__(self):
        if self.tag not in VQA_TAGS:
            raise ValueError(f"unknown vqa strategy {self.tag!r}")


def random_alnum(seed: int, length: int = RANDOM_STRING_LENGTH) -> str:
    stream = SplitMix64(seed)
    return "".join(_ALNUM[stream.below(len(_ALNUM))] for _ in range(length))


def random_sentence(seed: int) -> str:
    stream = SplitMix64(seed)
    return (
        f"{stream.choice(_SENT_OPENERS)} {stream.choice(_SENT_VERBS)} "
        f"{stream.choice(_SENT_ADVERBS)} {stream.choice(_SENT_PLACES)}."
    )


def apply_caption_strategy(strategy: CaptionStrategy, rng_seed: int = 0) -> str:
    """The full captioning prompt for a strategy.

    Fixed template by default; with strategy.generated, the Random variants
    derive their prefix from rng_seed instead.
    """
    if not strategy.generated:
        return CAPTION_PROMPTS[strategy.tag]
    if strategy.tag == "RandomString":
        return f"{random_alnum(rng_seed)}. {BASE_CAPTION_PROMPT}"
    if strategy.tag == "RandomSentence":
        return f"{random_sentence(rng_seed)} {BASE_CAPTION_PROMPT}"
    return CAPTION_PROMPTS[strategy.tag]


def build_vqa_instruction(strategy: VqaStrategy) -> str:
    if strategy.tag == "Original":
        raise ValueError("the Original strategy has no rewriter instruction")
    return VQA_INSTRUCTIONS[strategy.tag]


class RewriterClient:
    """Behavioral contract: (strategy tag, instruction, question) -> text."""

    name = "rewriter"

    def rewrite(self, strategy_tag: str, instruction: str, question: str) -> str:
        raise NotImplementedError


class StubRewriter(RewriterClient):
    """Identity rewriter: keeps evaluation runnable with no external service."""

    name = "stub"

    def rewrite(self, strategy_tag: str, instruction: str, question: str) -> str:
        return question


class FixtureRewriter(RewriterClient):
    """Plays back recorded (strategy, question) -> rewritten pairs."""

    name = "fixture"

    def __init__(self, pairs: dict[tuple[str, str], str]):
        self._pairs = dict(pairs)

    @classmethod
    def from_jsonl(cls, path) -> "FixtureRewriter":
        pairs = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            pairs[(rec["strategy"], rec["question"])] = rec["rewritten"]
        return cls(pairs)

    def rewrite(self, strategy_tag: str, instruction: str, question: str) -> str:
        try:
            return self._pairs[(strategy_tag, question)]
        except KeyError:
            raise LookupError(
                f"no recorded rewrite for strategy {strategy_tag!r} and this "
                "question"
            ) from None


class RewriteCache:
    """Append-only JSONL store of rewrites keyed by (strategy, question)."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._pairs: dict[tuple[str, str], str] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                self._pairs[(rec["strategy"], rec["question"])] = rec["rewritten"]

    def get(self, strategy_tag: str, question: str) -> str | None:
        with self._lock:
            return self._pairs.get((strategy_tag, question))

    def put(self, strategy_tag: str, question: str, rewritten: str,
            source: str) -> None:
        rec = {
            "strategy": strategy_tag,
            "question": question,
            "rewritten": rewritten,
            "source": source,
        }
        with self._lock:
            if (strategy_tag, question) in self._pairs:
                return
            self._pairs[(strategy_tag, question)] = rewritten
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
                f.flush()


def rewrite_question(client: RewriterClient, strategy: VqaStrategy,
                     question: str, cache: RewriteCache | None = None,
                     fallback: bool = True) -> str:
    """Strategy-rewritten question; Original passes through untouched.

    Client failures and empty client outputs fall back to the original
    question with a logged warning when fallback is enabled, and raise
    otherwise.
    """
    if not question:
        raise ValueError("question must be non-empty")
    if strategy.tag == "Original":
        return question
    if cache is not None:
        hit = cache.get(strategy.tag, question)
        if hit is not None:
            return hit
    instruction = build_vqa_instruction(strategy)
    try:
        out = client.rewrite(strategy.tag, instruction, question)
        if not out:
            raise ValueError("rewriter returned empty output")
    except Exception as exc:
        if not fallback:
            raise
        log.warning(
            "rewriter %s failed for strategy %s (%s); keeping the original "
            "question", client.name, strategy.tag, exc,
        )
        return question
    if cache is not None:
        cache.put(strategy.tag, question, out, client.name)
    return out


def prompt_digests() -> dict[str, str]:
    """SHA-256 hex digests of every template, keyed caption:TAG / vqa:TAG."""
    out = {}
    for tag, text in CAPTION_PROMPTS.items():
        out[f"caption:{tag}"] = hashlib.sha256(text.encode("utf-8")).hexdigest()
    for tag, text in VQA_INSTRUCTIONS.items():
        out[f"vqa:{tag}"] = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return out


GOLDEN_HASH_PATH = Path(__file__).resolve().parent / "data" / "prompt_hashes.json"


def verify_prompt_hashes(manifest_path=GOLDEN_HASH_PATH) -> None:
    """Raise if any template drifted from the checked-in golden digests."""
    golden = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    current = prompt_digests()
    if golden != current:
        diff = sorted(
            k for k in set(golden) | set(current)
            if golden.get(k) != current.get(k)
        )
        raise RuntimeError(f"prompt templates drifted from manifest: {diff}")
