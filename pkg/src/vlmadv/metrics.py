"""Evaluation metrics: VQA accuracy and CIDEr-D caption scoring.

VQA accuracy follows the official evaluation convention for 10-annotation
datasets: the prediction is normalized (lowercase, punctuation stripped with
intra-word apostrophes kept, contractions expanded, number words zero..ten
mapped to digits, articles dropped, whitespace collapsed) and scored as the
mean over the 10 leave-one-out annotator subsets of min(matches/3, 1). The
normalization tables are frozen in data/vqa_normalization.txt.

CIDEr-D: per n-gram order 1..4, candidate and reference sentences become
tf-idf vectors with weight count * (ln N - ln max(1, df)), where df counts
the corpus images whose references contain the n-gram; similarity per
reference is the clipped dot product sum(min(h, r) * r) over the norm
product, damped by the Gaussian length penalty exp(-(lc - lr)^2 / (2 * 6^2));
the score is 10 times the mean over orders of the mean over references.
Tokenization everywhere is lowercase, punctuation replaced by spaces,
whitespace split. One deliberate difference from the official VQA evaluation:
numeric comma groupings like "1,000" are split into separate tokens here.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

NUM_ANNOTATORS = 10
MATCH_DENOMINATOR = 3.0
MAX_NGRAM = 4
LENGTH_PENALTY_SIGMA = 6.0

_DATA_PATH = Path(__file__).resolve().parent / "data" / "vqa_normalization.txt"

_KEEP_APOSTROPHE = re.compile(r"[^a-z0-9'\s]")
_STRIP_ALL = re.compile(r"[^a-z0-9\s]")


def _load_tables(path: Path = _DATA_PATH):
    contractions: dict[str, tuple[str, ...]] = {}
    numbers: dict[str, str] = {}
    articles: set[str] = set()
    section = None
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section == "articles":
            articles.add(line)
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed table line {raw!r}")
        key, value = key.strip(), value.strip()
        if section == "contractions":
            contractions[key] = tuple(value.split())
        elif section == "numbers":
            numbers[key] = value
        else:
            raise ValueError(f"table line outside a known section: {raw!r}")
    return contractions, numbers, articles


_CONTRACTIONS, _NUMBERS, _ARTICLES = _load_tables()


def normalize_answer(raw: str) -> str:
    """Normalized answer string; total function, '' stays ''."""
    text = _KEEP_APOSTROPHE.sub(" ", raw.lower())
    out: list[str] = []
    for token in text.split():
        token = token.strip("'")
        if not token:
            continue
        expanded = _CONTRACTIONS.get(token, (token,))
        for word in expanded:
            word = _NUMBERS.get(word, word)
            if word in _ARTICLES:
                continue
            out.append(word)
    return " ".join(out)


@dataclass(frozen=True)
class AnnotationSet:
    """One question's human answers, exactly 10 per the dataset convention."""

    question_id: str
    answers: tuple[str, ...]

    def __post_init__(self):
        answers = tuple(str(a) for a in self.answers)
        if len(answers) != NUM_ANNOTATORS:
            raise ValueError(
                f"expected {NUM_ANNOTATORS} answers, got {len(answers)}"
            )
        object.__setattr__(self, "answers", answers)


def vqa_accuracy(prediction: str, annotations: AnnotationSet) -> float:
    """Mean over leave-one-out annotator subsets of min(matches/3, 1)."""
    pred = normalize_answer(prediction)
    normalized = [normalize_answer(a) for a in annotations.answers]
    total = 0.0
    for leave_out in range(NUM_ANNOTATORS):
        matches = sum(
            1 for i, ans in enumerate(normalized)
            if i != leave_out and ans == pred
        )
        total += min(matches / MATCH_DENOMINATOR, 1.0)
    return total / NUM_ANNOTATORS


def tokenize_caption(text: str) -> list[str]:
    """Lowercase, punctuation to spaces, whitespace split."""
    return _STRIP_ALL.sub(" ", text.lower()).split()


def _ngram_counts(tokens: Sequence[str]) -> dict[int, Counter]:
    out = {}
    for n in range(1, MAX_NGRAM + 1):
        out[n] = Counter(
            tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)
        )
    return out


@dataclass(frozen=True)
class CaptionCorpus:
    """Corpus-level n-gram document frequencies for CIDEr idf weights."""

    num_images: int
    doc_freq: tuple[Mapping[tuple[str, ...], int], ...]  # index 0 -> n=1

    def df(self, n: int, ngram: tuple[str, ...]) -> int:
        return self.doc_freq[n - 1].get(ngram, 0)


def compute_document_frequencies(
    references: Sequence[Sequence[str]],
) -> CaptionCorpus:
    """Count, per n-gram order, the images whose references contain it."""
    if not references:
        raise ValueError("caption corpus needs at least one image")
    freq: list[Counter] = [Counter() for _ in range(MAX_NGRAM)]
    for refs in references:
        refs = list(refs)
        if not refs:
            raise ValueError("every image needs at least one reference")
        seen: list[set] = [set() for _ in range(MAX_NGRAM)]
        for ref in refs:
            counts = _ngram_counts(tokenize_caption(ref))
            for n in range(1, MAX_NGRAM + 1):
                seen[n - 1].update(counts[n].keys())
        for n in range(1, MAX_NGRAM + 1):
            for ngram in seen[n - 1]:
                freq[n - 1][ngram] += 1
    return CaptionCorpus(
        num_images=len(references),
        doc_freq=tuple(dict(f) for f in freq),
    )


def _tfidf_vector(counts: Counter, n: int, corpus: CaptionCorpus):
    log_n = math.log(corpus.num_images)
    vec = {}
    norm_sq = 0.0
    for ngram, cnt in counts.items():
        weight = cnt * (log_n - math.log(max(1.0, corpus.df(n, ngram))))
        vec[ngram] = weight
        norm_sq += weight * weight
    return vec, math.sqrt(norm_sq)


def cider_score(candidate: str, references: Sequence[str],
                corpus: CaptionCorpus) -> float:
    """CIDEr-D score of one candidate against one image's references."""
    refs = list(references)
    if not refs:
        raise ValueError("reference list must be non-empty")
    cand_tokens = tokenize_caption(candidate)
    cand_counts = _ngram_counts(cand_tokens)
    per_order = [0.0] * MAX_NGRAM
    for ref in refs:
        ref_tokens = tokenize_caption(ref)
        ref_counts = _ngram_counts(ref_tokens)
        delta = float(len(cand_tokens) - len(ref_tokens))
        penalty = math.exp(
            -(delta * delta) / (2.0 * LENGTH_PENALTY_SIGMA ** 2)
        )
        for n in range(1, MAX_NGRAM + 1):
            hyp_vec, hyp_norm = _tfidf_vector(cand_counts[n], n, corpus)
            ref_vec, ref_norm = _tfidf_vector(ref_counts[n], n, corpus)
            if hyp_norm == 0.0 or ref_norm == 0.0:
                continue
            dot = sum(
                min(w, ref_vec[g]) * ref_vec[g]
                for g, w in hyp_vec.items() if g in ref_vec
            )
            per_order[n - 1] += penalty * dot / (hyp_norm * ref_norm)
    return 10.0 * sum(v / len(refs) for v in per_order) / MAX_NGRAM


def aggregate(values: Iterable[float]) -> float:
    """Arithmetic mean; reporting layers scale by 100 per convention."""
    values = list(values)
    if not values:
        raise ValueError("cannot aggregate zero values")
    return sum(float(v) for v in values) / len(values)
