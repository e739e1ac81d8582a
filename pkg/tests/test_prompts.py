"""Prompt strategies, rewriter clients, cache, and template pinning."""
from __future__ import annotations

import hashlib
import json

import pytest
from hypothesis import given, settings, strategies as st

from vlmadv.prompts import (
    BASE_CAPTION_PROMPT,
    CAPTION_PROMPTS,
    CAPTION_TAGS,
    GOLDEN_HASH_PATH,
    RANDOM_STRING_LENGTH,
    VQA_INSTRUCTIONS,
    VQA_TAGS,
    CaptionStrategy,
    FixtureRewriter,
    RewriteCache,
    StubRewriter,
    VqaStrategy,
    apply_caption_strategy,
    build_vqa_instruction,
    prompt_digests,
    random_alnum,
    random_sentence,
    rewrite_question,
    verify_prompt_hashes,
)


class TestTemplates:
    def test_tag_inventories(self):
        assert set(CAPTION_TAGS) == {
            "Original", "AC", "AP", "RandomSentence", "RandomString"}
        assert set(VQA_TAGS) == {"Original", "Rephrase", "Expand", "AC", "AP"}

    def test_every_caption_prompt_ends_with_base(self):
        for text in CAPTION_PROMPTS.values():
            assert text.endswith(BASE_CAPTION_PROMPT)

    def test_golden_digests_match_checked_in_manifest(self):
        golden = json.loads(GOLDEN_HASH_PATH.read_text(encoding="utf-8"))
        assert prompt_digests() == golden
        verify_prompt_hashes()  # must not raise

    def test_digest_function_is_sha256_of_utf8(self):
        d = prompt_digests()
        expect = hashlib.sha256(
            CAPTION_PROMPTS["Original"].encode("utf-8")).hexdigest()
        assert d["caption:Original"] == expect

    def test_drift_detection_raises(self, tmp_path):
        manifest = dict(prompt_digests())
        manifest["caption:Original"] = "0" * 64
        path = tmp_path / "hashes.json"
        path.write_text(json.dumps(manifest), encoding="utf-8")
        with pytest.raises(RuntimeError, match="caption:Original"):
            verify_prompt_hashes(path)


class TestStrategyObjects:
    def test_unknown_tags_rejected(self):
        with pytest.raises(ValueError):
            CaptionStrategy("Adversarial")
        with pytest.raises(ValueError):
            VqaStrategy("Rewrite")

    def test_fixed_templates_returned_verbatim(self):
        for tag in CAPTION_TAGS:
            assert apply_caption_strategy(CaptionStrategy(tag)) == \
                CAPTION_PROMPTS[tag]

    def test_generated_random_string_prompt(self):
        s = CaptionStrategy("RandomString", generated=True)
        out = apply_caption_strategy(s, rng_seed=5)
        prefix, _, rest = out.partition(". ")
        assert rest == BASE_CAPTION_PROMPT
        assert len(prefix) == RANDOM_STRING_LENGTH
        assert prefix.isalnum()
        assert out == apply_caption_strategy(s, rng_seed=5)
        assert out != apply_caption_strategy(s, rng_seed=6)

    def test_generated_random_sentence_prompt(self):
        s = CaptionStrategy("RandomSentence", generated=True)
        out = apply_caption_strategy(s, rng_seed=11)
        assert out.endswith(BASE_CAPTION_PROMPT)
        assert out == apply_caption_strategy(s, rng_seed=11)

    def test_generated_flag_ignored_for_fixed_tags(self):
        s = CaptionStrategy("AC", generated=True)
        assert apply_caption_strategy(s, rng_seed=3) == CAPTION_PROMPTS["AC"]

    def test_original_has_no_instruction(self):
        with pytest.raises(ValueError):
            build_vqa_instruction(VqaStrategy("Original"))
        assert build_vqa_instruction(VqaStrategy("AP")) == \
            VQA_INSTRUCTIONS["AP"]


class TestRandomText:
    @given(seed=st.integers(0, 2**62))
    @settings(max_examples=100)
    def test_alnum_charset_and_determinism(self, seed):
        s = random_alnum(seed)
        assert len(s) == RANDOM_STRING_LENGTH
        assert s.isalnum()
        assert s == random_alnum(seed)

    def test_alnum_length_override(self):
        assert len(random_alnum(0, length=8)) == 8

    @given(seed=st.integers(0, 2**62))
    @settings(max_examples=100)
    def test_sentence_shape(self, seed):
        s = random_sentence(seed)
        assert s[0].isupper()
        assert s.endswith(".")
        assert s == random_sentence(seed)

    def test_seed_variation(self):
        outs = {random_alnum(seed) for seed in range(20)}
        assert len(outs) == 20


class _ExplodingRewriter(StubRewriter):
    name = "exploding"

    def rewrite(self, strategy_tag, instruction, question):
        raise ConnectionError("service down")


class _EmptyRewriter(StubRewriter):
    name = "empty"

    def rewrite(self, strategy_tag, instruction, question):
        return ""


class _RecordingRewriter(StubRewriter):
    name = "recording"

    def __init__(self):
        self.calls = []

    def rewrite(self, strategy_tag, instruction, question):
        self.calls.append((strategy_tag, instruction, question))
        return f"[{strategy_tag}] {question}"


class TestRewriteQuestion:
    Q = "What color is the bus?"

    def test_original_passes_through_without_client_call(self):
        client = _ExplodingRewriter()
        assert rewrite_question(client, VqaStrategy("Original"), self.Q) == \
            self.Q

    def test_client_receives_strategy_instruction(self):
        client = _RecordingRewriter()
        out = rewrite_question(client, VqaStrategy("Expand"), self.Q)
        assert out == f"[Expand] {self.Q}"
        assert client.calls == [
            ("Expand", VQA_INSTRUCTIONS["Expand"], self.Q)]

    def test_failure_falls_back_to_original(self):
        out = rewrite_question(_ExplodingRewriter(), VqaStrategy("AC"),
                               self.Q)
        assert out == self.Q

    def test_empty_output_falls_back_to_original(self):
        assert rewrite_question(_EmptyRewriter(), VqaStrategy("AC"),
                                self.Q) == self.Q

    def test_failure_raises_without_fallback(self):
        with pytest.raises(ConnectionError):
            rewrite_question(_ExplodingRewriter(), VqaStrategy("AC"),
                             self.Q, fallback=False)

    def test_empty_question_rejected(self):
        with pytest.raises(ValueError):
            rewrite_question(StubRewriter(), VqaStrategy("Original"), "")

    def test_cache_hit_skips_client(self, tmp_path):
        cache = RewriteCache(tmp_path / "cache.jsonl")
        cache.put("AC", self.Q, "cached text", "test")
        out = rewrite_question(_ExplodingRewriter(), VqaStrategy("AC"),
                               self.Q, cache=cache)
        assert out == "cached text"

    def test_cache_filled_on_miss(self, tmp_path):
        cache = RewriteCache(tmp_path / "cache.jsonl")
        client = _RecordingRewriter()
        first = rewrite_question(client, VqaStrategy("Rephrase"), self.Q,
                                 cache=cache)
        second = rewrite_question(client, VqaStrategy("Rephrase"), self.Q,
                                  cache=cache)
        assert first == second
        assert len(client.calls) == 1

    def test_fallback_result_not_cached(self, tmp_path):
        cache = RewriteCache(tmp_path / "cache.jsonl")
        rewrite_question(_ExplodingRewriter(), VqaStrategy("AC"), self.Q,
                         cache=cache)
        assert cache.get("AC", self.Q) is None


class TestRewriteCache:
    def test_round_trips_through_file(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache = RewriteCache(path)
        cache.put("AC", "q1?", "longer q1?", "stub")
        cache.put("AP", "q1?", "other q1?", "stub")
        reloaded = RewriteCache(path)
        assert reloaded.get("AC", "q1?") == "longer q1?"
        assert reloaded.get("AP", "q1?") == "other q1?"
        assert reloaded.get("AC", "q2?") is None

    def test_first_write_wins(self, tmp_path):
        cache = RewriteCache(tmp_path / "cache.jsonl")
        cache.put("AC", "q?", "first", "a")
        cache.put("AC", "q?", "second", "b")
        assert cache.get("AC", "q?") == "first"
        lines = (tmp_path / "cache.jsonl").read_text().splitlines()
        assert len(lines) == 1

    def test_records_source_field(self, tmp_path):
        cache = RewriteCache(tmp_path / "cache.jsonl")
        cache.put("AC", "q?", "text", "oracle")
        rec = json.loads((tmp_path / "cache.jsonl").read_text())
        assert rec == {"strategy": "AC", "question": "q?",
                       "rewritten": "text", "source": "oracle"}


class TestFixtureRewriter:
    def test_plays_back_recorded_pairs(self, tmp_path):
        path = tmp_path / "fixture.jsonl"
        path.write_text(json.dumps({
            "strategy": "Expand", "question": "Why?",
            "rewritten": "For what underlying reason?",
        }) + "\n", encoding="utf-8")
        client = FixtureRewriter.from_jsonl(path)
        assert client.rewrite("Expand", "", "Why?") == \
            "For what underlying reason?"

    def test_missing_pair_raises_lookup_error(self):
        client = FixtureRewriter({})
        with pytest.raises(LookupError):
            client.rewrite("Expand", "", "Why?")

    def test_missing_pair_falls_back_in_pipeline(self):
        out = rewrite_question(FixtureRewriter({}), VqaStrategy("Expand"),
                               "Why?")
        assert out == "Why?"
