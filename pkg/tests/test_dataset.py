"""Dataset records, JSONL IO, image codecs, subsetting, and converters."""
from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlmadv.core import ImageTensor
from vlmadv.dataset import (
    Dataset,
    DatasetError,
    DatasetRecord,
    convert_coco_captions,
    convert_vqa,
    load_dataset,
    load_image,
    sample_subset,
    save_dataset,
    save_ppm,
)
from vlmadv.rng import SplitMix64
from vlmadv.toys import save_weights_file


def caption_record(rid="c1", refs=("img.ppm",)):
    return DatasetRecord(id=rid, task="captioning", image_refs=refs,
                         references=("a cat", "the cat sits"))


def vqa_record(rid="v1", refs=("img.ppm",)):
    return DatasetRecord(id=rid, task="vqa", image_refs=refs,
                         question="What?", answers=("yes",) * 10)


class TestDatasetRecord:
    def test_unknown_task_rejected(self):
        with pytest.raises(DatasetError):
            DatasetRecord(id="x", task="detection", image_refs=("a.ppm",))

    def test_needs_an_image(self):
        with pytest.raises(DatasetError):
            DatasetRecord(id="x", task="captioning", image_refs=(),
                          references=("r",))

    def test_vqa_needs_question_and_ten_answers(self):
        with pytest.raises(DatasetError):
            DatasetRecord(id="x", task="vqa", image_refs=("a.ppm",),
                          answers=("yes",) * 10)
        with pytest.raises(DatasetError):
            DatasetRecord(id="x", task="vqa", image_refs=("a.ppm",),
                          question="q?", answers=("yes",) * 9)

    def test_captioning_needs_references(self):
        with pytest.raises(DatasetError):
            DatasetRecord(id="x", task="captioning", image_refs=("a.ppm",))

    def test_cross_task_fields_rejected(self):
        with pytest.raises(DatasetError):
            DatasetRecord(id="x", task="vqa", image_refs=("a.ppm",),
                          question="q?", answers=("y",) * 10,
                          references=("r",))
        with pytest.raises(DatasetError):
            DatasetRecord(id="x", task="captioning", image_refs=("a.ppm",),
                          references=("r",), question="q?")

    def test_json_round_trip(self):
        for rec in (caption_record(), vqa_record()):
            assert DatasetRecord.from_json(rec.to_json()) == rec

    def test_unknown_json_fields_rejected(self):
        obj = caption_record().to_json()
        obj["bonus"] = 1
        with pytest.raises(DatasetError, match="bonus"):
            DatasetRecord.from_json(obj)

    def test_missing_json_fields_named(self):
        with pytest.raises(DatasetError, match="task"):
            DatasetRecord.from_json({"id": "x", "image_refs": ["a.ppm"]})


class TestDatasetContainer:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(DatasetError, match="duplicate"):
            Dataset(records=(caption_record("a"), caption_record("a")))

    def test_resolve_relative_and_absolute(self, tmp_path):
        ds = Dataset(records=(caption_record(),), base_dir=tmp_path)
        assert ds.resolve("img.ppm") == tmp_path / "img.ppm"
        assert ds.resolve("/etc/img.ppm") == __import__("pathlib").Path(
            "/etc/img.ppm")


class TestJsonlIO:
    def _write(self, tmp_path, lines):
        path = tmp_path / "data.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_round_trip(self, tmp_path):
        img = tmp_path / "img.ppm"
        save_ppm(ImageTensor(np.zeros((3, 2, 2))), img)
        ds = Dataset(records=(caption_record(), vqa_record()),
                     base_dir=tmp_path)
        out = tmp_path / "ds.jsonl"
        save_dataset(ds, out)
        back = load_dataset(out)
        assert back.records == ds.records
        assert back.base_dir == tmp_path

    def test_blank_lines_skipped(self, tmp_path):
        img = tmp_path / "img.ppm"
        save_ppm(ImageTensor(np.zeros((3, 2, 2))), img)
        path = self._write(tmp_path, [
            json.dumps(caption_record().to_json()), "", "   ",
            json.dumps(vqa_record().to_json()),
        ])
        assert len(load_dataset(path)) == 2

    def test_malformed_json_names_line(self, tmp_path):
        path = self._write(tmp_path, [
            json.dumps(caption_record().to_json()), "{not json",
        ])
        with pytest.raises(DatasetError, match=r":2:"):
            load_dataset(path, check_images=False)

    def test_invalid_record_names_line(self, tmp_path):
        bad = caption_record().to_json()
        bad["task"] = "mystery"
        path = self._write(tmp_path, [json.dumps(bad)])
        with pytest.raises(DatasetError, match=r":1:"):
            load_dataset(path, check_images=False)

    def test_missing_image_caught(self, tmp_path):
        path = self._write(tmp_path, [json.dumps(caption_record().to_json())])
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(path)
        assert len(load_dataset(path, check_images=False)) == 1

    def test_provenance_recorded(self, tmp_path):
        path = self._write(tmp_path, [json.dumps(caption_record().to_json())])
        ds = load_dataset(path, check_images=False)
        assert ds.provenance["record_count"] == 1
        assert ds.provenance["source"] == str(path)


class TestSubsetting:
    def _dataset(self, n=20):
        return Dataset(records=tuple(
            caption_record(f"r{i:03d}") for i in range(n)))

    def test_deterministic_across_calls(self):
        ds = self._dataset()
        a = sample_subset(ds, 7, seed=3)
        b = sample_subset(ds, 7, seed=3)
        assert [r.id for r in a.records] == [r.id for r in b.records]

    def test_matches_generator_draw_order(self):
        ds = self._dataset()
        idx = SplitMix64(11).sample_indices(len(ds.records), 5)
        got = [r.id for r in sample_subset(ds, 5, seed=11).records]
        assert got == [ds.records[i].id for i in idx]

    def test_no_replacement_and_size(self):
        ds = self._dataset()
        sub = sample_subset(ds, 12, seed=0)
        ids = [r.id for r in sub.records]
        assert len(ids) == 12 and len(set(ids)) == 12

    def test_oversized_request_clamps(self):
        ds = self._dataset(4)
        sub = sample_subset(ds, 100, seed=1)
        assert len(sub) == 4
        assert sorted(r.id for r in sub.records) == \
            sorted(r.id for r in ds.records)

    def test_provenance_updated(self):
        sub = sample_subset(self._dataset(), 3, seed=9)
        assert sub.provenance["subset_seed"] == 9
        assert sub.provenance["subset_size"] == 3

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            sample_subset(self._dataset(), 0, seed=1)

    @given(seed=st.integers(0, 2**32), n=st.integers(1, 25))
    @settings(max_examples=60)
    def test_subset_is_valid_dataset(self, seed, n):
        ds = self._dataset(15)
        sub = sample_subset(ds, n, seed=seed)
        assert len(sub) == min(n, 15)  # also re-validates unique ids


class TestPpmCodec:
    def test_quantized_values_round_trip_exactly(self, tmp_path):
        arr = np.round(np.linspace(0, 1, 27) * 255) / 255.0
        img = ImageTensor(arr.reshape(3, 3, 3))
        path = tmp_path / "img.ppm"
        save_ppm(img, path)
        assert load_image(path).bitwise_equal(img)

    @given(seed=st.integers(0, 2**32))
    @settings(max_examples=40)
    def test_round_trip_error_bounded_by_half_step(self, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        img = ImageTensor(rng.uniform(0, 1, (3, 2, 4)))
        path = tmp_path_factory.mktemp("ppm") / "img.ppm"
        save_ppm(img, path)
        back = load_image(path)
        assert float(np.max(np.abs(back.data - img.data))) <= 0.5 / 255 + 1e-12

    def test_header_with_comments(self, tmp_path):
        raster = bytes(range(12))
        blob = b"P6\n# a comment\n2 2\n# more\n255\n" + raster
        path = tmp_path / "c.ppm"
        path.write_bytes(blob)
        img = load_image(path)
        assert img.shape == (3, 2, 2)
        assert img.data[0, 0, 0] == 0.0

    def test_channel_layout_is_chw_from_interleaved(self, tmp_path):
        # one pixel: R=255 G=0 B=0, then R=0 G=255 B=0
        blob = b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0])
        path = tmp_path / "rgb.ppm"
        path.write_bytes(blob)
        img = load_image(path)
        assert img.data[0, 0, 0] == 1.0 and img.data[1, 0, 1] == 1.0

    @pytest.mark.parametrize("blob,match", [
        (b"P5\n1 1\n255\n\x00", "unsupported image format"),
        (b"P6\n1 1\n", "truncated PPM header"),
        (b"P6\n1 1\n65535\n" + b"\x00" * 6, "maxval"),
        (b"P6\n2 2\n255\n\x00\x00", "truncated PPM raster"),
        (b"P6\n0 2\n255\n", "bad PPM dimensions"),
        (b"P6\nx 2\n255\n" + b"\x00" * 12, "bad PPM header byte"),
    ])
    def test_malformed_files_rejected(self, tmp_path, blob, match):
        path = tmp_path / "bad.ppm"
        path.write_bytes(blob)
        with pytest.raises(DatasetError, match=match):
            load_image(path)

    def test_save_rejects_non_rgb(self, tmp_path):
        with pytest.raises(ValueError):
            save_ppm(ImageTensor(np.zeros((1, 2, 2))), tmp_path / "x.ppm")


class TestTensorImages:
    def test_advt_image_loads_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        # the container stores f32, so quantize before comparing bitwise
        arr = rng.uniform(0, 1, (1, 3, 3)).astype(np.float32).astype(
            np.float64)
        path = tmp_path / "img.advt"
        save_weights_file(path, [arr])
        assert load_image(path).bitwise_equal(ImageTensor(arr))

    def test_advt_image_must_be_rank_three(self, tmp_path):
        path = tmp_path / "flat.advt"
        save_weights_file(path, [np.zeros(4)])
        with pytest.raises(DatasetError, match="rank 3"):
            load_image(path)

    def test_record_loading_through_dataset(self, tmp_path):
        arr = np.full((1, 2, 2), 0.25)
        save_weights_file(tmp_path / "img.advt", [arr])
        ds = Dataset(records=(DatasetRecord(
            id="t", task="captioning", image_refs=("img.advt",),
            references=("r",),
        ),), base_dir=tmp_path)
        inputs = ds.load_inputs(ds.records[0])
        assert len(inputs) == 1 and inputs[0].shape == (1, 2, 2)


class TestConverters:
    def test_coco_layout(self, tmp_path):
        ann = {
            "images": [
                {"id": 7, "file_name": "COCO_val_000007.jpg"},
                {"id": 2, "file_name": "COCO_val_000002.jpg"},
            ],
            "annotations": [
                {"image_id": 7, "caption": "a dog"},
                {"image_id": 2, "caption": "a cat"},
                {"image_id": 7, "caption": "the dog runs"},
            ],
        }
        path = tmp_path / "captions.json"
        path.write_text(json.dumps(ann), encoding="utf-8")
        records = convert_coco_captions(path, "images")
        assert [r.id for r in records] == ["2", "7"]
        assert records[1].references == ("a dog", "the dog runs")
        assert records[1].image_refs == ("images/COCO_val_000007.ppm",)

    def test_coco_unknown_image_rejected(self, tmp_path):
        ann = {"images": [], "annotations": [{"image_id": 1, "caption": "x"}]}
        path = tmp_path / "captions.json"
        path.write_text(json.dumps(ann), encoding="utf-8")
        with pytest.raises(DatasetError, match="unknown image"):
            convert_coco_captions(path, "images")

    def test_vqa_layout(self, tmp_path):
        qfile = tmp_path / "questions.json"
        afile = tmp_path / "annotations.json"
        qfile.write_text(json.dumps({"questions": [
            {"question_id": 10, "image_id": 3, "question": "How many?"},
        ]}), encoding="utf-8")
        afile.write_text(json.dumps({"annotations": [
            {"question_id": 10,
             "answers": [{"answer": str(i % 2)} for i in range(10)]},
        ]}), encoding="utf-8")
        records = convert_vqa(qfile, afile, "images")
        assert len(records) == 1
        rec = records[0]
        assert rec.id == "10" and rec.question == "How many?"
        assert rec.image_refs == ("images/000000000003.ppm",)
        assert len(rec.answers) == 10

    def test_vqa_unknown_question_rejected(self, tmp_path):
        qfile = tmp_path / "questions.json"
        afile = tmp_path / "annotations.json"
        qfile.write_text(json.dumps({"questions": []}), encoding="utf-8")
        afile.write_text(json.dumps({"annotations": [
            {"question_id": 5, "answers": [{"answer": "x"}] * 10},
        ]}), encoding="utf-8")
        with pytest.raises(DatasetError, match="unknown question"):
            convert_vqa(qfile, afile, "images")
