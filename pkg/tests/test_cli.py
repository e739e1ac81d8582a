"""End-user command line: subcommands, exit codes, emitted artifacts."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

from vlmadv.cli import EXIT_CONFIG, EXIT_ENDPOINT, EXIT_OK, EXIT_PARTIAL, main
from vlmadv.dataset import load_dataset
from vlmadv.harness import load_rows
from vlmadv.rng import SplitMix64
from vlmadv.toydata import make_toy_dataset
from vlmadv.toys import ToyLinearModel

FLAKY_SERVER = Path(__file__).resolve().parent / "flaky_server.py"
SERVER_SPEC = (f"{sys.executable} -m vlmadv.server --family linear --seed 5 "
               "--classes 4 --shape 3,2,2")

CONFIG_TEMPLATE = """
[run]
sample_size = 8
seed = 3
output = "{out}"
timestamp = "2026-01-01T00:00:00Z"

[[datasets]]
name = "toy-capt"
path = "{dataset}"

{models}

{attacks}

[strategies]
caption = ["Original", "AP"]
"""

TOY_MODEL_TOML = """
[[models]]
name = "lin"
kind = "toy"
family = "linear"
seed = 5
classes = 4
shape = [3, 2, 2]
"""

FGSM_TOML = """
[[attacks]]
method = "fgsm"
epsilon = "8/255"
"""


@pytest.fixture(scope="module")
def caption_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    model = ToyLinearModel(5, input_shape=(3, 2, 2), num_classes=4)
    return make_toy_dataset(root, "captioning", model, count=10, seed=4,
                            name="capt")


@pytest.fixture(scope="module")
def vqa_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clivqa")
    model = ToyLinearModel(5, input_shape=(3, 2, 2), num_classes=4)
    return make_toy_dataset(root, "vqa", model, count=6, seed=5, name="vqa")


def write_config(tmp_path, dataset, models=TOY_MODEL_TOML,
                 attacks=FGSM_TOML) -> Path:
    out = tmp_path / "out"
    path = tmp_path / "run.toml"
    path.write_text(CONFIG_TEMPLATE.format(
        out=out, dataset=dataset, models=models, attacks=attacks),
        encoding="utf-8")
    return path


class TestRunCommand:
    def test_full_run_writes_artifacts(self, tmp_path, caption_dataset,
                                       capsys):
        config = write_config(tmp_path, caption_dataset)
        assert main(["run", "--config", str(config)]) == EXIT_OK
        out = tmp_path / "out"
        rows = load_rows(out / "results.jsonl")
        assert len(rows) == 4  # 2 strategies x (clean + fgsm)
        assert (out / "report.md").is_file()
        assert (out / "report.csv").is_file()
        stdout = capsys.readouterr().out
        assert "wrote 4 rows" in stdout

    def test_overrides_reshape_the_grid(self, tmp_path, caption_dataset):
        config = write_config(tmp_path, caption_dataset)
        out2 = tmp_path / "other"
        assert main([
            "run", "--config", str(config),
            "--attack", "pgd", "--eps", "4/255,8/255", "--iters", "5",
            "--strategy", "Original", "--sample-size", "5",
            "--out", str(out2), "--format", "csv",
        ]) == EXIT_OK
        rows = load_rows(out2 / "results.jsonl")
        tags = [(r.attack, round(r.epsilon * 255)) for r in rows]
        assert tags == [("None", 0), ("PGD", 4), ("PGD", 8)]
        assert all(r.sample_count == 5 for r in rows)
        assert not (out2 / "report.md").exists()

    def test_partial_failure_exit_code(self, tmp_path, caption_dataset,
                                       capsys):
        flaky = f'''
[[models]]
name = "flaky"
kind = "oracle"
transport = "{sys.executable} {FLAKY_SERVER} 1"
'''
        config = write_config(tmp_path, caption_dataset, models=flaky,
                              attacks="")
        assert main(["run", "--config", str(config)]) == EXIT_PARTIAL
        assert "FAILED cell" in capsys.readouterr().err
        rows = load_rows(tmp_path / "out" / "results.jsonl")
        assert all(r.status == "failed" for r in rows)

    def test_config_errors_exit_one(self, tmp_path, caption_dataset, capsys):
        assert main(["run", "--config",
                     str(tmp_path / "missing.toml")]) == EXIT_CONFIG
        bad = write_config(tmp_path, caption_dataset,
                           models='[[models]]\nname = "x"\nkind = "toy"\n')
        assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_unreachable_endpoint_exits_two(self, tmp_path, caption_dataset):
        ghost = '''
[[models]]
name = "ghost"
kind = "oracle"
transport = "/nonexistent/model-server"
'''
        config = write_config(tmp_path, caption_dataset, models=ghost)
        assert main(["run", "--config", str(config)]) == EXIT_ENDPOINT


class TestReportCommand:
    @pytest.fixture()
    def store(self, tmp_path, caption_dataset):
        config = write_config(tmp_path, caption_dataset)
        assert main(["run", "--config", str(config)]) == EXIT_OK
        return tmp_path / "out" / "results.jsonl"

    def test_render_markdown(self, store, tmp_path, capsys):
        out = tmp_path / "rendered"
        assert main(["report", "--store", str(store),
                     "--out", str(out)]) == EXIT_OK
        text = (out / "report.md").read_text(encoding="utf-8")
        assert "| Prompt |" in text and "Clean" in text

    def test_attacks_layout_and_average(self, store, tmp_path):
        out = tmp_path / "rendered2"
        assert main(["report", "--store", str(store), "--out", str(out),
                     "--layout", "attacks", "--average-tasks"]) == EXIT_OK
        text = (out / "report.md").read_text(encoding="utf-8")
        assert "| Attack |" in text
        assert "Cross-task average" in text

    def test_corrupt_store_fails_unless_tolerant(self, store, tmp_path):
        with open(store, "a", encoding="utf-8") as f:
            f.write("{nope\n")
        out = tmp_path / "rendered3"
        assert main(["report", "--store", str(store),
                     "--out", str(out)]) == EXIT_CONFIG
        assert main(["report", "--store", str(store), "--out", str(out),
                     "--tolerant"]) == EXIT_OK

    def test_missing_and_empty_store(self, tmp_path, capsys):
        assert main(["report", "--store",
                     str(tmp_path / "nope.jsonl")]) == EXIT_CONFIG
        empty = tmp_path / "empty.jsonl"
        empty.write_text("", encoding="utf-8")
        assert main(["report", "--store", str(empty)]) == EXIT_CONFIG
        assert "no rows" in capsys.readouterr().err


class TestConvertCommand:
    def test_coco_captions(self, tmp_path, capsys):
        ann = tmp_path / "captions.json"
        ann.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.jpg"}],
            "annotations": [{"image_id": 1, "caption": "a dog"}],
        }), encoding="utf-8")
        out = tmp_path / "capt.jsonl"
        assert main(["convert-dataset", "coco-captions",
                     "--annotations", str(ann), "--images", "images",
                     "--out", str(out)]) == EXIT_OK
        ds = load_dataset(out, check_images=False)
        assert ds.records[0].references == ("a dog",)
        assert "wrote 1 records" in capsys.readouterr().out

    def test_vqa_requires_questions(self, tmp_path, capsys):
        ann = tmp_path / "ann.json"
        ann.write_text("{}", encoding="utf-8")
        assert main(["convert-dataset", "vqa", "--annotations", str(ann),
                     "--images", "im", "--out",
                     str(tmp_path / "o.jsonl")]) == EXIT_CONFIG
        assert "--questions" in capsys.readouterr().err

    def test_vqa_layout(self, tmp_path):
        qfile = tmp_path / "q.json"
        afile = tmp_path / "a.json"
        qfile.write_text(json.dumps({"questions": [
            {"question_id": 1, "image_id": 2, "question": "What?"}]}),
            encoding="utf-8")
        afile.write_text(json.dumps({"annotations": [
            {"question_id": 1,
             "answers": [{"answer": "x"}] * 10}]}), encoding="utf-8")
        out = tmp_path / "vqa.jsonl"
        assert main(["convert-dataset", "vqa", "--annotations", str(afile),
                     "--questions", str(qfile), "--images", "im",
                     "--out", str(out)]) == EXIT_OK
        assert load_dataset(out, check_images=False).records[0].task == "vqa"


class TestRewriteCacheCommand:
    def test_stub_warms_cache(self, tmp_path, vqa_dataset, capsys):
        cache = tmp_path / "cache.jsonl"
        assert main(["rewrite-cache", "--dataset", str(vqa_dataset),
                     "--strategy", "AC,AP", "--cache", str(cache)]) == EXIT_OK
        assert "cached 12 rewrites" in capsys.readouterr().out
        lines = cache.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 12  # 6 questions x 2 strategies
        assert {json.loads(l)["strategy"] for l in lines} == {"AC", "AP"}

    def test_fixture_rewriter_spec(self, tmp_path, vqa_dataset):
        ds = load_dataset(vqa_dataset)
        fixture = tmp_path / "pairs.jsonl"
        fixture.write_text("\n".join(
            json.dumps({"strategy": "AC", "question": rec.question,
                        "rewritten": f"normalized {rec.question}"})
            for rec in ds.records) + "\n", encoding="utf-8")
        cache = tmp_path / "cache.jsonl"
        assert main(["rewrite-cache", "--dataset", str(vqa_dataset),
                     "--strategy", "AC", "--cache", str(cache),
                     "--rewriter", f"fixture:{fixture}"]) == EXIT_OK
        rec = json.loads(cache.read_text().splitlines()[0])
        assert rec["rewritten"].startswith("normalized ")
        assert rec["source"] == "fixture"

    def test_bad_transport_exits_two(self, tmp_path, vqa_dataset):
        assert main(["rewrite-cache", "--dataset", str(vqa_dataset),
                     "--strategy", "AC", "--cache",
                     str(tmp_path / "c.jsonl"),
                     "--rewriter", "/nonexistent/rewriter"]) == EXIT_ENDPOINT


class TestProtocolCheckCommand:
    def test_reference_server_conforms(self, capsys):
        assert main(["protocol-check", "--endpoint", SERVER_SPEC,
                     "--fuzz-lines", "100"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "endpoint conforms" in out
        assert "[FAIL]" not in out
        assert "[PASS] handshake" in out

    def test_nonconforming_server_detected(self, capsys):
        spec = f"{sys.executable} {FLAKY_SERVER} 1"
        assert main(["protocol-check", "--endpoint", spec,
                     "--fuzz-lines", "5"]) == EXIT_ENDPOINT
        assert "[FAIL]" in capsys.readouterr().out

    def test_unreachable_endpoint(self, capsys):
        assert main(["protocol-check", "--endpoint",
                     "/nonexistent/server"]) == EXIT_ENDPOINT
        assert "cannot open endpoint" in capsys.readouterr().err

    def test_fuzz_lines_deterministic(self):
        from vlmadv.protocol_check import _fuzz_line

        one, two = SplitMix64(7), SplitMix64(7)
        a = [_fuzz_line(one) for _ in range(50)]
        b = [_fuzz_line(two) for _ in range(50)]
        assert a == b
        assert len(set(a)) > 1
        assert all(b"\n" not in line for line in a)
