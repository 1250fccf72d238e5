import hashlib
import json

import numpy as np
import pytest

from seqvis.cli import main
from seqvis.envsim import read_tasks
from seqvis.netpbm import read_ppm, write_pgm
from seqvis.schemas import validate

SMALL = {"seed": 3, "data": {"n_train": 100, "n_eval": 50}, "train": {"sft_epochs": 2, "rl_steps": 2, "eval_every": 1}}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(small_cfg), "--out-dir", str(out)]) == 0
    return out


class TestGenData:
    def test_manifest_and_replay(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert main(["gen-data", "--seed", "7", "--n", "100", "--out", str(a)]) == 0
        assert main(["gen-data", "--seed", "7", "--n", "100", "--out", str(b)]) == 0
        assert sha(a) == sha(b)
        manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
        validate(manifest, "manifest")
        assert manifest["n_tasks"] == 100 and manifest["tasks_sha256"] == sha(a)
        for line in a.read_text().splitlines():
            validate(json.loads(line), "task")

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        main(["gen-data", "--seed", "7", "--n", "5", "--out", str(a)])
        main(["gen-data", "--seed", "8", "--n", "5", "--out", str(b)])
        assert sha(a) != sha(b)

    def test_empty(self, tmp_path):
        a = tmp_path / "e.jsonl"
        assert main(["gen-data", "--seed", "1", "--n", "0", "--out", str(a)]) == 0
        assert a.read_bytes() == b""
        validate(json.loads((tmp_path / "e.jsonl.manifest.json").read_text()), "manifest")

    def test_heldout_stream_and_difficulty(self, tmp_path):
        a = tmp_path / "h.jsonl"
        assert main(["gen-data", "--seed", "1", "--n", "6", "--difficulty", "2", "--heldout", "--out", str(a)]) == 0
        assert {t.difficulty for t in read_tasks(a)} == {2}
        assert json.loads((tmp_path / "h.jsonl.manifest.json").read_text())["stream"] == "heldout_tasks"


class TestSegmentAndRender:
    def test_task_segment_then_render_roundtrip(self, tmp_path):
        tasks = tmp_path / "t.jsonl"
        main(["gen-data", "--seed", "2", "--n", "2", "--out", str(tasks)])
        out = tmp_path / "seg"
        assert main(["segment", "--task", str(tasks), "--index", "1", "--out-dir", str(out)]) == 0
        bank = json.loads((out / "bank.json").read_text())
        validate(bank, "bank")
        legend = json.loads((out / "overlay.legend.json").read_text())
        validate(legend, "legend")
        assert len(legend["regions"]) == len(bank["regions"]) >= read_tasks(tasks)[1].difficulty
        assert read_ppm(out / "overlay.ppm").shape == (128, 128, 3)

        again = tmp_path / "again.ppm"
        assert main(["render", "--bank", str(out / "bank.json"), "--saliency", str(out / "saliency.pgm"),
                     "--out", str(again)]) == 0
        assert again.read_bytes() == (out / "overlay.ppm").read_bytes()

    def test_pgm_with_query(self, tmp_path):
        px = np.full((12, 12), 20, dtype=np.uint8)
        px[2:5, 3:7] = 200
        px[8:11, 8:10] = 120
        write_pgm(tmp_path / "img.pgm", px)
        (tmp_path / "q.json").write_text(json.dumps({"level": 200 / 255}))
        out = tmp_path / "seg"
        assert main(["segment", "--pgm", str(tmp_path / "img.pgm"), "--query", str(tmp_path / "q.json"),
                     "--out-dir", str(out)]) == 0
        bank = json.loads((out / "bank.json").read_text())
        first = {tuple(p) for p in bank["regions"][0]["patches"]}
        assert first == {(r, c) for r in range(2, 5) for c in range(3, 7)}

    def test_constant_pgm_has_no_regions(self, tmp_path):
        write_pgm(tmp_path / "flat.pgm", np.full((8, 8), 77, dtype=np.uint8))
        (tmp_path / "q.json").write_text("[0.5]")
        out = tmp_path / "seg"
        assert main(["segment", "--pgm", str(tmp_path / "flat.pgm"), "--query", str(tmp_path / "q.json"),
                     "--out-dir", str(out)]) == 0
        assert json.loads((out / "bank.json").read_text())["regions"] == []

    def test_malformed_pgm(self, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        (tmp_path / "q.json").write_text("[0.5]")
        code = main(["segment", "--pgm", str(tmp_path / "bad.pgm"), "--query", str(tmp_path / "q.json"),
                     "--out-dir", str(tmp_path / "o")])
        assert code == 3


class TestTrainEval:
    def test_artifacts(self, trained):
        report = json.loads((trained / "report.json").read_text())
        validate(report, "train_report")
        assert report["checkpoints"] == {"sft": "sft.json", "policy": "policy.json"}
        for line in (trained / "train_log.jsonl").read_text().splitlines():
            validate(json.loads(line), "train_log")

    def test_eval_twice_identical(self, trained, small_cfg, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            assert main(["eval", "--config", str(small_cfg), "--checkpoint", str(trained / "policy.json"),
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        report = json.loads(a.read_text())
        validate(report, "eval_report")
        assert report["mean_vision_steps"] <= 8
        assert sum(v["n"] for v in report["per_difficulty"].values()) == report["n_tasks"] == 50

    def test_fixed_k(self, trained, small_cfg, tmp_path):
        out = tmp_path / "k2.json"
        assert main(["eval", "--config", str(small_cfg), "--checkpoint", str(trained / "policy.json"),
                     "--fixed-k", "2", "--no-tables", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["mean_vision_steps"] <= 2.0

    def test_train_rl_from_sft(self, trained, small_cfg, tmp_path):
        assert main(["train-rl", "--config", str(small_cfg), "--init", str(trained / "sft.json"),
                     "--set", "train.beta=1.0", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "policy.json").exists()

    def test_checkpoint_dimension_mismatch(self, trained, small_cfg, tmp_path):
        code = main(["eval", "--config", str(small_cfg), "--set", "env.d_l=48", "--checkpoint",
                     str(trained / "policy.json"), "--out", str(tmp_path / "x.json")])
        assert code == 3


class TestExitCodes:
    def test_usage_error(self):
        assert main(["no-such-command"]) == 2
        assert main(["gen-data", "--seed", "1"]) == 2

    def test_missing_seed(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x.jsonl")]) == 2

    def test_missing_checkpoint(self, small_cfg, tmp_path):
        assert main(["eval", "--config", str(small_cfg), "--checkpoint", str(tmp_path / "none.json")]) == 3

    def test_bad_thread_count(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SSV_THREADS", "-2")
        assert main(["gen-data", "--seed", "1", "--n", "1", "--out", str(tmp_path / "x.jsonl")]) == 2
