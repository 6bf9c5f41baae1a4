import hashlib
import json

import numpy as np
import pytest

from planrank.cli import main
from planrank.ood import OodDetector, Thresholds, load_detector, save_detector

TINY = {
    "seed": 3,
    "workload": {"num_queries": 30, "plans_per_query": [4, 8], "noise_cv": 0.02},
    "split": {"ratio": 0.8},
    "train": {"learning_rate": 1e-3, "epochs": 3, "embedder": "tree_lstm",
              "ranker": {"d_model": 8, "num_heads": 2}},
    "ood": {"epochs": 200, "hidden": 16},
    # a workload this small calibrates as degraded, so the override is on
    "decision": {"k": 3, "force": True},
    "eval": {"shift_fraction": 0.1},
    "paths": {"dataset": "out/data.jsonl", "split": "out/split.json", "checkpoint": "out/model.ckpt",
              "detector": "out/det.ood", "report": "out/report.json"},
}


def write_config(directory, cfg=TINY, name="run.json"):
    path = directory / name
    path.write_text(json.dumps(cfg))
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d)
    for cmd in ("gen-data", "train", "train-ood"):
        assert main([cmd, "--config", cfg]) == 0
    (d / "one.json").write_text((d / "out" / "data.jsonl").read_text().splitlines()[0])
    return d


class TestPipeline:
    def test_files_written(self, run_dir):
        for name in ("data.jsonl", "split.json", "model.ckpt", "det.ood"):
            assert (run_dir / "out" / name).exists()
        split = json.loads((run_dir / "out" / "split.json").read_text())
        assert (len(split["train"]), len(split["test"])) == (24, 6)

    def test_gen_data_byte_identical(self, run_dir, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen-data", "--config", cfg]) == 0
        assert digest(tmp_path / "out" / "data.jsonl") == digest(run_dir / "out" / "data.jsonl")
        assert digest(tmp_path / "out" / "split.json") == digest(run_dir / "out" / "split.json")

    def test_seed_override(self, run_dir, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen-data", "--config", cfg, "--seed", "4"]) == 0
        assert digest(tmp_path / "out" / "data.jsonl") != digest(run_dir / "out" / "data.jsonl")

    def test_train_prints_losses_and_is_reproducible(self, run_dir, capsys):
        cfg = write_config(run_dir)
        out = run_dir / "again.ckpt"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch")]
        assert len(lines) == 3
        assert digest(out) == digest(run_dir / "out" / "model.ckpt")

    def test_rank(self, run_dir, capsys):
        cfg = write_config(run_dir)
        assert main(["rank", "--config", cfg, str(run_dir / "one.json")]) == 0
        obj = json.loads(capsys.readouterr().out)
        n = len(obj["permutation"])
        assert sorted(obj["permutation"]) == list(range(n))
        assert np.array(obj["scores"]).shape == (n, n)

    def test_decide(self, run_dir, capsys):
        cfg = write_config(run_dir)
        assert main(["decide", "--config", cfg, str(run_dir / "one.json"), "--k", "2"]) == 0
        obj = json.loads(capsys.readouterr().out)
        assert obj["source"] in ("ModelRank", "CboFallback")
        assert obj["k"] == 2 and 1 <= len(obj["trace"]) <= 2
        assert obj["tie_group"]

    def test_decide_fallback_trace(self, run_dir, tmp_path, capsys):
        det = load_detector(run_dir / "out" / "det.ood")
        dim = det.input_dim
        silent = OodDetector(np.zeros((1, dim)), np.zeros(1), np.zeros(1), np.zeros(dim), np.ones(dim),
                             Thresholds(0.9, 0.6))
        save_detector(silent, tmp_path / "silent.ood")
        cfg = json.loads(json.dumps(TINY))
        cfg["paths"] = {k: str(run_dir / v) for k, v in TINY["paths"].items()}
        cfg["paths"]["detector"] = str(tmp_path / "silent.ood")
        path = write_config(tmp_path, cfg)
        assert main(["decide", "--config", path, str(run_dir / "one.json")]) == 0
        obj = json.loads(capsys.readouterr().out)
        assert obj["source"] == "CboFallback"
        assert all(not t["passed"] for t in obj["trace"])

    def test_eval_report(self, run_dir, capsys):
        cfg = write_config(run_dir)
        before = digest(run_dir / "out" / "data.jsonl")
        assert main(["eval", "--config", cfg]) == 0
        text = capsys.readouterr().out
        assert "hybrid" in text and "shifted" in text
        report = json.loads((run_dir / "out" / "report.json").read_text())
        assert [p["policy"] for p in report["policies"]] == ["model_top1", "hybrid", "cbo", "best"]
        assert report["shifted"]["fraction"] == 0.1
        first = digest(run_dir / "out" / "report.json")
        assert main(["eval", "--config", cfg]) == 0
        assert digest(run_dir / "out" / "report.json") == first
        assert digest(run_dir / "out" / "data.jsonl") == before

    def test_inspect(self, run_dir, capsys):
        cfg = write_config(run_dir)
        assert main(["inspect", "--config", cfg]) == 0
        header = json.loads(capsys.readouterr().out)
        assert header["kind"] == "checkpoint"
        assert main(["inspect", "--config", cfg, str(run_dir / "out" / "det.ood")]) == 0
        assert json.loads(capsys.readouterr().out)["kind"] == "ood_detector"


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 1

    def test_unknown_key(self, tmp_path):
        cfg = json.loads(json.dumps(TINY))
        cfg["train"]["dropout"] = 0.1
        assert main(["gen-data", "--config", write_config(tmp_path, cfg)]) == 1

    def test_invalid_value(self, tmp_path):
        cfg = json.loads(json.dumps(TINY))
        cfg["workload"]["plans_per_query"] = [1, 4]
        assert main(["gen-data", "--config", write_config(tmp_path, cfg)]) == 1

    def test_bad_arguments(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["fly", "--config", "x"])
        assert exc.value.code == 1

    def test_corrupt_checkpoint(self, run_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((run_dir / "out" / "model.ckpt").read_bytes()[:-3])
        cfg = json.loads(json.dumps(TINY))
        cfg["paths"] = {k: str(run_dir / v) for k, v in TINY["paths"].items()}
        cfg["paths"]["checkpoint"] = str(bad)
        assert main(["rank", "--config", write_config(tmp_path, cfg), str(run_dir / "one.json")]) == 3

    def test_malformed_input(self, run_dir, tmp_path):
        (tmp_path / "junk.json").write_text('{"query_id": "q"}')
        assert main(["rank", "--config", write_config(run_dir), str(tmp_path / "junk.json")]) == 2

    def test_degraded_detector_needs_force(self, run_dir, tmp_path):
        assert load_detector(run_dir / "out" / "det.ood").degraded
        cfg = json.loads(json.dumps(TINY))
        cfg["paths"] = {k: str(run_dir / v) for k, v in TINY["paths"].items()}
        cfg["decision"]["force"] = False
        path = write_config(tmp_path, cfg)
        assert main(["decide", "--config", path, str(run_dir / "one.json")]) == 3
        assert main(["decide", "--config", path, str(run_dir / "one.json"), "--force"]) == 0

    def test_k_out_of_range_is_data_error(self, run_dir):
        assert main(["decide", "--config", write_config(run_dir), str(run_dir / "one.json"), "--k", "99"]) == 2
