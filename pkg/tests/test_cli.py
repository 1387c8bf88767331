from __future__ import annotations

import csv
import json

import pytest

from gprl.cli import EXIT_DATA, EXIT_USAGE, experiment_config, main

FAST = {
    "model": {"epochs": 2, "hidden": [4]},
    "rollout": {"horizon": 20, "train_starts": 4, "eval_starts": 6},
    "ga": {"population_size": 12, "generations": 2},
    "regress": {"population_size": 12, "generations": 2, "samples": 60},
    "teacher": {"iterations": 2, "starts": 3, "hidden": [3]},
}


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "fast.json"
    path.write_text(json.dumps(FAST))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def mc_pipeline(tmp_path, fast_config):
    """collect -> train-model on a small MC dataset."""
    d, m = tmp_path / "d", tmp_path / "m"
    assert run("collect", "--env", "mc", "--count", 200, "--out", d, "--config", fast_config) == 0
    assert run("train-model", "--env", "mc", "--data", d / "dataset.jsonl", "--out", m,
               "--config", fast_config) == 0
    return tmp_path, fast_config


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestConfig:
    def test_profiles(self):
        paper = experiment_config("cpb", "paper")
        assert paper["ga"]["population_size"] == 1000 and paper["rollout"]["horizon"] == 100
        desk = experiment_config("mc", "desk")
        assert desk["ga"]["population_size"] == 100 and desk["ga"]["generations"] == 100
        assert desk["rollout"]["train_starts"] == 30 and desk["ga"]["tournament_size"] == 3

    def test_overrides_merge(self):
        cfg = experiment_config("mc", overrides={"ga": {"generations": 7}})
        assert cfg["ga"]["generations"] == 7 and cfg["ga"]["population_size"] == 100

    def test_unknown(self):
        with pytest.raises(ValueError):
            experiment_config("mc", "huge")


class TestCollect:
    def test_exact_rows_and_meta(self, tmp_path):
        assert run("collect", "--env", "mc", "--count", 100, "--out", tmp_path) == 0
        lines = (tmp_path / "dataset.jsonl").read_text().splitlines()
        assert len(lines) == 100
        meta = json.loads((tmp_path / "dataset.meta.json").read_text())
        assert meta["env"] == "mc" and meta["schema_version"] == 1
        assert json.loads((tmp_path / "config.json").read_text())["seed"] == 0

    def test_cpb_segments(self, tmp_path):
        assert run("collect", "--env", "cpb", "--count", 500, "--out", tmp_path) == 0
        rows = [json.loads(x) for x in (tmp_path / "dataset.jsonl").read_text().splitlines()]
        seg, longest = 1, 1
        for a, b in zip(rows, rows[1:]):
            seg = seg + 1 if a["sn"] == b["s"] else 1
            longest = max(longest, seg)
        assert len(rows) == 500 and longest <= 100

    def test_deterministic(self, tmp_path):
        for k in ("a", "b"):
            assert run("collect", "--env", "cpb", "--count", 50, "--seed", 4,
                       "--out", tmp_path / k) == 0
        assert (tmp_path / "a/dataset.jsonl").read_bytes() == (tmp_path / "b/dataset.jsonl").read_bytes()


class TestTrainModel:
    def test_three_sub_models_and_byte_identical(self, mc_pipeline):
        tmp, cfg = mc_pipeline
        doc = json.loads((tmp / "m/model.json").read_text())
        assert len(doc["models"]) == 2 and doc["reward_model"]["role"] == "reward"
        assert run("train-model", "--env", "mc", "--data", tmp / "d/dataset.jsonl",
                   "--out", tmp / "m2", "--config", cfg) == 0
        assert (tmp / "m/model.json").read_bytes() == (tmp / "m2/model.json").read_bytes()
        report = json.loads((tmp / "m/model_report.json").read_text())
        assert set(report) == {"delta_0", "delta_1", "reward"}

    def test_missing_dataset(self, tmp_path, capsys):
        assert run("train-model", "--env", "mc", "--data", tmp_path / "nope.jsonl",
                   "--out", tmp_path / "m") == EXIT_DATA
        assert "nope.jsonl" in capsys.readouterr().err

    def test_env_mismatch(self, mc_pipeline):
        tmp, cfg = mc_pipeline
        assert run("train-model", "--env", "cpb", "--data", tmp / "d/dataset.jsonl",
                   "--out", tmp / "x", "--config", cfg) == EXIT_DATA


class TestRun:
    def test_gprl_run_outputs(self, mc_pipeline):
        tmp, cfg = mc_pipeline
        for k in ("r1", "r2"):
            assert run("run", "--env", "mc", "--model", tmp / "m/model.json", "--out", tmp / k,
                       "--config", cfg) == 0
        assert (tmp / "r1/archive.csv").read_bytes() == (tmp / "r2/archive.csv").read_bytes()
        rows = read_rows(tmp / "r1/archive.csv")
        assert rows and all(r["schema_version"] == "1" for r in rows)
        manifest = json.loads((tmp / "r1/manifest.json").read_text())
        assert manifest["generations"] == 2 and manifest["config"]["seed"] == 0
        assert list((tmp / "r1/policies").glob("c*.txt"))

    def test_regress_mode(self, mc_pipeline):
        tmp, cfg = mc_pipeline
        assert run("run", "--env", "mc", "--mode", "regress", "--model", tmp / "m/model.json",
                   "--out", tmp / "rr", "--config", cfg) == 0
        rows = read_rows(tmp / "rr/archive.csv")
        assert all(float(r["model_fitness"]) <= 0 for r in rows)
        assert (tmp / "rr/teacher.json").exists()

    def test_regress_with_saved_teacher(self, mc_pipeline):
        tmp, cfg = mc_pipeline
        assert run("train-teacher", "--env", "mc", "--model", tmp / "m/model.json",
                   "--out", tmp / "t", "--config", cfg) == 0
        assert run("run", "--env", "mc", "--mode", "regress", "--model", tmp / "m/model.json",
                   "--teacher", tmp / "t/teacher.json", "--out", tmp / "rt",
                   "--config", cfg) == 0

    def test_missing_model_names_command(self, tmp_path, capsys):
        assert run("run", "--env", "mc", "--model", tmp_path / "none.json",
                   "--out", tmp_path / "r") == EXIT_DATA
        assert "train-model" in capsys.readouterr().err


class TestEval:
    def test_squashed_and_export(self, mc_pipeline):
        tmp, cfg = mc_pipeline
        assert run("run", "--env", "mc", "--model", tmp / "m/model.json", "--out", tmp / "r",
                   "--config", cfg) == 0
        assert run("eval", "--env", "mc", tmp / "r", "--out", tmp / "e", "--config", cfg) == 0
        rows = read_rows(tmp / "e/squashed.csv")
        assert rows and all(r["min"] == r["median"] == r["max"] for r in rows)
        med = [float(r["median"]) for r in rows]
        assert med == sorted(med, reverse=True)
        assert read_rows(tmp / "e/eval_r.csv")
        assert run("pareto-export", tmp / "r", "--out", tmp / "px") == 0
        assert (tmp / "px/front.csv").exists() and (tmp / "px/config.json").exists()

    def test_env_mismatch_refused(self, mc_pipeline):
        tmp, cfg = mc_pipeline
        assert run("run", "--env", "mc", "--model", tmp / "m/model.json", "--out", tmp / "r",
                   "--config", cfg) == 0
        assert run("eval", "--env", "cpb", tmp / "r", "--out", tmp / "e") == EXIT_DATA


class TestUsage:
    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == EXIT_USAGE

    def test_bad_env(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["collect", "--env", "ib", "--out", str(tmp_path)])
        assert e.value.code == EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"mode": "nonsense"}))
        assert run("collect", "--env", "mc", "--out", tmp_path / "o", "--config", cfg) == EXIT_USAGE

    def test_unreadable_config(self, tmp_path):
        assert run("collect", "--env", "mc", "--out", tmp_path / "o",
                   "--config", tmp_path / "missing.json") == EXIT_DATA
