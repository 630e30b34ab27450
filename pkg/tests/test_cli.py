import json

import pytest

from dppvi.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main

BASE = {
    "method": "pvi_standard",
    "model": {"kind": "logistic_regression", "input_dim": 2},
    "data": {"source": "synthetic", "n": 300, "theta_true": [0.0, 1.0, -1.0]},
    "split": {"M": 3},
    "schedule": {"kind": "sequential", "global_updates": 3},
    "optimizer": {"lr": 0.05, "local_steps": 10},
    "n_mc_eval": 10,
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(BASE))
    return path


class TestRun:
    def test_run_writes_outputs(self, tmp_path, config_file, capsys):
        out = tmp_path / "out"
        assert main(["run", "--config", str(config_file), "--out", str(out), "--repeats", "2"]) == EXIT_OK
        assert {p.name for p in out.iterdir()} == {"report.json", "trace.jsonl", "rounds.csv"}
        assert "communications=6" in capsys.readouterr().out

    def test_flag_overrides(self, tmp_path, config_file):
        out = tmp_path / "out"
        code = main(["run", "--config", str(config_file), "--out", str(out), "--method", "pvi_dp_opt",
                     "--epsilon", "1", "--clip-norm", "1", "--set", "optimizer.batch_size=20"])
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["method"] == "pvi_dp_opt"
        assert report["config"]["optimizer"]["batch_size"] == 20
        assert report["epsilon_max"] <= 1.0

    def test_config_error(self, config_file):
        assert main(["run", "--config", str(config_file), "--method", "bogus"]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG

    def test_bad_flag(self):
        assert main(["run", "--no-such-flag"]) == EXIT_CONFIG

    def test_divergence(self, tmp_path, config_file):
        code = main(["run", "--config", str(config_file), "--method", "pvi_local_avg", "--sigma", "50",
                     "--clip-norm", "100", "--local-steps", "5"])
        assert code == EXIT_DIVERGED


class TestOtherVerbs:
    def test_replay(self, tmp_path, config_file, capsys):
        out = tmp_path / "out"
        main(["run", "--config", str(config_file), "--out", str(out)])
        assert main(["replay", str(out / "trace.jsonl")]) == EXIT_OK
        assert "replay ok" in capsys.readouterr().out

    def test_replay_mismatch(self, tmp_path, config_file):
        out = tmp_path / "out"
        main(["run", "--config", str(config_file), "--out", str(out)])
        path = out / "trace.jsonl"
        lines = path.read_text().splitlines()
        doc = json.loads(lines[-2])
        doc["accuracy"] = 0.0
        lines[-2] = json.dumps(doc)
        path.write_text("\n".join(lines) + "\n")
        assert main(["replay", str(path)]) == EXIT_DIVERGED

    def test_sweep(self, tmp_path, config_file, capsys):
        out = tmp_path / "sweep"
        code = main(["sweep", "--config", str(config_file), "--out", str(out), "--grid", '{"optimizer.lr": [0.01, 0.1]}'])
        assert code == EXIT_OK
        assert (out / "selection.json").exists()
        assert "selection:" in capsys.readouterr().out

    def test_sweep_bad_grid(self, config_file):
        assert main(["sweep", "--config", str(config_file), "--grid", "{not json"]) == EXIT_CONFIG

    def test_epsilon_table(self, capsys):
        assert main(["epsilon-table", "--steps", "1", "--epsilon", "1"]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "steps,q,delta,target_epsilon,noise_multiplier,achieved_epsilon"
        sigma = float(lines[1].split(",")[4])
        assert sigma == pytest.approx(3.73, rel=2e-3)

    def test_epsilon_for_sigma(self, capsys):
        assert main(["epsilon-table", "--steps", "10", "--sigma", "2", "--q", "0.01"]) == EXIT_OK
        assert capsys.readouterr().out.splitlines()[0] == "steps,q,sigma,delta,epsilon"

    def test_epsilon_table_domain_error(self):
        assert main(["epsilon-table", "--steps", "1", "--q", "1.5", "--sigma", "1"]) == EXIT_CONFIG
