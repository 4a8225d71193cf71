import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from ecmcmc import cli
from ecmcmc.config import (
    CompareConfig,
    ConfigError,
    ExperimentConfig,
    is_compare,
    load_compare,
    load_experiment,
    resolved_dict,
    with_seed,
)

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "ecmcmc" / "configs"

SMALL = {
    "model": {"kind": "gaussian", "dim": 2, "grad_noise": 0.5},
    "sampler": {"kind": "ec_sghmc", "epsilon": 0.05, "V": 1.0, "C": 1.0, "alpha": 1.0},
    "protocol": {"scheme": "elastic", "workers": 3, "comm_period": 2},
    "run": {"steps": 300, "burn_in": 50, "thin": 5, "seed": 4},
}


def write(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestConfig:
    def test_defaults_are_filled(self):
        cfg = load_experiment({"sampler": {"kind": "sghmc"}})
        assert cfg.run.steps == 1000 and cfg.protocol.scheme == "independent"
        assert cfg.sampler.resolved_scaling == "linear"
        assert load_experiment(SMALL).sampler.resolved_scaling == "quadratic"

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigError) as info:
            load_experiment({"sampler": {"kind": "sghmc", "epsilom": 0.1}})
        assert "sampler.epsilom" in str(info.value)

    def test_zero_period_names_path(self):
        data = dict(SMALL, protocol={"scheme": "elastic", "workers": 3, "comm_period": 0})
        with pytest.raises(ConfigError) as info:
            load_experiment(data)
        assert "protocol.comm_period" in str(info.value)

    def test_pairing_and_burn_in(self):
        with pytest.raises(ConfigError):
            load_experiment({"sampler": {"kind": "ec_sghmc"}, "protocol": {"scheme": "independent"}})
        with pytest.raises(ConfigError):
            load_experiment(dict(SMALL, run={"steps": 10, "burn_in": 10}))

    def test_wait_count_bounded_by_workers(self):
        with pytest.raises(ConfigError):
            load_experiment({"sampler": {"kind": "sghmc"},
                             "protocol": {"scheme": "naive_async", "workers": 2, "wait_count": 3}})

    def test_round_trip_through_resolved_dict(self):
        cfg = load_experiment(SMALL)
        again = load_experiment(resolved_dict(cfg))
        assert again == cfg and resolved_dict(again) == resolved_dict(cfg)

    def test_with_seed(self):
        cfg = with_seed(load_experiment(SMALL), 99)
        assert cfg.run.seed == 99

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: [unclosed")
        with pytest.raises(ConfigError):
            load_experiment(str(path))
        path.write_text("- a list")
        with pytest.raises(ConfigError):
            load_experiment(str(path))
        with pytest.raises(ConfigError):
            load_experiment(str(tmp_path / "missing.yaml"))

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
    def test_shipped_configs_validate(self, path):
        if is_compare(str(path)):
            load_compare(str(path)).experiments()
        else:
            load_experiment(str(path))

    def test_compare_rules(self):
        arm = {"name": "a", "sampler": {"kind": "sghmc"}}
        with pytest.raises(ConfigError):
            load_compare({"model": {"kind": "gaussian"}, "arms": [arm]})
        with pytest.raises(ConfigError):
            load_compare({"model": {"kind": "gaussian"}, "arms": [arm, arm]})
        cfg = load_compare({"arms": [arm, dict(arm, name="b")]})
        with pytest.raises(ConfigError):
            cfg.experiments()
        mixed = CompareConfig.model_validate({
            "model": {"kind": "gaussian"},
            "arms": [arm, dict(arm, name="b", model={"kind": "gaussian", "dim": 3})],
        })
        with pytest.raises(ConfigError) as info:
            mixed.experiments()
        assert "arms.b.model" in str(info.value)

    def test_experiment_config_is_frozen(self):
        cfg = ExperimentConfig()
        with pytest.raises(Exception):
            cfg.run = None


class TestRun:
    def test_artifacts_and_manifest(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["run", "--config", write(tmp_path, SMALL), "--out", str(out), "--quiet"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "complete"
        for name, digest in manifest["artifacts"].items():
            assert sha(out / name) == digest
        assert load_experiment(manifest["config"]) == load_experiment(SMALL)
        with open(out / "trace.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == cli.TRACE_HEADER
        # every 5th of 300 steps (burn-in only affects summaries), 3 workers, two metrics
        assert len(rows) - 1 == 60 * 3 * 2
        first = json.loads((out / "samples.jsonl").read_text().splitlines()[0])
        assert first["seed"] == 4 and first["run_id"] == manifest["run_id"]

    def test_run_twice_identical_checksums(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        cli.main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"])
        cli.main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet"])
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert a["artifacts"] == b["artifacts"]

    def test_seed_flag_changes_output(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        cli.main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"])
        cli.main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5", "--quiet"])
        assert sha(tmp_path / "a" / "trace.csv") != sha(tmp_path / "b" / "trace.csv")
        assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 5

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        bad = dict(SMALL, protocol={"scheme": "elastic", "workers": 3, "comm_period": 0})
        assert cli.main(["run", "--config", write(tmp_path, bad), "--out", str(tmp_path / "o")]) == 2
        assert "protocol.comm_period" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        bad = dict(SMALL, run={"steps": 10, "stepz": 3})
        assert cli.main(["run", "--config", write(tmp_path, bad)]) == 2
        assert "run.stepz" in capsys.readouterr().err

    def test_divergence_leaves_incomplete_manifest(self, tmp_path, capsys):
        out = tmp_path / "out"
        cli.main(["run", "--config", write(tmp_path, SMALL), "--out", str(out), "--quiet"])
        bad = dict(SMALL, model={"kind": "gaussian", "dim": 2, "cov": 1e-4},
                   sampler={"kind": "sghmc", "epsilon": 0.5}, protocol={"scheme": "independent"},
                   run={"steps": 5000})
        assert cli.main(["run", "--config", write(tmp_path, bad, "bad.yaml"), "--out", str(out)]) == 3
        err = capsys.readouterr().err
        assert "non-finite" in err and "step" in err
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "incomplete" and manifest["failed_step"] > 0
        assert sorted(p.name for p in out.iterdir()) == ["manifest.json"]

    def test_compare_file_rejected_by_run(self, tmp_path):
        assert cli.main(["run", "--config", str(CONFIGS / "optimizers.yaml")]) == 2

    def test_negative_seed(self, tmp_path):
        assert cli.main(["run", "--config", write(tmp_path, SMALL), "--seed", "-1"]) == 2

    def test_threads_mode(self, tmp_path):
        out = tmp_path / "t"
        assert cli.main(["run", "--config", write(tmp_path, SMALL), "--out", str(out), "--mode", "threads",
                         "--quiet"]) == 0
        assert json.loads((out / "manifest.json").read_text())["mode"] == "threads"


class TestCompare:
    def arms(self, **extra):
        sampler = {"kind": "sghmc", "epsilon": 0.05}
        return {
            "model": {"kind": "gaussian", "dim": 2, "grad_noise": 0.5},
            "arms": [
                {"name": "one", "sampler": sampler, "protocol": {"scheme": "independent", "workers": 2}},
                {"name": "two", "sampler": sampler, "protocol": {"scheme": "independent", "workers": 2}},
            ],
            "run": {"steps": 400, "seed": 1},
            "compare": {"grid_step": 50},
            **extra,
        }

    def test_identical_arms_give_identical_series(self, tmp_path):
        out = tmp_path / "c"
        assert cli.main(["compare", "--config", write(tmp_path, self.arms()), "--out", str(out), "--quiet"]) == 0
        with open(out / "series.csv") as fh:
            rows = list(csv.DictReader(fh))
        one = [(r["step"], r["metric"], r["value"]) for r in rows if r["arm"] == "one"]
        two = [(r["step"], r["metric"], r["value"]) for r in rows if r["arm"] == "two"]
        assert one == two and len(one) == 8 * 2
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["winners"]) == {"mean_error", "cov_rel_error"}

    def test_mismatched_models_exit_2(self, tmp_path, capsys):
        data = self.arms()
        data["arms"][1]["model"] = {"kind": "gaussian", "dim": 3}
        assert cli.main(["compare", "--config", write(tmp_path, data)]) == 2
        assert "arms.two.model" in capsys.readouterr().err

    def test_optimizer_comparison(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert cli.main(["compare", "--config", str(CONFIGS / "optimizers.yaml"), "--out", str(out)]) == 0
        table = json.loads((out / "summary.json").read_text())["winners"]["steps_to_threshold"]
        assert table["winner"] == "ec_momentum"
        assert "steps_to_threshold" in capsys.readouterr().out


class TestCheckAndExport:
    def test_check_passes(self, capsys):
        assert cli.main(["check"]) == 0
        out = capsys.readouterr().out
        assert any(line.startswith("FAIL (expected)") and "structure/printed-curl" in line
                   for line in out.splitlines())
        assert "all checks passed" in out

    def test_negative_control_fails(self, capsys):
        assert cli.main(["check", "--mismatch-noise-scaling"]) == 1
        assert "limit/decoupling" in capsys.readouterr().out.splitlines()[-1]

    def test_export(self, tmp_path):
        out = tmp_path / "run"
        cli.main(["run", "--config", write(tmp_path, SMALL), "--out", str(out), "--quiet"])
        assert cli.main(["export", str(out), "--out", str(tmp_path / "s.csv"), "--quiet"]) == 0
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 180
        samples = [json.loads(line) for line in (out / "samples.jsonl").read_text().splitlines()]
        np.testing.assert_array_equal([float(rows[0]["theta_0"]), float(rows[0]["theta_1"])], samples[0]["theta"])

    def test_export_bad_input(self, tmp_path):
        bad = tmp_path / "samples.jsonl"
        bad.write_text('{"theta": [1.0]}\n')
        assert cli.main(["export", str(bad), "--quiet"]) == 2
        assert cli.main(["export", str(tmp_path / "nope.jsonl"), "--quiet"]) == 2
