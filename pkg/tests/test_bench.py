import csv
import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from mkmcdse.bench.cli import EXIT_CONFIG, EXIT_OK, bundled_configs, main
from mkmcdse.bench.config import ConfigError, load_config, parse_config
from mkmcdse.bench.metrics import armse, mae, rmse
from mkmcdse.bench.runner import run_scenario, run_single
from mkmcdse.kernels import MkmcKernel, NoKernel

SMALL = """
[model]
kind = "vehicle"

[noise]
kind = "mixed_gaussian"

[network]
nodes = 3
consensus_L = 2

[filters]
names = ["DEKF", "AMKMMC-RDEKF"]

[run]
horizon = 12
mc_runs = 2
seed = 5
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def doc(**sections):
    base = {"model": {"kind": "vehicle"}, "noise": {"kind": "rayleigh"}, "network": {}, "filters": {}, "run": {}}
    base.update(sections)
    return base


class TestConfig:
    def test_bundled_configs_valid(self):
        shipped = bundled_configs()
        assert sorted(shipped) == ["scenario1_power_mixed", "scenario2_power_load_drop",
                                   "scenario3_vehicle_rayleigh", "scenario4_vehicle_packet_loss"]
        for path in shipped.values():
            load_config(path)

    def test_auto_noise_variance(self):
        assert parse_config(doc()).model_params["r_var"] == pytest.approx(18.0)
        cfg = parse_config(doc(model={"kind": "power-ieee14"}, noise={"kind": "mixed_gaussian", "scale": 0.1}))
        assert cfg.model_params["r_var"] == pytest.approx(0.1504)
        assert parse_config(doc(model={"kind": "vehicle", "r_var": 2.5})).model_params["r_var"] == 2.5

    def test_defaults(self):
        cfg = parse_config(doc())
        assert [f.name for f in cfg.filters] == ["DEKF", "MCC-DEKF", "MMC-DEKF", "MKMMC-DEKF", "AMKMMC-RDEKF"]
        assert cfg.nodes == 10 and cfg.consensus_L == 3 and len(cfg.topology().edges) == 12
        amk = cfg.filters[-1]
        assert amk.adaptive and amk.update.gate
        assert isinstance(cfg.filters[0].update.kernel, NoKernel)

    def test_filter_overrides(self):
        cfg = parse_config(doc(filters={"names": ["MKMMC-DEKF"], "MKMMC-DEKF": {"theta": 0.25, "gate": True}}))
        f = cfg.filters[0]
        assert isinstance(f.update.kernel, MkmcKernel) and f.update.kernel.params.theta == 0.25 and f.update.gate

    def test_calibrated_weight(self):
        cfg = parse_config(doc(filters={"names": ["MKMMC-DEKF"], "MKMMC-DEKF": {"theta": "calibrate"}}))
        assert 0.0 <= cfg.filters[0].update.kernel.params.theta <= 1.0

    @pytest.mark.parametrize("bad", [
        {"model": {"kind": "boat"}},
        {"model": {"kind": "vehicle", "wheels": 4}},
        {"model": {"kind": "vehicle", "r_var": -1.0}},
        {"noise": {"kind": "rayleigh", "scale": 0}},
        {"noise": {"kind": "uniform"}},
        {"network": {"nodes": 0}},
        {"network": {"consensus_L": -1}},
        {"network": {"nodes": 4, "edges": [[1, 2], [3, 4]]}},
        {"filters": {"names": ["DEKF", "DEKF"]}},
        {"filters": {"names": ["UKF"]}},
        {"filters": {"names": ["DEKF"], "MCC-DEKF": {"sigma": 2.0}}},
        {"filters": {"names": ["MKMMC-DEKF"], "MKMMC-DEKF": {"alpha": -1.0}}},
        {"filters": {"names": ["DEKF"], "DEKF": {"bogus": 1}}},
        {"run": {"horizon": 0}},
        {"run": {"report_node": 11}},
        {"events": {"load_drop": {"bus": 8, "fraction": 0.1, "step": 5}}},
        {"extra": {}},
    ])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            parse_config(doc(**bad))

    def test_missing_section(self):
        d = doc()
        del d["run"]
        with pytest.raises(ConfigError):
            parse_config(d)

    def test_unreadable_file(self, tmp_path):
        p = tmp_path / "x.toml"
        p.write_text("[model\n")
        with pytest.raises(ConfigError):
            load_config(p)


class TestMetrics:
    def test_rmse_mae(self):
        truth = np.zeros((2, 3, 2))
        est = np.zeros((2, 3, 2))
        est[0, :, 0] = 3.0
        est[0, :, 1] = 4.0
        # per run squared norms 25 and 0
        np.testing.assert_allclose(rmse(truth, est), np.full(3, np.sqrt(12.5)))
        np.testing.assert_allclose(rmse(truth, est, slice(0, 1)), np.full(3, np.sqrt(4.5)))
        np.testing.assert_allclose(mae(truth, est), np.full(3, 7 / 4))
        assert armse(np.array([1.0, 2.0, 3.0])) == 2.0

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            armse(np.array([]))


class TestRunner:
    def test_run_is_reproducible(self, small):
        cfg = load_config(small)
        a, b = run_single(cfg, 1), run_single(cfg, 1)
        for name in a.estimates:
            np.testing.assert_array_equal(a.estimates[name], b.estimates[name])
        assert a.trace["AMKMMC-RDEKF"].shape == (12, 3, 6)
        assert a.trace["DEKF"] is None

    def test_runs_differ(self, small):
        cfg = load_config(small)
        assert not np.array_equal(run_single(cfg, 0).truth, run_single(cfg, 1).truth)

    def test_parallel_matches_serial(self, small):
        cfg = load_config(small)
        a, b = run_scenario(cfg, workers=1), run_scenario(cfg, workers=2)
        for f in a.filters():
            for g in a.groups:
                np.testing.assert_array_equal(a.rmse[f][g], b.rmse[f][g])


@pytest.mark.slow
def test_median_iterations_on_benchmarks():
    # loose check of the fixed-point cost on both plants
    for name in ("scenario1_power_mixed", "scenario3_vehicle_rayleigh"):
        cfg = load_config(bundled_configs()[name])
        cfg = replace(cfg, mc_runs=1, horizon=30,
                      filters=tuple(f for f in cfg.filters if f.name in ("MKMMC-DEKF", "AMKMMC-RDEKF")))
        res = run_single(cfg, 0)
        for f, it in res.iterations.items():
            assert np.median(it) <= 10, (name, f)
            assert it.max() <= 50


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestCli:
    def test_validate(self, small, capsys):
        assert main(["validate", str(small)]) == EXIT_OK
        assert "ok" in capsys.readouterr().out
        assert main(["validate", "scenario3_vehicle_rayleigh"]) == EXIT_OK

    def test_config_errors(self, tmp_path):
        assert main(["validate", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
        bad = tmp_path / "bad.toml"
        bad.write_text(SMALL.replace('kind = "vehicle"', 'kind = "boat"'))
        assert main(["validate", str(bad)]) == EXIT_CONFIG
        assert main(["simulate"]) == EXIT_CONFIG
        assert main(["frobnicate", "x"]) == EXIT_CONFIG

    def test_bad_overrides(self, small, tmp_path):
        assert main(["simulate", str(small), "--runs", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert main(["sweep-L", str(small), "--values", "1,x", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_simulate_outputs(self, small, tmp_path):
        out = tmp_path / "res"
        assert main(["simulate", str(small), "--out", str(out)]) == EXIT_OK
        names = sorted(p.name for p in out.iterdir())
        assert names == ["armse.csv", "iterations.csv", "mae.csv", "min_eig.csv", "rmse.csv", "summary.json"]
        rows = read_csv(out / "rmse.csv")
        assert rows[0] == ["step", "filter", "group", "value"]
        assert len(rows) == 1 + 2 * 2 * 12
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seed"] == 5 and "seconds_per_step" not in summary
        assert set(summary["armse"]) == {"DEKF", "AMKMMC-RDEKF"}

    def test_timing_opt_in(self, small, tmp_path):
        main(["simulate", str(small), "--out", str(tmp_path), "--timing", "--runs", "1"])
        assert "seconds_per_step" in json.loads((tmp_path / "summary.json").read_text())

    def test_simulate_deterministic(self, small, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", str(small), "--out", str(a)])
        main(["simulate", str(small), "--out", str(b)])
        for p in a.iterdir():
            assert p.read_bytes() == (b / p.name).read_bytes()

    def test_seed_override_changes_results(self, small, tmp_path):
        main(["simulate", str(small), "--out", str(tmp_path / "a")])
        main(["simulate", str(small), "--out", str(tmp_path / "b"), "--seed", "6"])
        assert (tmp_path / "a" / "rmse.csv").read_bytes() != (tmp_path / "b" / "rmse.csv").read_bytes()

    def test_sweep_rows(self, small, tmp_path):
        assert main(["sweep-L", str(small), "--values", "0,1,3", "--out", str(tmp_path), "--runs", "1"]) == EXIT_OK
        rows = read_csv(tmp_path / "sweep_L.csv")
        assert rows[0] == ["L", "filter", "position", "velocity"]
        keys = [(r[0], r[1]) for r in rows[1:]]
        assert len(keys) == len(set(keys)) == 6

    def test_adapt_demo(self, small, tmp_path):
        assert main(["adapt-demo", str(small), "--out", str(tmp_path)]) == EXIT_OK
        rows = read_csv(tmp_path / "adapt_trace.csv")
        assert rows[0] == ["step", "filter", "node", "theta", "alpha", "omega", "lam", "a1", "a2"]
        assert len(rows) == 1 + 12 * 3

    def test_adapt_demo_needs_adaptive_filter(self, small, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(SMALL.replace('["DEKF", "AMKMMC-RDEKF"]', '["DEKF"]'))
        assert main(["adapt-demo", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_console_script(self, small):
        r = subprocess.run([sys.executable, "-m", "mkmcdse.bench.cli", "validate", str(small)],
                           capture_output=True, text=True)
        assert r.returncode == 0 and "ok" in r.stdout
