"""
Integration tests for the command line: exit codes, report files and
reproducibility across worker counts
"""

import json
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, EXIT_VERDICT, main

SMALL_RM3 = """
name = "small_rm3"

[model]
dimension = 1
period = ["2pi"]

[model.jumps]
kind = "atoms"
atoms = [[-1.0, 1.0], [1.0, 1.0]]

[tracer]
functions = [{ kind = "sin" }]

[run]
seed = 3
n_paths = 40
dt = 0.1
horizon = 1.0
n = 2
times = [1.0]
ladder = [1, 2]
paths_per_rung = 16

[output]
formats = ["json", "csv"]
paths = 2

[checks]
k_max = 10
dynkin_paths = 50
"""

SMALL_STABLE_LIKE = """
name = "small_stable_like"

[model]
dimension = 1
period = ["2pi"]
drift = { kind = "trig", base = 0.0, amplitude = 0.3, frequency = 1.0 }

[model.jumps]
kind = "stable"
alpha = { kind = "trig", base = 1.5, amplitude = 0.2, frequency = 1.0 }
gamma = 1.0

[tracer]
functions = [{ kind = "sin" }]

[run]
seed = 5
n_paths = 4
dt = 0.01
horizon = 0.5

[output]
formats = ["json", "csv"]

[checks]
pilot_horizon = 50.0
pilot_bins = 16
dynkin_paths = 20
dynkin_horizon = 0.1
quadrature_grid = 16
"""


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


@pytest.mark.integration
class TestUsage:
    """Test argument handling and exit codes"""

    def test_version(self, capsys):
        """Test --version exits cleanly"""
        assert run("--version") == EXIT_OK
        assert "tracer" in capsys.readouterr().out

    def test_missing_config_option(self):
        """Test that --config is required"""
        assert run("check") == EXIT_USAGE

    def test_unknown_command(self):
        """Test that unknown subcommands are usage errors"""
        assert run("plot", "--config", "x.toml") == EXIT_USAGE

    def test_malformed_config(self, write_config, tmp_path):
        """Test that a broken file exits with the configuration code"""
        path = write_config("[model\n")
        assert run("check", "--config", path, "--out", tmp_path / "out") == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        """Test that a missing file exits with the configuration code"""
        assert run("check", "--config", tmp_path / "absent.toml") == EXIT_USAGE

    def test_unexpected_error(self, mocker, config_dir):
        """Test that unexpected exceptions map to the numerical code"""
        mocker.patch("cli.load_experiment", side_effect=RuntimeError("boom"))
        assert run("check", "--config", config_dir / "rm3.toml") == EXIT_NUMERICAL


@pytest.mark.integration
class TestCheckCommand:
    """Test the structural and spectral checks"""

    def test_random_walk_passes(self, config_dir, tmp_path, capsys):
        """Test that the random walk passes every hard check"""
        out = tmp_path / "rm3"
        assert run("check", "--config", config_dir / "rm3.toml", "--out", out) == EXIT_OK
        body = read_json(out / "check.json")
        assert body["verdict"] == "pass"
        assert body["provenance"]["command"] == "check"
        assert (out / "check.csv").exists()
        assert (out / "manifest_check.json").exists()
        assert "status" in capsys.readouterr().out

    def test_pure_drift_fails(self, config_dir, tmp_path):
        """Test that the rotation fails spectral positivity"""
        out = tmp_path / "drift"
        assert run("check", "--config", config_dir / "pure_drift.toml", "--out", out) == EXIT_VERDICT
        assert read_json(out / "check.json")["verdict"] == "fail"


@pytest.mark.integration
class TestCovarianceCommand:
    """Test the theoretical covariance"""

    def test_random_walk_covariance(self, config_dir, tmp_path):
        """Test series and quadrature agree on 2 (1 - cos 1)"""
        out = tmp_path / "rm3"
        assert run("covariance", "--config", config_dir / "rm3.toml", "--out", out) == EXIT_OK
        series = read_json(out / "covariance_series.json")
        assert series["ergodic"][0][0] == pytest.approx(0.9193953882, abs=1e-9)
        assert read_json(out / "covariance.json")["max_discrepancy"] < 1e-8

    def test_pure_drift_needs_force(self, config_dir, tmp_path):
        """Test that failing hard checks block the covariance unless forced"""
        config = config_dir / "pure_drift.toml"
        assert run("covariance", "--config", config, "--out", tmp_path / "a") == EXIT_VERDICT
        assert run("covariance", "--config", config, "--out", tmp_path / "b", "--force") == EXIT_OK

    def test_constant_function_covariance(self, config_dir, tmp_path):
        """Test C = Sigma when the velocity vanishes"""
        out = tmp_path / "const"
        assert run("covariance", "--config", config_dir / "constant_w.toml", "--out", out) == EXIT_OK
        assert read_json(out / "covariance_quadrature.json")["total"] == [[1.0]]

    def test_state_dependent_needs_pilot(self, write_config, tmp_path):
        """Test that a state-dependent driver without a pilot is refused"""
        path = write_config(SMALL_STABLE_LIKE)
        assert run("covariance", "--config", path, "--out", tmp_path / "out") == EXIT_USAGE


@pytest.mark.integration
class TestSimulationCommands:
    """Test simulate, lln and clt end to end"""

    def test_simulate_dumps_paths(self, write_config, tmp_path):
        """Test path dumps, terminal values and the manifest"""
        out = tmp_path / "sim"
        code = run("simulate", "--config", write_config(SMALL_RM3), "--out", out)
        assert code in (EXIT_OK, EXIT_VERDICT)
        assert (out / "path_0000.csv").exists()
        assert (out / "path_0001.csv").exists()
        assert not (out / "path_0002.csv").exists()
        summary = read_json(out / "simulate.json")
        assert summary["jump_cap"]["passed"]
        assert len(summary["dynkin"]) == 1
        manifest = read_json(out / "manifest_simulate.json")
        assert manifest["n_paths"] == 40

    def test_pilot_enables_covariance(self, write_config, tmp_path):
        """Test that simulate --pilot stores the measure covariance reads"""
        path = write_config(SMALL_STABLE_LIKE)
        out = tmp_path / "stable_like"
        assert run("simulate", "--config", path, "--out", out, "--pilot") in (EXIT_OK, EXIT_VERDICT)
        assert (out / "pilot_histogram.json").exists()
        assert run("covariance", "--config", path, "--out", out) == EXIT_OK
        report = read_json(out / "covariance_quadrature.json")
        assert report["invariant"] == "empirical"
        assert report["ergodic"][0][0] > 0

    def test_lln_is_reproducible_across_workers(self, write_config, tmp_path):
        """Test byte-identical LLN reports on one and two workers"""
        path = write_config(SMALL_RM3)
        first, second = tmp_path / "one", tmp_path / "two"
        assert run("lln", "--config", path, "--out", first, "--workers", 1) in (EXIT_OK, EXIT_VERDICT)
        assert run("lln", "--config", path, "--out", second, "--workers", 2) in (EXIT_OK, EXIT_VERDICT)
        assert (first / "lln.csv").read_bytes() == (second / "lln.csv").read_bytes()
        assert (first / "lln.json").read_bytes() == (second / "lln.json").read_bytes()

    def test_seed_override_changes_results(self, write_config, tmp_path):
        """Test that --seed changes the hash and the draws"""
        path = write_config(SMALL_RM3)
        run("lln", "--config", path, "--out", tmp_path / "a")
        run("lln", "--config", path, "--out", tmp_path / "b", "--seed", 99)
        a = read_json(tmp_path / "a" / "lln.json")
        b = read_json(tmp_path / "b" / "lln.json")
        assert a["provenance"]["config_hash"] != b["provenance"]["config_hash"]
        assert a["rungs"] != b["rungs"]

    def test_clt_writes_report(self, write_config, tmp_path):
        """Test that clt compares against the theoretical covariance"""
        out = tmp_path / "clt"
        code = run("clt", "--config", write_config(SMALL_RM3), "--out", out)
        assert code in (EXIT_OK, EXIT_VERDICT)
        report = read_json(out / "clt.json")
        assert report["verdict"] in ("pass", "fail")
        assert report["covariance"]["method"] == "series"
        assert report["rows"][0]["theoretical"][0][0] == pytest.approx(0.9193953882, abs=1e-9)
