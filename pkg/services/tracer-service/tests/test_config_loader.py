"""
Tests for experiment configuration loading, validation and hashing
"""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from errors import ConfigError, ModelError
from models import JumpCapReport, SymmetricStable, TrigField
from services.config_loader import build_experiment, canonical, config_hash, load_experiment, parse_number

TWO_PI = 2.0 * np.pi

SHIPPED = [
    "rm3",
    "brownian",
    "stable",
    "pure_drift",
    "kappa",
    "constant_w",
    "stable_like",
    "periodic_density",
]

MINIMAL = """
[model]
dimension = 1
period = ["2pi"]

[model.jumps]
kind = "atoms"
atoms = [[-1.0, 1.0], [1.0, 1.0]]

[tracer]
functions = [{ kind = "sin" }]

[run]
seed = 7
"""


@pytest.fixture
def minimal_raw():
    return {
        "model": {
            "dimension": 1,
            "period": ["2pi"],
            "jumps": {"kind": "atoms", "atoms": [[-1.0, 1.0], [1.0, 1.0]]},
        },
        "tracer": {"functions": [{"kind": "sin"}]},
        "run": {"seed": 7},
    }


@pytest.mark.unit
class TestParseNumber:
    """Test numeric literals with multiples of pi"""

    @pytest.mark.parametrize(
        "text, expected",
        [
            ("2pi", TWO_PI),
            ("0.5*pi", 0.5 * np.pi),
            ("pi", np.pi),
            ("-pi", -np.pi),
            ("1.25", 1.25),
            (3, 3.0),
        ],
    )
    def test_accepted_forms(self, text, expected):
        """Test the accepted spellings"""
        assert parse_number(text) == pytest.approx(expected)

    @pytest.mark.parametrize("text", ["two", "pi2", True, None])
    def test_rejected_forms(self, text):
        """Test that anything else is a configuration error"""
        with pytest.raises(ConfigError):
            parse_number(text)


@pytest.mark.unit
class TestLoadExperiment:
    """Test reading TOML files"""

    @pytest.mark.parametrize("name", SHIPPED)
    def test_shipped_configs_load(self, config_dir, name):
        """Test that every shipped example validates"""
        experiment = load_experiment(config_dir / f"{name}.toml")
        assert experiment.name == name
        assert experiment.tracer is not None
        assert len(experiment.config_hash) == 64

    def test_minimal_config(self, write_config):
        """Test defaults filled into a minimal file"""
        experiment = load_experiment(write_config(MINIMAL))
        assert experiment.model.period == pytest.approx((TWO_PI,))
        assert experiment.run.seed == 7
        assert experiment.run.n_paths == 400
        assert experiment.output.formats == ["json", "csv", "text"]
        assert experiment.checks.convention == "per_axis"
        assert experiment.tracer.functions[0](np.pi / 2) == pytest.approx(1.0)

    def test_missing_file(self, tmp_path):
        """Test that a missing file is a configuration error"""
        with pytest.raises(ConfigError, match="not found"):
            load_experiment(tmp_path / "nope.toml")

    def test_malformed_toml(self, write_config):
        """Test that syntax errors are configuration errors"""
        with pytest.raises(ConfigError, match="cannot parse"):
            load_experiment(write_config("[model\ndimension = 1"))

    def test_stable_like_fields(self, config_dir):
        """Test that trig tables become state-dependent fields"""
        experiment = load_experiment(config_dir / "stable_like.toml")
        jumps = experiment.model.jumps
        assert isinstance(jumps, SymmetricStable)
        assert isinstance(jumps.alpha, TrigField)
        assert not experiment.model.is_levy


@pytest.mark.unit
class TestValidation:
    """Test rejection of invalid configurations"""

    def test_unknown_key_is_named(self, minimal_raw):
        """Test that typos are reported by name"""
        minimal_raw["run"]["n_pahts"] = 10
        with pytest.raises(ConfigError, match="n_pahts"):
            build_experiment(minimal_raw)

    def test_unknown_section(self, minimal_raw):
        """Test that unknown top-level tables are rejected"""
        minimal_raw["plots"] = {}
        with pytest.raises(ConfigError, match="plots"):
            build_experiment(minimal_raw)

    def test_missing_seed(self, minimal_raw):
        """Test that a seed is required"""
        del minimal_raw["run"]["seed"]
        with pytest.raises(ConfigError, match="seed"):
            build_experiment(minimal_raw)

    def test_seed_from_command_line(self, minimal_raw):
        """Test that --seed supplies a missing seed"""
        del minimal_raw["run"]["seed"]
        assert build_experiment(minimal_raw, seed=11).run.seed == 11

    def test_negative_period(self, minimal_raw):
        """Test that periods must be positive"""
        minimal_raw["model"]["period"] = [-1.0]
        with pytest.raises(ConfigError):
            build_experiment(minimal_raw)

    def test_missing_dimension(self, minimal_raw):
        """Test that the model dimension is required"""
        del minimal_raw["model"]["dimension"]
        with pytest.raises(ConfigError):
            build_experiment(minimal_raw)

    def test_unknown_format(self, minimal_raw):
        """Test that output formats are validated"""
        minimal_raw["output"] = {"formats": ["json", "xlsx"]}
        with pytest.raises(ConfigError, match="xlsx"):
            build_experiment(minimal_raw)

    def test_unknown_jump_kind(self, minimal_raw):
        """Test that jump kinds are validated"""
        minimal_raw["model"]["jumps"] = {"kind": "levy"}
        with pytest.raises(ConfigError):
            build_experiment(minimal_raw)

    def test_atom_rows_match_dimension(self, minimal_raw):
        """Test that atom rows hold coordinates and a rate"""
        minimal_raw["model"]["jumps"]["atoms"] = [[1.0]]
        with pytest.raises(ConfigError):
            build_experiment(minimal_raw)

    def test_bad_method(self, minimal_raw):
        """Test that simulation methods are validated"""
        minimal_raw["run"]["method"] = "milstein"
        with pytest.raises(ConfigError):
            build_experiment(minimal_raw)

    def test_model_errors_pass_through(self, minimal_raw):
        """Test that model invariants surface as model errors"""
        minimal_raw["model"]["jumps"]["atoms"] = [[0.0, 1.0]]
        with pytest.raises(ModelError):
            build_experiment(minimal_raw)


@pytest.mark.unit
class TestTracerSection:
    """Test test-function and tracer parsing"""

    def test_function_kinds(self, minimal_raw):
        """Test sin, cos, const and terms entries"""
        minimal_raw["tracer"]["functions"] = [
            {"kind": "sin", "mode": 2, "amplitude": 0.5, "label": "half"},
            {"kind": "cos"},
            {"kind": "const", "value": 2.0},
            {"kind": "terms", "terms": [[1, 0.0, -0.5], [-1, 0.0, 0.5]]},
        ]
        functions = build_experiment(minimal_raw).tracer.functions
        assert functions[0].label == "half"
        assert functions[0](np.pi / 4) == pytest.approx(0.5)
        assert functions[1](0.0) == pytest.approx(1.0)
        assert functions[2].is_constant()
        assert functions[3](np.pi / 2) == pytest.approx(1.0)
        assert functions[3].label == "terms"

    def test_sigma_and_drift(self, minimal_raw):
        """Test noise covariance, random drift and start"""
        minimal_raw["tracer"].update(
            {"sigma": 2.0, "x0": 1.0, "drift": {"kind": "normal", "mean": 0.1, "cov": 0.5}}
        )
        tracer = build_experiment(minimal_raw).tracer
        np.testing.assert_allclose(tracer.noise_cov, [[2.0]])
        np.testing.assert_allclose(tracer.x0, [1.0])
        np.testing.assert_allclose(tracer.mean_drift, [0.1])

    def test_tracer_period_required(self, minimal_raw):
        """Test that a non-periodic model needs a tracer period"""
        del minimal_raw["model"]["period"]
        with pytest.raises(ConfigError, match="period"):
            build_experiment(minimal_raw)

    def test_empty_function_list(self, minimal_raw):
        """Test that at least one test function is required"""
        minimal_raw["tracer"]["functions"] = []
        with pytest.raises(ConfigError):
            build_experiment(minimal_raw)


@pytest.mark.unit
class TestConfigHash:
    """Test the reproducibility hash"""

    def test_hash_is_stable(self, config_dir):
        """Test that loading twice gives one hash"""
        a = load_experiment(config_dir / "rm3.toml")
        b = load_experiment(config_dir / "rm3.toml")
        assert a.config_hash == b.config_hash

    def test_key_order_does_not_matter(self, minimal_raw):
        """Test canonical ordering"""
        reordered = {key: minimal_raw[key] for key in reversed(list(minimal_raw))}
        assert config_hash(reordered) == config_hash(minimal_raw)

    def test_workers_and_out_dir_are_not_hashed(self, minimal_raw):
        """Test that execution-only overrides keep the hash"""
        base = build_experiment(minimal_raw).config_hash
        assert build_experiment(minimal_raw, workers=4).config_hash == base
        assert build_experiment(minimal_raw, out_dir="elsewhere").config_hash == base

    def test_out_dir_without_output_table(self, minimal_raw):
        """Test that --out keeps the hash when the file has no [output] table"""
        assert "output" not in minimal_raw
        base = build_experiment(minimal_raw).config_hash
        assert build_experiment(minimal_raw, out_dir="elsewhere").config_hash == base

    def test_canonical_unwraps_numpy_bools(self):
        """Test that numpy booleans become JSON booleans"""
        report = JumpCapReport(n=4, max_jump=np.float64(0.1), cap=1.0, tolerance=0.0)
        payload = canonical({"passed": np.bool_(True), "report": report.to_dict()})
        assert json.loads(json.dumps(payload)) == {
            "passed": True,
            "report": {"n": 4, "max_jump": 0.1, "cap": 1.0, "tolerance": 0.0, "passed": True},
        }

    def test_seed_override_changes_hash(self, minimal_raw):
        """Test that a new seed is a new experiment"""
        base = build_experiment(minimal_raw).config_hash
        assert build_experiment(minimal_raw, seed=8).config_hash != base

    def test_input_is_not_mutated(self, minimal_raw):
        """Test that overrides leave the caller's dictionary alone"""
        build_experiment(minimal_raw, seed=9, out_dir="x")
        assert minimal_raw["run"]["seed"] == 7
        assert "output" not in minimal_raw
