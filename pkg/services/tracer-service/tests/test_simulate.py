"""
Tests for driving path simulation, tracer paths and reproducible ensembles
"""

import os
import sys

import numpy as np
import pytest
from scipy import stats as sps

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from errors import ConfigError, HorizonError, ModelError, NonLevyError
from models import Atoms, DrivingModel, PointDrift, SymmetricStable, TracerModel, TrigField
from services.simulate import (
    DRIVING,
    TRACER,
    PathSimulator,
    RunSpec,
    Stream,
    TerminalState,
    TracerAt,
    steps_for,
)
from services.torus import constant

TWO_PI = 2.0 * np.pi


def terminal_values(simulator, spec, workers=1):
    return np.array([x for _, x in simulator.ensemble(spec, TerminalState(), workers=workers)])


@pytest.mark.unit
class TestStreams:
    """Test per-path random streams and the time grid"""

    def test_same_identity_same_draws(self):
        """Test that a stream identity fixes its draws"""
        a = Stream(7, path_id=3, tag=1).generator(DRIVING).standard_normal(5)
        b = Stream(7, path_id=3, tag=1).generator(DRIVING).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_purposes_are_independent(self):
        """Test that each purpose gets its own stream"""
        stream = Stream(7, path_id=3)
        a = stream.generator(DRIVING).standard_normal(5)
        b = stream.generator(TRACER).standard_normal(5)
        assert not np.allclose(a, b)

    def test_path_ids_differ(self):
        """Test that neighbouring paths draw different numbers"""
        a = Stream(7, path_id=0).generator(DRIVING).random()
        b = Stream(7, path_id=1).generator(DRIVING).random()
        assert a != b

    def test_invalid_seed(self):
        """Test that seeds must be nonnegative integers"""
        with pytest.raises(ConfigError):
            Stream(-1)
        with pytest.raises(ConfigError):
            Stream(1.5)

    def test_steps_for(self):
        """Test the whole-step horizon rule"""
        assert steps_for(0.1, 1.0) == 10
        assert steps_for(0.01, 5.0) == 500
        with pytest.raises(HorizonError):
            steps_for(0.3, 1.0)
        with pytest.raises(HorizonError):
            steps_for(0.0, 1.0)

    def test_run_spec_validation(self, rm3_model):
        """Test ensemble parameter checks"""
        with pytest.raises(ConfigError):
            RunSpec(rm3_model, n_paths=10, dt=0.1, horizon=1.0, seed=1, method="exact")
        with pytest.raises(ConfigError):
            RunSpec(rm3_model, n_paths=0, dt=0.1, horizon=1.0, seed=1)
        with pytest.raises(HorizonError):
            RunSpec(rm3_model, n_paths=1, dt=0.3, horizon=1.0, seed=1)


@pytest.mark.unit
class TestLevyPaths:
    """Test exact increments for constant-coefficient drivers"""

    def test_pure_drift_is_exact(self, simulator, pure_drift_model):
        """Test L_t = L_0 + t with no randomness"""
        path = simulator.levy_path(pure_drift_model, [0.5], 0.1, 1.0, Stream(1))
        np.testing.assert_allclose(path.states[:, 0], 0.5 + path.times, atol=1e-12)
        assert path.jump_times.size == 0

    def test_jump_log_matches_increment(self, simulator, rm3_model):
        """Test that logged jumps add up to the path increment"""
        path = simulator.levy_path(rm3_model, [0.0], 0.01, 5.0, Stream(11))
        assert path.jump_sizes.shape[0] == path.jump_times.shape[0]
        np.testing.assert_allclose(path.jump_sizes.sum(axis=0), path.states[-1] - path.states[0])
        assert np.all(np.diff(path.jump_times) > 0)
        assert np.all((path.jump_times > 0) & (path.jump_times < 5.0))
        assert set(np.abs(path.jump_sizes[:, 0])) <= {1.0}

    def test_jump_count_matches_rate(self, simulator, rm3_model):
        """Test E N_1 = nu(R) = 2 for the random walk"""
        counts = [
            simulator.levy_path(rm3_model, [0.0], 0.1, 1.0, Stream(5, path_id=i)).jump_times.size
            for i in range(2000)
        ]
        assert np.mean(counts) == pytest.approx(2.0, abs=0.15)

    def test_brownian_variance(self, simulator, brownian_model):
        """Test Var B_1 = 1"""
        spec = RunSpec(brownian_model, n_paths=4000, dt=0.1, horizon=1.0, seed=3)
        values = terminal_values(simulator, spec)[:, 0]
        assert np.var(values) == pytest.approx(1.0, abs=0.1)
        assert np.mean(values) == pytest.approx(0.0, abs=0.06)

    def test_stable_characteristic_function(self, simulator, stable_model):
        """Test E cos(L_1) = exp(-1) for the symbol |xi|^1.5"""
        spec = RunSpec(stable_model, n_paths=4000, dt=0.25, horizon=1.0, seed=9)
        values = terminal_values(simulator, spec)[:, 0]
        assert np.mean(np.cos(values)) == pytest.approx(np.exp(-1.0), abs=0.05)

    def test_state_dependent_model_rejected(self, simulator):
        """Test that exact increments need constant coefficients"""
        model = DrivingModel(dim=1, drift=TrigField([0.0], [0.3], [1.0]), period=(TWO_PI,))
        with pytest.raises(NonLevyError):
            simulator.levy_path(model, [0.0], 0.1, 1.0, Stream(1))

    def test_shift_equivariance(self, simulator, rm3_model):
        """Test that moving the start moves the whole path"""
        a = simulator.levy_path(rm3_model, [0.0], 0.1, 2.0, Stream(4))
        b = simulator.levy_path(rm3_model, [1.5], 0.1, 2.0, Stream(4))
        np.testing.assert_allclose(b.states - a.states, 1.5)
        np.testing.assert_array_equal(a.jump_times, b.jump_times)


@pytest.mark.unit
class TestEulerPaths:
    """Test the Euler scheme for state-dependent drivers"""

    def test_brownian_variance(self, simulator, brownian_model):
        """Test that Euler reproduces Var B_1 = 1"""
        spec = RunSpec(brownian_model, n_paths=4000, dt=0.05, horizon=1.0, seed=3, method="euler")
        values = terminal_values(simulator, spec)[:, 0]
        assert np.var(values) == pytest.approx(1.0, abs=0.1)

    def test_rate_bound(self, simulator):
        """Test that rate * dt above the limit is refused"""
        model = DrivingModel(dim=1, jumps=Atoms([[1.0]], [100.0]), period=(TWO_PI,))
        with pytest.raises(HorizonError):
            simulator.feller_path(model, [0.0], 0.01, 1.0, Stream(1))

    def test_state_dependent_drift(self, simulator):
        """Test a deterministic flow dx = (1 + 0.3 cos x) dt stays monotone"""
        model = DrivingModel(dim=1, drift=TrigField([1.0], [0.3], [1.0]), period=(TWO_PI,))
        path = simulator.feller_path(model, [0.0], 0.01, 2.0, Stream(1))
        assert np.all(np.diff(path.states[:, 0]) > 0)
        assert path.states[-1, 0] == pytest.approx(2.0, abs=0.4)

    def test_stable_like_paths_are_finite(self, simulator):
        """Test Euler steps for a stable-like driver"""
        jumps = SymmetricStable(TrigField(1.5, 0.2, [1.0]), 1.0)
        model = DrivingModel(dim=1, jumps=jumps, period=(TWO_PI,))
        spec = RunSpec(model, n_paths=16, dt=0.01, horizon=1.0, seed=2)
        values = terminal_values(simulator, spec)
        assert values.shape == (16, 1)
        assert np.all(np.isfinite(values))

    def test_batch_composition_does_not_matter(self, generator, brownian_model):
        """Test that chunk size leaves every Euler path unchanged"""
        spec = RunSpec(brownian_model, n_paths=12, dt=0.05, horizon=1.0, seed=8, method="euler")
        a = terminal_values(PathSimulator(generator, chunk_paths=12), spec)
        b = terminal_values(PathSimulator(generator, chunk_paths=5), spec)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_jump_log_in_euler(self, simulator, rm3_model):
        """Test the Euler jump log against the path increment"""
        path = simulator.feller_path(rm3_model, [0.0], 0.01, 5.0, Stream(21))
        np.testing.assert_allclose(path.jump_sizes.sum(axis=0), path.states[-1] - path.states[0])


@pytest.mark.unit
class TestTracerPaths:
    """Test X_t = x0 + D t + int v(F_s) ds + Sigma^{1/2} B_t"""

    def test_zero_velocity_is_exact(self, simulator, rm3_model, period):
        """Test that a constant test function leaves only the drift"""
        tm = TracerModel(rm3_model, [constant(1.0, period)], drift_law=PointDrift([0.5]), x0=[1.0])
        driving = simulator.levy_path(rm3_model, [0.0], 0.1, 2.0, Stream(6))
        tracer = simulator.tracer_path(tm, driving, Stream(6))
        np.testing.assert_allclose(tracer.values[:, 0], 1.0 + 0.5 * driving.times, atol=1e-12)

    def test_pure_drift_integral(self, simulator, pure_drift_model, sin_w):
        """Test int_0^t cos(s) ds = sin t up to the trapezoid error"""
        tm = TracerModel(pure_drift_model, [sin_w])
        driving = simulator.levy_path(pure_drift_model, [0.0], 0.01, 3.0, Stream(1))
        tracer = simulator.tracer_path(tm, driving, Stream(1))
        np.testing.assert_allclose(tracer.values[:, 0], np.sin(driving.times), atol=1e-4)

    def test_noise_covariance(self, simulator, rm3_model, period):
        """Test Cov(Sigma^{1/2} B_1) = Sigma"""
        tm = TracerModel(rm3_model, [constant(1.0, period)], noise_cov=[[1.0]])
        spec = RunSpec(rm3_model, n_paths=4000, dt=0.1, horizon=1.0, seed=12, tracer=tm)
        values = np.array([r["x"][0, 0] for _, r in simulator.ensemble(spec, TracerAt(1.0))])
        assert np.var(values) == pytest.approx(1.0, abs=0.1)

    def test_period_mismatch(self, simulator, rm3_tracer):
        """Test that a driving path from another torus is rejected"""
        model = DrivingModel(dim=1, drift=[1.0], period=(3.0,))
        driving = simulator.levy_path(model, [0.0], 0.1, 1.0, Stream(1))
        with pytest.raises(ModelError):
            simulator.tracer_path(rm3_tracer, driving, Stream(1))

    def test_tracer_at_beyond_horizon(self, simulator, rm3_tracer, rm3_model):
        """Test that sampling past the horizon fails"""
        driving = simulator.levy_path(rm3_model, [0.0], 0.1, 1.0, Stream(1))
        tracer = simulator.tracer_path(rm3_tracer, driving, Stream(1))
        with pytest.raises(HorizonError):
            TracerAt([0.5, 2.0])(0, tracer)

    def test_velocity_is_cached(self, simulator, rm3_tracer, mocker):
        """Test that one tracer model builds its velocity once"""
        spy = mocker.spy(simulator.generator, "velocity")
        simulator.velocity_for(rm3_tracer)
        simulator.velocity_for(rm3_tracer)
        assert spy.call_count == 1


@pytest.mark.unit
class TestEnsembles:
    """Test reproducibility of ensembles"""

    def test_same_seed_same_ensemble(self, simulator, rm3_model):
        """Test bitwise reproducibility for a fixed seed"""
        spec = RunSpec(rm3_model, n_paths=20, dt=0.1, horizon=1.0, seed=42)
        np.testing.assert_array_equal(terminal_values(simulator, spec), terminal_values(simulator, spec))

    def test_seed_changes_ensemble(self, simulator, brownian_model):
        """Test that a new seed gives new paths"""
        a = terminal_values(simulator, RunSpec(brownian_model, n_paths=20, dt=0.1, horizon=1.0, seed=1))
        b = terminal_values(simulator, RunSpec(brownian_model, n_paths=20, dt=0.1, horizon=1.0, seed=2))
        assert not np.allclose(a, b)

    def test_results_in_path_order(self, simulator, rm3_model):
        """Test that ensembles yield path ids in order"""
        spec = RunSpec(rm3_model, n_paths=19, dt=0.1, horizon=1.0, seed=1)
        ids = [pid for pid, _ in simulator.ensemble(spec, TerminalState())]
        assert ids == list(range(19))

    def test_tag_separates_experiments(self, simulator, brownian_model):
        """Test that the stream tag changes the draws"""
        a = terminal_values(simulator, RunSpec(brownian_model, n_paths=5, dt=0.1, horizon=1.0, seed=1, tag=100))
        b = terminal_values(simulator, RunSpec(brownian_model, n_paths=5, dt=0.1, horizon=1.0, seed=1, tag=101))
        assert not np.allclose(a, b)


@pytest.mark.integration
class TestParallelEnsembles:
    """Test that the worker count never changes the results"""

    def test_one_and_two_workers_agree(self, simulator, rm3_tracer, rm3_model):
        """Test identical tracer ensembles on one and two workers"""
        spec = RunSpec(rm3_model, n_paths=24, dt=0.1, horizon=1.0, seed=5, tracer=rm3_tracer)
        serial = [r["x"] for _, r in simulator.ensemble(spec, TracerAt(1.0), workers=1)]
        parallel = [r["x"] for _, r in simulator.ensemble(spec, TracerAt(1.0), workers=2)]
        np.testing.assert_array_equal(np.array(serial), np.array(parallel))

    def test_euler_one_and_two_workers_agree(self, simulator, brownian_model):
        """Test identical Euler ensembles on one and two workers"""
        spec = RunSpec(brownian_model, n_paths=20, dt=0.05, horizon=1.0, seed=5, method="euler")
        np.testing.assert_array_equal(
            terminal_values(simulator, spec, workers=1), terminal_values(simulator, spec, workers=2)
        )


@pytest.mark.slow
class TestExactAndEulerAgree:
    """Test that the Euler scheme reproduces the exact law for constant coefficients"""

    @pytest.mark.parametrize("model_name", ["rm3_model", "brownian_model", "stable_model"])
    def test_marginals_match(self, request, simulator, model_name):
        """Test a two-sample KS on F_1 from both simulators at dt = 1e-3"""
        model = request.getfixturevalue(model_name)
        exact = RunSpec(model, n_paths=4000, dt=1e-3, horizon=1.0, seed=31, method="levy")
        euler = RunSpec(model, n_paths=4000, dt=1e-3, horizon=1.0, seed=32, method="euler")
        a = terminal_values(simulator, exact)[:, 0]
        b = terminal_values(simulator, euler)[:, 0]
        assert sps.ks_2samp(a, b).pvalue > 0.01
