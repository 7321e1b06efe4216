"""
Ergodic limit objects: time averages, occupation measures on the torus,
modified characteristics along paths and the limiting covariance.
"""

import logging
from typing import Callable, Optional, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from config import (
    DEFAULT_DT,
    DEFAULT_WORKERS,
    HISTOGRAM_BINS,
    PILOT_BURN_IN,
    PILOT_HORIZON,
    PSD_TOL,
    QUADRATURE_GRID,
    TV_BINS,
    TV_MIN_PATHS,
    TV_PATHS_PER_START,
    TV_STARTS_PER_AXIS,
)
from errors import ConfigError, HorizonError, ModelError, NonLevyError
from models import CovarianceReport, DrivingModel, OccupationHistogram, PathSample, TVDecayReport
from services.generator import GeneratorService
from services.simulate import INITIAL, PathSimulator, RunSpec, Stream, steps_for
from services.symbols import SymbolService
from services.torus import PeriodicFunction, project, torus_grid

logger = logging.getLogger(__name__)

PILOT_TAG = 7001
TV_TAG = 8001


def _shared_period(functions: list) -> tuple:
    periods = {f.period for f in functions}
    if len(periods) != 1:
        raise ModelError(f"test functions must share one period, got {sorted(periods)}")
    return functions[0].period


def _trapezoid_weights(n_points: int, dt: float) -> np.ndarray:
    weights = np.full(n_points, dt)
    weights[0] = weights[-1] = dt / 2.0
    return weights


class TorusMarginals:
    """Reducer keeping the torus state at each ladder time"""

    def __init__(self, times, period):
        self.times = np.asarray(times, dtype=float)
        self.period = tuple(period)

    def __call__(self, path_id, path: PathSample):
        idx = np.rint(self.times / path.dt).astype(int)
        return project(path.states[idx], self.period)


class ErgodicService:
    """Birkhoff averages, occupation histograms and covariance estimators"""

    def __init__(
        self,
        generator: Optional[GeneratorService] = None,
        simulator: Optional[PathSimulator] = None,
        bins: int = HISTOGRAM_BINS,
        grid: int = QUADRATURE_GRID,
        psd_tol: float = PSD_TOL,
    ):
        self.generator = generator or GeneratorService()
        self.symbols: SymbolService = self.generator.symbols
        self.simulator = simulator or PathSimulator(self.generator)
        self.bins = bins
        self.grid = grid
        self.psd_tol = psd_tol

    # ------------------------------------------------------------------
    # path functionals
    # ------------------------------------------------------------------
    def birkhoff_average(self, path: PathSample, f: Union[PeriodicFunction, Callable]) -> float:
        """(1/T) int_0^T f(F_s) ds by the trapezoid rule"""
        if path.n_steps < 1:
            raise HorizonError("path has no steps to average over")
        if isinstance(f, PeriodicFunction):
            values = np.asarray(f.evaluate(path.states)).reshape(-1)
        elif hasattr(f, "many"):
            values = np.asarray(f.many(path.states))
        else:
            values = np.asarray(f(path.states), dtype=float)
        return trapezoid(values, dx=path.dt, axis=0) / path.horizon

    def occupation_histogram(self, path: PathSample, bins: Optional[int] = None, burn_in: float = 0.0) -> OccupationHistogram:
        """Time-weighted histogram of the torus projection"""
        if path.period is None:
            raise ModelError("occupation histogram needs a periodic path")
        bins = bins or self.bins
        first = int(round(burn_in * path.n_steps))
        states = path.torus_states[first:]
        if states.shape[0] < 2:
            raise HorizonError("burn-in leaves no time to histogram")
        weights = _trapezoid_weights(states.shape[0], path.dt)
        counts, _ = np.histogramdd(
            states,
            bins=[bins] * len(path.period),
            range=[(0.0, t) for t in path.period],
            weights=weights,
        )
        return OccupationHistogram(
            period=tuple(path.period), bins=bins, counts=counts, total_time=float(weights.sum())
        )

    def modified_characteristics(
        self,
        path: PathSample,
        model: DrivingModel,
        functions: list,
        n: float,
        times=None,
    ) -> tuple:
        """n^{-1} int_0^{nt} Gamma(w^i, w^j)(F_s) ds at the requested times; returns (times, (T, d, d))"""
        if n <= 0:
            raise ConfigError(f"scale n must be positive, got {n}")
        times = np.array([1.0] if times is None else np.atleast_1d(times), dtype=float)
        if np.any(times < 0):
            raise ConfigError("characteristic times must be nonnegative")
        t_max = float(times.max())
        last = int(round(n * t_max / path.dt))
        if last > path.n_steps:
            raise HorizonError(
                f"path horizon {path.horizon} shorter than n * t = {n * t_max}"
            )
        d = len(functions)
        if last == 0:
            return times, np.zeros((len(times), d, d))
        gamma = self.generator.carre_du_champ_matrix(model, functions, path.states[: last + 1])
        running = cumulative_trapezoid(gamma, dx=path.dt, axis=0, initial=0.0) / n
        idx = np.rint(n * times / path.dt).astype(int)
        return times, running[idx]

    # ------------------------------------------------------------------
    # limiting covariance
    # ------------------------------------------------------------------
    def _sigma(self, sigma, d):
        return np.zeros((d, d)) if sigma is None else np.asarray(sigma, dtype=float).reshape(d, d)

    def covariance_series(
        self,
        model: DrivingModel,
        functions: list,
        sigma=None,
        k_max: Optional[int] = None,
    ) -> CovarianceReport:
        """C~_ij = 2 sum_{k != 0} Re q(omega_k) w^i(k) w^j(-k); exact for band-limited functions"""
        if not model.is_levy:
            raise NonLevyError(f"{model.name}: series covariance needs a Levy model")
        period = _shared_period(functions)
        d = len(functions)
        radius = max(f.support_radius for f in functions) if k_max is None else int(k_max)
        coeffs = [
            {k: c for k, c in f.coefficients().items() if any(k) and max(abs(v) for v in k) <= radius}
            for f in functions
        ]
        support = sorted(set().union(*coeffs))
        diagnostics = {
            "k_max": radius,
            "n_modes": len(support),
            "truncation": "exact (band-limited)" if radius >= max(f.support_radius for f in functions) else "truncated",
        }
        ergodic = np.zeros((d, d))
        if support:
            ks = np.array(support, dtype=int)
            spectral = self.symbols.check_ergodicity_condition(model, period, convention="per_axis", ks=ks)
            diagnostics["spectral_positivity"] = spectral.status
            if spectral.status == "fail":
                diagnostics["k0"] = list(spectral.k0)
                logger.warning(f"spectral positivity fails on the support at k={spectral.k0}")
            omegas = 2.0 * np.pi * ks / np.array(period)
            re_q = self.symbols.levy_symbol(model, omegas).real
            table = np.array([[c.get(tuple(k), 0j) for k in support] for c in coeffs])
            mirror = np.array([[c.get(tuple(-v for v in k), 0j) for k in support] for c in coeffs])
            raw = 2.0 * np.einsum("k,ik,jk->ij", re_q, table, mirror)
            residual = float(np.abs(raw.imag).max())
            if residual > 1e-12 * max(1.0, float(np.abs(raw).max())):
                raise ModelError(f"series covariance has imaginary residual {residual:.3e}")
            ergodic = raw.real
        return CovarianceReport(
            sigma=self._sigma(sigma, d),
            ergodic=ergodic,
            method="series",
            invariant="uniform",
            diagnostics=diagnostics,
            psd_tol=self.psd_tol,
        )

    def covariance_quadrature(
        self,
        model: DrivingModel,
        functions: list,
        sigma=None,
        invariant: Union[str, OccupationHistogram] = "uniform",
        grid: Optional[int] = None,
        method: str = "auto",
    ) -> CovarianceReport:
        """C = Sigma + int Gamma(w^i, w^j) d pi over the torus"""
        period = _shared_period(functions)
        d = len(functions)
        if isinstance(invariant, OccupationHistogram):
            if not np.allclose(invariant.period, period):
                raise ConfigError(
                    f"histogram period {invariant.period} does not match test function period {period}"
                )
            points = invariant.bin_centres()
            weights = invariant.mass.ravel()
            provenance = "empirical"
            diagnostics = {"bins": invariant.bins, "total_time": invariant.total_time}
        elif invariant == "uniform":
            grid = grid or self.grid
            points = torus_grid(period, grid)
            weights = np.full(points.shape[0], 1.0 / points.shape[0])
            provenance = "uniform"
            diagnostics = {"grid": grid}
            if not model.is_levy:
                logger.warning(f"{model.name}: uniform measure is only invariant for Levy drivers")
        else:
            raise ConfigError(f"unknown invariant measure {invariant!r}")

        gamma = self.generator.carre_du_champ_matrix(model, functions, points, method=method)
        ergodic = np.einsum("n,nij->ij", weights, gamma)
        diagnostics["min_gamma_diagonal"] = float(np.min(np.diagonal(gamma, axis1=1, axis2=2)))
        return CovarianceReport(
            sigma=self._sigma(sigma, d),
            ergodic=ergodic,
            method="quadrature",
            invariant=provenance,
            diagnostics=diagnostics,
            psd_tol=self.psd_tol,
        )

    def dirichlet_form(self, model: DrivingModel, wi: PeriodicFunction, wj: PeriodicFunction, grid: Optional[int] = None) -> float:
        """Torus mean of w^i A w^j; equals -C~_ij / 2 for symmetric Levy models"""
        period = _shared_period([wi, wj])
        points = torus_grid(period, grid or self.grid)
        values = np.asarray(self.generator.apply_pointwise(model, wj, points)).reshape(-1)
        return float(np.mean(np.asarray(wi.evaluate(points)).reshape(-1) * values))

    # ------------------------------------------------------------------
    # empirical invariant measure and mixing diagnostics
    # ------------------------------------------------------------------
    def pilot_histogram(
        self,
        model: DrivingModel,
        seed: int,
        horizon: float = PILOT_HORIZON,
        dt: float = DEFAULT_DT,
        burn_in: float = PILOT_BURN_IN,
        bins: Optional[int] = None,
    ) -> OccupationHistogram:
        """Occupation histogram of one long path started uniformly on the torus"""
        if model.period is None:
            raise ModelError(f"{model.name}: pilot runs need a periodic model")
        stream = Stream(seed, 0, PILOT_TAG)
        start = stream.generator(INITIAL).uniform(0.0, 1.0, size=model.dim) * np.array(model.period)
        if model.is_levy:
            path = self.simulator.levy_path(model, start, dt, horizon, stream)
        else:
            path = self.simulator.feller_path(model, start, dt, horizon, stream)
        logger.info(f"pilot run of {model.name} finished, horizon {horizon}")
        return self.occupation_histogram(path, bins=bins or self.bins, burn_in=burn_in)

    def _histogram(self, samples, period, bins):
        counts, _ = np.histogramdd(
            samples, bins=[bins] * len(period), range=[(0.0, t) for t in period]
        )
        return counts / max(1, samples.shape[0])

    @staticmethod
    def atom_mass(samples) -> float:
        """Fraction of samples that repeat exactly; a lower bound on the atomic part"""
        _, counts = np.unique(samples, axis=0, return_counts=True)
        return float(counts[counts > 1].sum()) / max(1, samples.shape[0])

    def tv_decay_estimate(
        self,
        model: DrivingModel,
        times,
        seed: int,
        starts=None,
        n_paths: int = TV_PATHS_PER_START,
        bins: int = TV_BINS,
        dt: float = DEFAULT_DT,
        period=None,
        workers: int = DEFAULT_WORKERS,
    ) -> TVDecayReport:
        """sup over starting points of the TV distance of torus marginals to the invariant law"""
        period = tuple(period) if period is not None else model.period
        if period is None:
            raise ModelError(f"{model.name}: TV decay needs a period")
        times = np.asarray(sorted(float(t) for t in times))
        if times.size == 0 or times[0] < 0:
            raise ConfigError("time ladder must be nonempty and nonnegative")
        horizon = float(times.max())
        for t in times[times > 0]:
            steps_for(dt, t)
        notes = []
        if n_paths < TV_MIN_PATHS:
            logger.warning(f"only {n_paths} paths per start; histograms will be noisy")
            notes.append(f"fewer than {TV_MIN_PATHS} paths per start")
        if starts is None:
            axes = [np.arange(TV_STARTS_PER_AXIS) * t / TV_STARTS_PER_AXIS for t in period]
            mesh = np.meshgrid(*axes, indexing="ij")
            starts = np.stack([m.ravel() for m in mesh], axis=1)
        starts = np.asarray(starts, dtype=float).reshape(-1, model.dim)

        marginals = []
        reducer = TorusMarginals(times, period)
        for index, start in enumerate(starts):
            spec = RunSpec(
                model=model, n_paths=n_paths, dt=dt, horizon=max(horizon, dt), seed=seed,
                tag=TV_TAG + index, start=start,
            )
            samples = np.stack([r for _, r in self.simulator.ensemble(spec, reducer, workers)])
            marginals.append(samples)  # (paths, times, d)

        if model.is_levy:
            reference = np.full([bins] * len(period), 1.0 / bins ** len(period))
            reference_name = "uniform"
        else:
            pooled = np.concatenate([m[:, -1] for m in marginals])
            reference = self._histogram(pooled, period, bins)
            reference_name = "pooled final marginal"

        tv, floor = [], []
        half = n_paths // 2
        for j in range(len(times)):
            worst, worst_floor = 0.0, 0.0
            for m in marginals:
                samples = m[:, j]
                binned = 0.5 * float(np.abs(self._histogram(samples, period, bins) - reference).sum())
                atoms = self.atom_mass(samples) if model.is_levy else 0.0
                worst = max(worst, binned, atoms)
                if half >= 1:
                    a = self._histogram(samples[:half], period, bins)
                    b = self._histogram(samples[half: 2 * half], period, bins)
                    worst_floor = max(worst_floor, 0.5 * float(np.abs(a - b).sum()))
            tv.append(worst)
            floor.append(worst_floor)

        tv_arr, floor_arr = np.array(tv), np.array(floor)
        usable = (times > 0) & (tv_arr > 2.0 * floor_arr) & (tv_arr > 0)
        rate = prefactor = None
        if usable.sum() >= 2:
            slope, intercept = np.polyfit(times[usable], np.log(tv_arr[usable]), 1)
            rate, prefactor = float(-slope), float(np.exp(intercept))
        decays = bool(tv_arr[-1] <= max(0.1, 3.0 * floor_arr[-1]) and (rate is None or rate > 0))
        if not decays:
            notes.append("TV distance does not decay: not strongly ergodic")
        logger.info(f"TV decay for {model.name}: final {tv_arr[-1]:.3f}, rate {rate}")
        return TVDecayReport(
            times=times.tolist(),
            tv=tv,
            noise_floor=floor,
            rate=rate,
            prefactor=prefactor,
            decays=decays,
            reference=reference_name,
            notes=notes,
        )
