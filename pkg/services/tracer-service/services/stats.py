"""
Statistical verification of the law of large numbers and the central limit
theorem for tracers, plus the distributional helpers they rely on.
"""

import logging
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import stats as sps
from scipy.integrate import trapezoid

from config import DEFAULT_DT, DEFAULT_WORKERS, MIN_KS_SAMPLES, P_MIN, TOL_COV
from errors import ConfigError, DegenerateCovarianceError, InsufficientSamplesError, ModelError
from models import (
    CLTReport,
    CLTRow,
    CovarianceReport,
    DrivingModel,
    DynkinReport,
    EnsembleStats,
    JumpCapReport,
    KSResult,
    LLNReport,
    LLNRung,
    PathSample,
    TracerModel,
    TracerPath,
)
from services.generator import VelocityField
from services.simulate import PathSimulator, RunSpec, TracerAt
from services.torus import PeriodicFunction, torus_grid

logger = logging.getLogger(__name__)

LLN_TAG = 100
CLT_TAG = 200
DYNKIN_TAG = 300


def is_pure_drift(model: DrivingModel) -> bool:
    c = model.diffusion_at(np.zeros((1, model.dim)))[0]
    return model.is_levy and model.jumps is None and not np.any(c)


class DynkinIncrement:
    """w(F_T) - w(F_0) - int_0^T A w(F_s) ds for each test function"""

    def __init__(self, functions: list, velocity: VelocityField):
        self.functions = functions
        self.velocity = velocity

    def __call__(self, path_id, path: PathSample):
        v = self.velocity.many(path.states)
        integral = trapezoid(v, dx=path.dt, axis=0)
        ends = np.array(
            [np.asarray(f.evaluate(path.states[[0, -1]])).reshape(-1) for f in self.functions]
        )
        return ends[:, 1] - ends[:, 0] - integral


class JumpIncrement:
    """Largest Dynkin-martingale increment over grid steps that contain a jump"""

    def __init__(self, functions: list):
        self.functions = functions

    def __call__(self, path_id, item: TracerPath):
        return max_jump_increment(item, self.functions)


def max_jump_increment(path: TracerPath, functions: list) -> float:
    driving = path.driving
    if driving.jump_times.size == 0:
        return 0.0
    steps = np.unique(np.minimum((driving.jump_times / driving.dt).astype(int), driving.n_steps - 1))
    values = np.stack(
        [np.asarray(f.evaluate(driving.states)).reshape(-1) for f in functions], axis=1
    )
    increments = (values[steps + 1] - values[steps]) - (path.integral[steps + 1] - path.integral[steps])
    return float(np.abs(increments).max())


class StatsService:
    """LLN, CLT, KS and jump-size checks on simulated ensembles"""

    def __init__(
        self,
        simulator: Optional[PathSimulator] = None,
        tol_cov: float = TOL_COV,
        p_min: float = P_MIN,
        min_samples: int = MIN_KS_SAMPLES,
    ):
        self.simulator = simulator or PathSimulator()
        self.tol_cov = tol_cov
        self.p_min = p_min
        self.min_samples = min_samples

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------
    def ks_test(self, samples, cdf: Callable) -> KSResult:
        """One-sample Kolmogorov-Smirnov test with the asymptotic p-value"""
        samples = np.asarray(samples, dtype=float).reshape(-1)
        if samples.size < self.min_samples:
            raise InsufficientSamplesError(
                f"KS test needs at least {self.min_samples} samples, got {samples.size}"
            )
        result = sps.kstest(samples, cdf, method="asymp")
        return KSResult(float(result.statistic), float(result.pvalue), int(samples.size))

    def empirical_covariance(self, samples) -> np.ndarray:
        """Covariance with 1/(N-1) normalisation; rows are samples"""
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] < 2:
            raise InsufficientSamplesError("covariance needs at least 2 samples")
        return np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))

    def ensemble_stats(self, samples, variances=None) -> EnsembleStats:
        """Mean, covariance, their standard errors and KS tests against N(0, variances)"""
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        n = samples.shape[0]
        cov = self.empirical_covariance(samples)
        diag = np.diag(cov)
        cov_err = np.sqrt((np.outer(diag, diag) + cov**2) / (n - 1))
        ks = []
        if variances is not None:
            for i, var in enumerate(np.atleast_1d(variances)):
                if var <= 0:
                    continue
                ks.append(self.ks_test(samples[:, i], sps.norm(0.0, np.sqrt(var)).cdf))
        return EnsembleStats(
            n_samples=n,
            mean=samples.mean(axis=0),
            covariance=cov,
            standard_errors=np.sqrt(diag / n),
            covariance_errors=cov_err,
            ks=ks,
        )

    # ------------------------------------------------------------------
    # degenerate drivers
    # ------------------------------------------------------------------
    def degenerate_integral(self, path: PathSample, model: DrivingModel, w: PeriodicFunction) -> float:
        """Exact int_0^T A w(L_s) ds = w(L_0 + bT) - w(L_0) for a pure drift driver"""
        if not is_pure_drift(model):
            raise ModelError(f"{model.name} is not a pure drift driver")
        b = model.drift_at(np.zeros((1, model.dim)))[0]
        start = path.states[0]
        end = start + b * path.horizon
        values = np.asarray(w.evaluate(np.stack([start, end]))).reshape(-1)
        return float(values[1] - values[0])

    # ------------------------------------------------------------------
    # experiments
    # ------------------------------------------------------------------
    def lln_experiment(
        self,
        tm: TracerModel,
        ladder: Iterable[int],
        seed: int,
        t: float = 1.0,
        paths_per_rung: int = 200,
        dt: float = DEFAULT_DT,
        workers: int = DEFAULT_WORKERS,
    ) -> LLNReport:
        """Deviation of X_{nt}/n from the drift limit along a ladder of scales"""
        ladder = [int(n) for n in ladder]
        if not ladder or min(ladder) < 1 or t <= 0:
            raise ConfigError("ladder needs positive scales and t must be positive")
        point = tm.drift_law.is_point
        centring = "mean drift" if point else "per-path drift"
        bound_base = None
        if is_pure_drift(tm.driving) and point and not np.any(tm.noise_cov):
            sup_w = np.array([f.sup_norm() for f in tm.functions])
            bound_base = float(np.linalg.norm(tm.x0) + 2.0 * np.linalg.norm(sup_w))

        rungs = []
        for index, n in enumerate(ladder):
            spec = RunSpec(
                model=tm.driving, tracer=tm, n_paths=paths_per_rung, dt=dt, horizon=n * t,
                seed=seed, tag=LLN_TAG + index,
            )
            results = [r for _, r in self.simulator.ensemble(spec, TracerAt([n * t]), workers)]
            x = np.stack([r["x"][0] for r in results]) / n
            centre = tm.mean_drift[None, :] * t if point else np.stack([r["drift"] for r in results]) * t
            deviation = np.linalg.norm(x - centre, axis=1)
            rungs.append(
                LLNRung(
                    n=n,
                    mean_deviation=float(deviation.mean()),
                    stderr=float(deviation.std(ddof=1) / np.sqrt(len(deviation))) if len(deviation) > 1 else 0.0,
                    bound=None if bound_base is None else bound_base / n,
                )
            )
            logger.info(f"LLN rung n={n}: mean deviation {rungs[-1].mean_deviation:.4g}")

        means = np.array([r.mean_deviation for r in rungs])
        slope = None
        if len(rungs) >= 2 and np.all(means > 0):
            slope = float(np.polyfit(np.log(ladder), np.log(means), 1)[0])
        decreasing = bool(len(means) >= 2 and np.all(np.diff(means) < 0))
        return LLNReport(t=t, centring=centring, rungs=rungs, slope=slope, decreasing=decreasing)

    def clt_experiment(
        self,
        tm: TracerModel,
        covariance,
        n: int,
        seed: int,
        times=(1.0,),
        n_paths: int = 400,
        dt: float = DEFAULT_DT,
        workers: int = DEFAULT_WORKERS,
    ) -> CLTReport:
        """Compare Cov(S_n(t)), S_n(t) = n^{-1/2}(X_{nt} - x0 - n V t), with t C"""
        total = covariance.total if isinstance(covariance, CovarianceReport) else np.atleast_2d(covariance)
        times = np.array(sorted(float(t) for t in times))
        if times.size == 0 or times[0] <= 0:
            raise ConfigError("CLT times must be positive")
        spec = RunSpec(
            model=tm.driving, tracer=tm, n_paths=n_paths, dt=dt, horizon=n * times.max(),
            seed=seed, tag=CLT_TAG,
        )
        results = [r for _, r in self.simulator.ensemble(spec, TracerAt(n * times), workers)]
        x = np.stack([r["x"] for r in results])  # (paths, times, d)
        drifts = np.stack([r["drift"] for r in results])
        point = tm.drift_law.is_point
        centring = "mean drift" if point else "per-path drift"

        rows, unconditional = [], []
        verdict = True
        for j, t in enumerate(times):
            centre = (drifts if not point else tm.mean_drift[None, :]) * n * t
            s = (x[:, j] - tm.x0 - centre) / np.sqrt(n)
            theory = t * total
            self._check_degenerate(s, theory)
            row_stats = self.ensemble_stats(s, np.diag(theory))
            scale = float(np.abs(theory).max())
            gap = np.abs(row_stats.covariance - theory)
            relative = float(gap.max() / scale) if scale > 0 else float(gap.max())
            tol = 3.0 * np.sqrt((np.outer(np.diag(theory), np.diag(theory)) + theory**2) / (n_paths - 1))
            rows.append(CLTRow(t=float(t), stats=row_stats, theoretical=theory,
                               relative_error=relative, within_stderr=bool(np.all(gap <= tol + 1e-15))))
            verdict &= relative < self.tol_cov and all(k.pvalue > self.p_min for k in row_stats.ks)
            if not point:
                s_all = (x[:, j] - tm.x0 - tm.mean_drift[None, :] * n * t) / np.sqrt(n)
                unconditional.append(
                    {"t": float(t), "covariance": self.empirical_covariance(s_all).tolist()}
                )

        linearity = None
        if len(rows) > 1:
            per_time = np.array([np.trace(r.stats.covariance) / r.t for r in rows])
            if per_time.min() > 0:
                linearity = float(per_time.max() / per_time.min())
        logger.info(f"CLT at n={n}: verdict {'pass' if verdict else 'fail'}")
        return CLTReport(
            n=n, rows=rows, verdict=bool(verdict), tol_cov=self.tol_cov, p_min=self.p_min,
            centring=centring, unconditional=unconditional or None, linearity_ratio=linearity,
        )

    def _check_degenerate(self, samples, theory):
        for i, var in enumerate(np.diag(theory)):
            if var <= 0 and np.ptp(samples[:, i]) > 1e-12:
                raise DegenerateCovarianceError(
                    f"theoretical variance of component {i} is zero but samples vary"
                )

    def jump_cap_check(self, paths, tm: TracerModel, n: float, dt: Optional[float] = None) -> JumpCapReport:
        """Largest rescaled jump of the Dynkin martingale against 2 max sup|w| / sqrt(n)"""
        maxima = []
        for item in paths:
            if isinstance(item, TracerPath):
                dt = item.driving.dt
                maxima.append(max_jump_increment(item, tm.functions))
            else:
                maxima.append(float(item))
        if dt is None:
            raise ConfigError("grid step is needed when only maxima are supplied")
        sup_w = max(f.sup_norm() for f in tm.functions)
        velocity = self.simulator.velocity_for(tm)
        grad = max(
            float(np.abs(f.gradient(torus_grid(f.period, 64))).max()) for f in tm.functions
        )
        probes = tm.driving.probe_grid()
        b = float(np.abs(tm.driving.drift_at(probes)).max())
        c = float(np.abs(tm.driving.diffusion_at(probes)).max())
        continuous = velocity.sup_norm() * dt + grad * (b * dt + 6.0 * np.sqrt(c * dt))
        root = np.sqrt(n)
        return JumpCapReport(
            n=int(n),
            max_jump=(max(maxima) if maxima else 0.0) / root,
            cap=2.0 * sup_w / root,
            tolerance=continuous / root,
        )

    def dynkin_check(
        self,
        model: DrivingModel,
        functions: list,
        seed: int,
        n_paths: int = 10_000,
        horizon: float = 1.0,
        dt: float = DEFAULT_DT,
        start=None,
        workers: int = DEFAULT_WORKERS,
    ) -> list:
        """Monte Carlo mean of the Dynkin martingale at the horizon, per test function"""
        velocity = self.simulator.generator.velocity(model, functions)
        if start is None:
            start = np.zeros(model.dim)
        spec = RunSpec(
            model=model, n_paths=n_paths, dt=dt, horizon=horizon, seed=seed, tag=DYNKIN_TAG, start=start,
        )
        values = np.stack([r for _, r in self.simulator.ensemble(spec, DynkinIncrement(functions, velocity), workers)])
        reports = []
        for i, f in enumerate(functions):
            column = values[:, i]
            reports.append(
                DynkinReport(
                    label=f.label or f"w{i + 1}",
                    mean=float(column.mean()),
                    stderr=float(column.std(ddof=1) / np.sqrt(len(column))) if len(column) > 1 else 0.0,
                    n_paths=len(column),
                )
            )
        return reports
