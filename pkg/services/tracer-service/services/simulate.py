"""
Path simulation for driving processes and passive tracers.

Every path owns independent random streams derived from (seed, tag, path id,
purpose), so an ensemble is reproducible bit for bit whatever the worker count.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import logging
import pickle
import time
from typing import Callable, Iterator, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from config import (
    CHUNK_PATHS,
    DEFAULT_WORKERS,
    MAX_JUMPS_PER_STEP,
    MAX_RATE_DT,
    NOISE_BLOCK_STEPS,
)
from errors import ConfigError, HorizonError, ModelError, NonLevyError
from models import (
    Atoms,
    DrivingModel,
    FiniteDensity,
    PathSample,
    SymmetricStable,
    TracerModel,
    TracerPath,
    psd_sqrt,
)
from services.generator import GeneratorService, VelocityField

logger = logging.getLogger(__name__)

# stream purposes
DRIVING = 0
JUMP_TIMES = 1
TRACER = 2
DRIFT = 3
INITIAL = 4


@dataclass(frozen=True)
class Stream:
    """Counter-style stream identity; each purpose gets its own generator"""

    seed: int
    path_id: int = 0
    tag: int = 0

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if self.path_id < 0 or self.tag < 0:
            raise ConfigError("path id and tag must be nonnegative")

    @property
    def id(self) -> tuple:
        return (int(self.seed), int(self.tag), int(self.path_id))

    def generator(self, purpose: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.tag), int(self.path_id), int(purpose))
        )
        return np.random.Generator(np.random.PCG64(seq))


def steps_for(dt: float, horizon: float) -> int:
    """Number of grid steps; the horizon must be a whole number of steps"""
    if dt <= 0 or horizon <= 0:
        raise HorizonError(f"step {dt} and horizon {horizon} must be positive")
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise HorizonError(f"horizon {horizon} is not a whole number of steps of {dt}")
    return n


def symmetric_stable_standard(alpha, phi, w):
    """Chambers-Mallows-Stuck variate with characteristic function exp(-|xi|^alpha)"""
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        general = (
            np.sin(alpha * phi)
            / np.cos(phi) ** (1.0 / alpha)
            * (np.cos((1.0 - alpha) * phi) / w) ** ((1.0 - alpha) / alpha)
        )
    return np.where(np.isclose(alpha, 1.0), np.tan(phi), general)


def positive_stable(a, u, e):
    """Kanter variate A with E exp(-s A) = exp(-s^a), 0 < a < 1"""
    x = np.pi * u
    zolotarev = (
        np.sin(a * x) ** (a / (1.0 - a)) * np.sin((1.0 - a) * x) / np.sin(x) ** (1.0 / (1.0 - a))
    )
    return (zolotarev / e) ** ((1.0 - a) / a)


def rotational_stable(alpha, rng, n, dim):
    """Isotropic stable vectors with E exp(i<xi, X>) = exp(-|xi|^alpha)"""
    if dim == 1:
        phi = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
        w = rng.exponential(1.0, size=n)
        return symmetric_stable_standard(alpha, phi, w)[:, None]
    u = rng.uniform(0.0, 1.0, size=n)
    e = rng.exponential(1.0, size=n)
    g = rng.standard_normal((n, dim))
    scale = np.sqrt(2.0 * positive_stable(np.asarray(alpha) / 2.0, u, e))
    return scale.reshape(-1, 1) * g


def _batched_sqrt(cs: np.ndarray) -> np.ndarray:
    if cs.shape[-1] == 1:
        return np.sqrt(np.clip(cs, 0.0, None))
    eigval, eigvec = np.linalg.eigh(cs)
    return np.einsum("npq,nq,nrq->npr", eigvec, np.sqrt(np.clip(eigval, 0.0, None)), eigvec)


def _poisson_counts(mean, u, cap):
    """Inverse-CDF Poisson counts from pre-drawn uniforms, capped"""
    p = np.exp(-mean)
    cdf = p.copy()
    counts = np.zeros(mean.shape, dtype=int)
    for k in range(1, cap + 1):
        more = u > cdf
        if not more.any():
            break
        counts += more
        p = p * mean / k
        cdf = cdf + p
    return counts


@dataclass
class RunSpec:
    """One ensemble: tracer (or bare driving) model, grid and seed"""

    model: DrivingModel
    n_paths: int
    dt: float
    horizon: float
    seed: int
    tracer: Optional[TracerModel] = None
    tag: int = 0
    method: str = "auto"  # auto | levy | euler
    start: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigError(f"n_paths must be at least 1, got {self.n_paths}")
        if self.method not in ("auto", "levy", "euler"):
            raise ConfigError(f"unknown simulation method {self.method!r}")
        steps_for(self.dt, self.horizon)


class PathSimulator:
    """Simulates driving paths, tracer paths and deterministic ensembles"""

    def __init__(
        self,
        generator: Optional[GeneratorService] = None,
        max_rate_dt: float = MAX_RATE_DT,
        max_jumps: int = MAX_JUMPS_PER_STEP,
        noise_block: int = NOISE_BLOCK_STEPS,
        chunk_paths: int = CHUNK_PATHS,
    ):
        self.generator = generator or GeneratorService()
        self.max_rate_dt = max_rate_dt
        self.max_jumps = max_jumps
        self.noise_block = noise_block
        self.chunk_paths = chunk_paths
        self._velocities: dict = {}

    # ------------------------------------------------------------------
    # Levy paths: exact increments, vectorised over time
    # ------------------------------------------------------------------
    def levy_path(self, model: DrivingModel, x0, dt: float, horizon: float, stream: Stream) -> PathSample:
        if not model.is_levy:
            raise NonLevyError(f"{model.name}: exact increments need constant coefficients")
        if not isinstance(stream, Stream):
            raise ConfigError(f"invalid stream {stream!r}")
        n = steps_for(dt, horizon)
        d = model.dim
        x0 = np.asarray(x0, dtype=float).reshape(d)
        rng = stream.generator(DRIVING)
        times_rng = stream.generator(JUMP_TIMES)

        origin = np.zeros((1, d))
        b_eff = model.effective_drift(origin)[0]
        grid = horizon * np.arange(n + 1) / n
        states = x0 + grid[:, None] * b_eff

        increments = np.zeros((n, d))
        c = model.diffusion_at(origin)[0]
        if np.any(c != 0):
            increments += rng.standard_normal((n, d)) @ psd_sqrt(c).T * np.sqrt(dt)

        jump_steps = np.zeros(0, dtype=int)
        jump_sizes = np.zeros((0, d))
        jumps = model.jumps
        if isinstance(jumps, Atoms):
            counts = rng.poisson(jumps.rates * dt, size=(n, len(jumps.rates)))
            increments += counts @ jumps.locations
            step_idx, atom_idx = np.nonzero(counts)
            reps = counts[step_idx, atom_idx]
            jump_steps = np.repeat(step_idx, reps)
            jump_sizes = jumps.locations[np.repeat(atom_idx, reps)]
        elif isinstance(jumps, FiniteDensity):
            rate = float(jumps.rate_at(origin)[0])
            counts = rng.poisson(rate * dt, size=n)
            jump_steps = np.repeat(np.arange(n), counts)
            jump_sizes = jumps.sample_sizes(rng, int(counts.sum())).reshape(-1, d)
            np.add.at(increments, jump_steps, jump_sizes)
        elif isinstance(jumps, SymmetricStable):
            alpha = float(jumps.alpha.value)
            scale = (float(jumps.gamma.value) * dt) ** (1.0 / alpha)
            increments += scale * rotational_stable(alpha, rng, n, d)

        states[1:] += np.cumsum(increments, axis=0)
        jump_times = np.zeros(0)
        if jump_steps.size:
            offsets = times_rng.uniform(0.0, 1.0, size=jump_steps.size)
            order = np.lexsort((offsets, jump_steps))
            jump_times = (jump_steps[order] + offsets[order]) * dt
            jump_sizes = jump_sizes[order]
        return PathSample(
            dt=dt,
            states=states,
            period=model.period,
            jump_times=jump_times,
            jump_sizes=jump_sizes,
            stream_id=stream.id,
        )

    # ------------------------------------------------------------------
    # Euler scheme, vectorised across the paths of a batch
    # ------------------------------------------------------------------
    def _rate_bound(self, model: DrivingModel) -> float:
        if model.jumps is None or not model.jumps.is_finite:
            return 0.0
        rates = model.rate_at(model.probe_grid(256))
        if not np.all(np.isfinite(rates)):
            raise ModelError(f"{model.name}: jump rate is unbounded on the probe grid")
        return float(rates.max())

    def euler_batch(self, model: DrivingModel, starts, dt: float, horizon: float, streams: list) -> list:
        """Euler-Maruyama paths for several streams at once; each stream draws its own blocks"""
        n = steps_for(dt, horizon)
        d = model.dim
        starts = np.asarray(starts, dtype=float).reshape(-1, d)
        n_paths = starts.shape[0]
        if len(streams) != n_paths:
            raise ConfigError("one stream per starting point is required")
        rate_max = self._rate_bound(model)
        if rate_max * dt > self.max_rate_dt:
            raise HorizonError(
                f"step too coarse: rate {rate_max:.3g} times dt {dt:g} exceeds {self.max_rate_dt}"
            )

        jumps = model.jumps
        finite = jumps is not None and jumps.is_finite
        stable = isinstance(jumps, SymmetricStable)
        const_root = None
        if model.diffusion.is_constant:
            const_root = psd_sqrt(model.diffusion_at(np.zeros((1, d)))[0])
        has_noise = const_root is None or bool(np.any(const_root != 0))

        rngs = [s.generator(DRIVING) for s in streams]
        time_rngs = [s.generator(JUMP_TIMES) for s in streams]
        cap = self.max_jumps

        states = np.empty((n_paths, n + 1, d))
        states[:, 0] = starts
        logs = [[] for _ in range(n_paths)]
        state = starts.copy()
        sqrt_dt = np.sqrt(dt)

        for block_start in range(0, n, self.noise_block):
            width = min(self.noise_block, n - block_start)
            # fixed-size draws per path keep every path independent of its batch
            normals = np.stack([r.standard_normal((self.noise_block, d)) for r in rngs])
            if finite:
                count_u = np.stack([r.uniform(size=self.noise_block) for r in rngs])
                sizes = np.stack(
                    [jumps.sample_sizes(r, self.noise_block * cap).reshape(self.noise_block, cap, d) for r in rngs]
                )
                offsets = np.stack([r.uniform(size=(self.noise_block, cap)) for r in time_rngs])
            if stable:
                if d == 1:
                    phi = np.stack([r.uniform(-np.pi / 2, np.pi / 2, size=self.noise_block) for r in rngs])
                    expo = np.stack([r.exponential(1.0, size=self.noise_block) for r in rngs])
                else:
                    unif = np.stack([r.uniform(size=self.noise_block) for r in rngs])
                    expo = np.stack([r.exponential(1.0, size=self.noise_block) for r in rngs])
                    gauss = np.stack([r.standard_normal((self.noise_block, d)) for r in rngs])

            for j in range(width):
                m = block_start + j
                step = model.effective_drift(state) * dt
                if has_noise:
                    root = (
                        np.broadcast_to(const_root, (n_paths, d, d))
                        if const_root is not None
                        else _batched_sqrt(model.diffusion_at(state))
                    )
                    step = step + np.einsum("npq,nq->np", root, normals[:, j]) * sqrt_dt
                if finite:
                    counts = _poisson_counts(model.rate_at(state) * dt, count_u[:, j], cap)
                    if counts.any():
                        mask = np.arange(cap)[None, :] < counts[:, None]
                        step = step + np.sum(sizes[:, j] * mask[:, :, None], axis=1)
                        for p in np.nonzero(counts)[0]:
                            k = counts[p]
                            order = np.argsort(offsets[p, j, :k])
                            for slot in order:
                                logs[p].append(((m + offsets[p, j, slot]) * dt, sizes[p, j, slot]))
                elif stable:
                    alpha = jumps.alpha_at(state)
                    scale = (jumps.gamma_at(state) * dt) ** (1.0 / alpha)
                    if d == 1:
                        draw = symmetric_stable_standard(alpha, phi[:, j], expo[:, j])[:, None]
                    else:
                        a = alpha / 2.0
                        draw = np.sqrt(2.0 * positive_stable(a, unif[:, j], expo[:, j]))[:, None] * gauss[:, j]
                    step = step + scale[:, None] * draw
                state = state + step
                states[:, m + 1] = state

        paths = []
        for p in range(n_paths):
            if logs[p]:
                times = np.array([t for t, _ in logs[p]])
                sizes_p = np.array([s for _, s in logs[p]]).reshape(-1, d)
            else:
                times, sizes_p = np.zeros(0), np.zeros((0, d))
            paths.append(
                PathSample(
                    dt=dt,
                    states=states[p],
                    period=model.period,
                    jump_times=times,
                    jump_sizes=sizes_p,
                    stream_id=streams[p].id,
                )
            )
        return paths

    def feller_path(self, model: DrivingModel, x0, dt: float, horizon: float, stream: Stream) -> PathSample:
        return self.euler_batch(model, [x0], dt, horizon, [stream])[0]

    # ------------------------------------------------------------------
    # tracer
    # ------------------------------------------------------------------
    def velocity_for(self, tm: TracerModel) -> VelocityField:
        key = id(tm)
        hit = self._velocities.get(key)
        if hit is None or hit[0] is not tm:
            hit = (tm, self.generator.velocity(tm.driving, tm.functions))
            self._velocities[key] = hit
        return hit[1]

    def tracer_path(
        self,
        tm: TracerModel,
        driving: PathSample,
        stream: Stream,
        velocity: Optional[VelocityField] = None,
    ) -> TracerPath:
        if driving.states.shape[1] != tm.driving.dim:
            raise ModelError("driving path and tracer model dimensions differ")
        if driving.period is not None and not np.allclose(driving.period, tm.period):
            raise ModelError(f"driving path period {driving.period} differs from {tm.period}")
        velocity = velocity or self.velocity_for(tm)
        v = velocity.many(driving.states)
        integral = cumulative_trapezoid(v, dx=driving.dt, axis=0, initial=0.0)

        drift = tm.drift_law.sample(stream.generator(DRIFT))
        noise = np.zeros_like(integral)
        if np.any(tm.noise_cov != 0):
            normals = stream.generator(TRACER).standard_normal((driving.n_steps, tm.dim))
            noise[1:] = np.cumsum(normals @ tm.noise_root.T * np.sqrt(driving.dt), axis=0)
        return TracerPath(driving=driving, drift=drift, x0=tm.x0.copy(), integral=integral, noise=noise)

    # ------------------------------------------------------------------
    # ensembles
    # ------------------------------------------------------------------
    def _use_levy(self, spec: RunSpec) -> bool:
        if spec.method == "levy":
            return True
        if spec.method == "euler":
            return False
        return spec.model.is_levy

    def _start(self, spec: RunSpec, stream: Stream) -> np.ndarray:
        if spec.start is not None:
            return np.asarray(spec.start, dtype=float).reshape(spec.model.dim)
        if spec.tracer is not None:
            return np.asarray(spec.tracer.initial_law.sample(stream.generator(INITIAL)), dtype=float)
        return np.zeros(spec.model.dim)

    def run_chunk(self, spec: RunSpec, reduce: Optional[Callable], first: int, last: int) -> list:
        """Paths first..last-1 of an ensemble, reduced in path-id order"""
        streams = [Stream(spec.seed, pid, spec.tag) for pid in range(first, last)]
        starts = [self._start(spec, s) for s in streams]
        if self._use_levy(spec):
            driving = [self.levy_path(spec.model, x, spec.dt, spec.horizon, s) for x, s in zip(starts, streams)]
        else:
            driving = self.euler_batch(spec.model, starts, spec.dt, spec.horizon, streams)

        velocity = self.velocity_for(spec.tracer) if spec.tracer is not None else None
        out = []
        for s, path in zip(streams, driving):
            item = path if spec.tracer is None else self.tracer_path(spec.tracer, path, s, velocity)
            out.append((s.path_id, item if reduce is None else reduce(s.path_id, item)))
        return out

    def ensemble(
        self,
        spec: RunSpec,
        reduce: Optional[Callable] = None,
        workers: int = DEFAULT_WORKERS,
    ) -> Iterator[tuple]:
        """Yields (path_id, reduced path) in path-id order"""
        bounds = [
            (first, min(first + self.chunk_paths, spec.n_paths))
            for first in range(0, spec.n_paths, self.chunk_paths)
        ]
        workers = max(1, min(int(workers), len(bounds)))
        if workers > 1:
            try:
                pickle.dumps((self, spec, reduce))
            except Exception as e:
                logger.warning(f"ensemble inputs are not picklable ({e}); running on one worker")
                workers = 1

        started = time.perf_counter()
        logger.info(
            "ensemble started",
            extra={"seed": spec.seed, "n_paths": spec.n_paths, "workers": workers},
        )
        if workers == 1:
            for first, last in bounds:
                yield from self.run_chunk(spec, reduce, first, last)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_chunk, self, spec, reduce, f, l) for f, l in bounds]
                for future in futures:
                    yield from future.result()
        logger.info(
            "ensemble finished",
            extra={
                "seed": spec.seed,
                "n_paths": spec.n_paths,
                "elapsed": round(time.perf_counter() - started, 3),
            },
        )


def _run_chunk(simulator: PathSimulator, spec: RunSpec, reduce, first: int, last: int) -> list:
    return simulator.run_chunk(spec, reduce, first, last)


# ----------------------------------------------------------------------
# picklable reducers
# ----------------------------------------------------------------------
class TerminalState:
    """Keeps F_T"""

    def __call__(self, path_id, item):
        path = item.driving if isinstance(item, TracerPath) else item
        return path.states[-1].copy()


class TracerAt:
    """Keeps X at the requested times"""

    def __init__(self, times):
        self.times = np.atleast_1d(np.asarray(times, dtype=float))

    def __call__(self, path_id, item: TracerPath):
        idx = np.rint(self.times / item.driving.dt).astype(int)
        if idx.max() > item.driving.n_steps:
            raise HorizonError(f"requested time {self.times.max()} beyond the path horizon")
        return {"x": item.values[idx], "drift": np.asarray(item.drift).copy()}
