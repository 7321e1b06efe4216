"""
Domain models: coefficient fields, jump measures, driving and tracer models,
simulated paths and the reports built from them.

Models are immutable after construction and hold only picklable state so
they can be shipped to worker processes.
"""

from dataclasses import dataclass, field
import logging
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import gamma as gamma_fn

from config import COMPENSATION_RADIUS, DYNKIN_ATOL, PROBE_BOX, PROBE_POINTS, PSD_TOL, QUAD_BUDGET, QUAD_RTOL
from errors import ModelError, NotEvaluableError, NumericalError
from services.torus import PeriodicFunction, project
from utils.quadrature import integrate_box

logger = logging.getLogger(__name__)


def _points(x, dim):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, dim)


def _matrix(value):
    return np.asarray(value, dtype=float).tolist()


def psd_sqrt(matrix, tol=PSD_TOL):
    """Symmetric square root of a nonnegative definite matrix; raises if it has none"""
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if not np.allclose(m, m.T, atol=1e-12 * max(1.0, float(np.max(np.abs(m))))):
        raise ModelError(f"matrix is not symmetric: {m.tolist()}")
    eigval, eigvec = np.linalg.eigh(m)
    scale = max(1.0, float(np.max(np.abs(eigval))))
    if eigval.min() < -tol * scale:
        raise ModelError(f"matrix is not nonnegative definite (eigenvalue {eigval.min():.3e})")
    return (eigvec * np.sqrt(np.clip(eigval, 0.0, None))) @ eigvec.T


def stable_density_constant(alpha: float, dim: int) -> float:
    """C with nu(dy) = C |y|^{-dim-alpha} dy for the symbol |xi|^alpha"""
    return float(
        alpha
        * 2.0 ** (alpha - 1.0)
        * gamma_fn((dim + alpha) / 2.0)
        / (np.pi ** (dim / 2.0) * gamma_fn(1.0 - alpha / 2.0))
    )


# ----------------------------------------------------------------------
# coefficient fields x -> value
# ----------------------------------------------------------------------
class ConstantField:
    """Coefficient that does not depend on the state"""

    is_constant = True

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    @property
    def shape(self):
        return self.value.shape

    def __call__(self, x):
        return self.value.copy()

    def many(self, points):
        n = np.asarray(points).shape[0]
        return np.broadcast_to(self.value, (n, *self.value.shape)).copy()

    def to_dict(self):
        return {"kind": "constant", "value": self.value.tolist()}


class TrigField:
    """base + amplitude * cos(<frequency, x> + phase)"""

    is_constant = False

    def __init__(self, base, amplitude, frequency, phase=0.0):
        self.base = np.asarray(base, dtype=float)
        self.amplitude = np.asarray(amplitude, dtype=float)
        self.frequency = np.atleast_1d(np.asarray(frequency, dtype=float))
        self.phase = float(phase)
        if self.base.shape != self.amplitude.shape:
            raise ModelError(
                f"base shape {self.base.shape} and amplitude shape {self.amplitude.shape} differ"
            )

    @property
    def shape(self):
        return self.base.shape

    def __call__(self, x):
        return self.many(_points(x, self.frequency.size))[0]

    def many(self, points):
        points = _points(points, self.frequency.size)
        wave = np.cos(points @ self.frequency + self.phase)
        wave = wave.reshape(-1, *([1] * self.base.ndim))
        return self.base + self.amplitude * wave

    def to_dict(self):
        return {
            "kind": "trig",
            "base": self.base.tolist(),
            "amplitude": self.amplitude.tolist(),
            "frequency": self.frequency.tolist(),
            "phase": self.phase,
        }


class CallableField:
    """Arbitrary user coefficient; pickling it is the caller's concern"""

    is_constant = False

    def __init__(self, fn: Callable, shape=(), vectorized=False):
        self.fn = fn
        self._shape = tuple(shape)
        self.vectorized = vectorized

    @property
    def shape(self):
        return self._shape

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float).reshape(self._shape)

    def many(self, points):
        points = np.asarray(points, dtype=float)
        if self.vectorized:
            return np.asarray(self.fn(points), dtype=float).reshape(-1, *self._shape)
        return np.stack([self(p) for p in points]) if len(points) else np.zeros((0, *self._shape))

    def to_dict(self):
        return {"kind": "callable", "name": getattr(self.fn, "__name__", repr(self.fn))}


Field = Union[ConstantField, TrigField, CallableField]


def as_field(value) -> Field:
    if isinstance(value, (ConstantField, TrigField, CallableField)):
        return value
    if callable(value):
        return CallableField(value)
    return ConstantField(value)


# ----------------------------------------------------------------------
# normalized jump-size laws of finite-activity measures
# ----------------------------------------------------------------------
def _redraw_zeros(draw, rng, n):
    sizes = draw(rng, n)
    zero = ~np.any(sizes != 0, axis=1)
    while zero.any():
        sizes[zero] = draw(rng, int(zero.sum()))
        zero = ~np.any(sizes != 0, axis=1)
    return sizes


class GaussianMixtureLaw:
    """Mixture of normal bumps; narrow bumps approximate atoms"""

    has_density = True
    TAIL_SIGMAS = 12.0

    def __init__(self, means, scales, weights=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        m, dim = self.means.shape
        scales = np.asarray(scales, dtype=float)
        self.scales = np.broadcast_to(scales, (m,)).astype(float) if scales.ndim <= 1 else None
        if self.scales is None or np.any(self.scales <= 0):
            raise ModelError("mixture scales must be positive scalars, one per component")
        weights = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
        if weights.shape != (m,) or np.any(weights <= 0):
            raise ModelError("mixture weights must be positive, one per component")
        self.weights = weights / weights.sum()
        self.dim = dim

    @property
    def is_symmetric(self):
        mirror = {(tuple(np.round(-mu, 12)), s, w) for mu, s, w in self._components()}
        return mirror == {(tuple(np.round(mu, 12)), s, w) for mu, s, w in self._components()}

    def _components(self):
        return [
            (mu, round(float(s), 12), round(float(w), 12))
            for mu, s, w in zip(self.means, self.scales, self.weights)
        ]

    def support_box(self):
        pad = self.TAIL_SIGMAS * self.scales[:, None]
        return (self.means - pad).min(axis=0), (self.means + pad).max(axis=0)

    def pdf(self, y):
        y = _points(y, self.dim)
        diff = y[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff**2, axis=2) / self.scales**2
        norm = (2.0 * np.pi * self.scales**2) ** (self.dim / 2.0)
        return np.sum(self.weights * np.exp(-0.5 * sq) / norm, axis=1)

    def _draw(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.scales[comp, None] * rng.standard_normal((n, self.dim))

    def sample(self, rng, n):
        return _redraw_zeros(self._draw, rng, n)

    def to_dict(self):
        return {
            "kind": "normal",
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "weights": self.weights.tolist(),
        }


class UniformBoxLaw:
    """Uniform jump sizes on a box"""

    has_density = True

    def __init__(self, low, high):
        self.low = np.atleast_1d(np.asarray(low, dtype=float))
        self.high = np.atleast_1d(np.asarray(high, dtype=float))
        if self.low.shape != self.high.shape or np.any(self.high <= self.low):
            raise ModelError(f"invalid uniform box [{self.low}, {self.high}]")
        self.dim = self.low.size

    @property
    def is_symmetric(self):
        return bool(np.allclose(self.low, -self.high))

    def support_box(self):
        return self.low.copy(), self.high.copy()

    def pdf(self, y):
        y = _points(y, self.dim)
        inside = np.all((y >= self.low) & (y <= self.high), axis=1)
        return inside / float(np.prod(self.high - self.low))

    def _draw(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, self.dim))

    def sample(self, rng, n):
        return _redraw_zeros(self._draw, rng, n)

    def to_dict(self):
        return {"kind": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}


class SamplerLaw:
    """Jump sizes known only through a sampler(rng, n) -> (n, d)"""

    has_density = False

    def __init__(self, sampler: Callable, dim: int, small_jump_mean=None, symmetric=False):
        self.sampler = sampler
        self.dim = dim
        self.small_jump_mean = small_jump_mean
        self.is_symmetric = symmetric

    def support_box(self):
        raise NotEvaluableError("sampler-only jump law has no density to integrate")

    def pdf(self, y):
        raise NotEvaluableError("sampler-only jump law has no density to integrate")

    def _draw(self, rng, n):
        return np.asarray(self.sampler(rng, n), dtype=float).reshape(n, self.dim)

    def sample(self, rng, n):
        return _redraw_zeros(self._draw, rng, n)

    def to_dict(self):
        return {"kind": "sampler", "name": getattr(self.sampler, "__name__", "sampler")}


JumpLaw = Union[GaussianMixtureLaw, UniformBoxLaw, SamplerLaw]


# ----------------------------------------------------------------------
# jump measures
# ----------------------------------------------------------------------
class Atoms:
    """nu = sum_k rate_k delta_{y_k}"""

    is_finite = True
    is_constant = True
    evaluable = True

    def __init__(self, locations, rates):
        locs = np.asarray(locations, dtype=float)
        self.locations = locs.reshape(len(locs), -1) if locs.ndim <= 1 else locs
        self.rates = np.atleast_1d(np.asarray(rates, dtype=float))
        if self.rates.shape != (self.locations.shape[0],):
            raise ModelError("atoms need exactly one rate per location")
        if np.any(self.rates <= 0) or not np.all(np.isfinite(self.rates)):
            raise ModelError(f"atom rates must be positive, got {self.rates.tolist()}")
        if np.any(~np.any(self.locations != 0, axis=1)):
            raise ModelError("atom at the origin: nu({0}) must be 0")
        self.dim = self.locations.shape[1]

    @property
    def total_rate(self):
        return float(self.rates.sum())

    @property
    def is_symmetric(self):
        pairs = {(tuple(np.round(y, 12)), round(float(r), 12)) for y, r in zip(self.locations, self.rates)}
        return pairs == {(tuple(np.round(-y, 12)), round(float(r), 12)) for y, r in zip(self.locations, self.rates)}

    def rate_at(self, points):
        return np.full(_points(points, self.dim).shape[0], self.total_rate)

    def small_jump_mean(self, points):
        small = np.linalg.norm(self.locations, axis=1) <= COMPENSATION_RADIUS
        mean = (self.rates[small, None] * self.locations[small]).sum(axis=0)
        return np.broadcast_to(mean, (_points(points, self.dim).shape[0], self.dim)).copy()

    def truncated_second_moment(self, points):
        sq = np.minimum(1.0, np.sum(self.locations**2, axis=1))
        return np.full(_points(points, self.dim).shape[0], float(self.rates @ sq))

    def sample_sizes(self, rng, n):
        comp = rng.choice(len(self.rates), size=n, p=self.rates / self.total_rate)
        return self.locations[comp]

    def to_dict(self):
        return {"kind": "atoms", "locations": self.locations.tolist(), "rates": self.rates.tolist()}


class FiniteDensity:
    """nu(x, dy) = rate(x) * law(dy) with a normalized jump-size law"""

    is_finite = True

    def __init__(self, rate, law: JumpLaw, rtol=QUAD_RTOL, budget=QUAD_BUDGET):
        self.rate = as_field(rate)
        self.law = law
        self.dim = law.dim
        self.rtol = rtol
        self.budget = budget
        self._small_mean = None

    @property
    def is_constant(self):
        return self.rate.is_constant

    @property
    def evaluable(self):
        return self.law.has_density

    @property
    def is_symmetric(self):
        return bool(self.law.is_symmetric)

    def rate_at(self, points):
        return self.rate.many(_points(points, self.dim)).reshape(-1)

    def law_small_mean(self) -> np.ndarray:
        """int_{|y|<=1} y law(dy), computed once"""
        if self._small_mean is None:
            if self.is_symmetric:
                self._small_mean = np.zeros(self.dim)
            elif not self.law.has_density:
                if self.law.small_jump_mean is None:
                    raise NotEvaluableError(
                        "asymmetric sampler-only law needs small_jump_mean for the compensator"
                    )
                self._small_mean = np.asarray(self.law.small_jump_mean, dtype=float)
            else:
                low, high = self.law.support_box()
                low = np.maximum(low, -COMPENSATION_RADIUS)
                high = np.minimum(high, COMPENSATION_RADIUS)
                mean = np.zeros(self.dim)
                if np.all(high > low):
                    for j in range(self.dim):

                        def integrand(*y, j=j):
                            y = np.array(y)
                            if np.linalg.norm(y) > COMPENSATION_RADIUS:
                                return 0.0
                            return y[j] * float(self.law.pdf(y)[0])

                        mean[j] = integrate_box(integrand, low, high, self.rtol, self.budget)[0]
                self._small_mean = mean
        return self._small_mean

    def small_jump_mean(self, points):
        return self.rate_at(points)[:, None] * self.law_small_mean()[None, :]

    def truncated_second_moment(self, points):
        # min(1, |y|^2) <= 1 so the total rate bounds it
        return self.rate_at(points)

    def sample_sizes(self, rng, n):
        return self.law.sample(rng, n)

    def to_dict(self):
        return {"kind": "density", "rate": self.rate.to_dict(), "law": self.law.to_dict()}


class SymmetricStable:
    """Rotationally symmetric stable jumps with symbol gamma(x) |xi|^alpha(x)"""

    is_finite = False
    evaluable = True
    is_symmetric = True

    def __init__(self, alpha, gamma, dim=1):
        self.alpha = as_field(alpha)
        self.gamma = as_field(gamma)
        self.dim = dim
        if self.alpha.is_constant:
            a = float(self.alpha.value)
            if not 0.0 < a < 2.0:
                raise ModelError(f"stability index must lie in (0, 2), got {a}")
        if self.gamma.is_constant and float(self.gamma.value) <= 0:
            raise ModelError(f"stable scale must be positive, got {float(self.gamma.value)}")

    @property
    def is_constant(self):
        return self.alpha.is_constant and self.gamma.is_constant

    def alpha_at(self, points):
        return self.alpha.many(_points(points, self.dim)).reshape(-1)

    def gamma_at(self, points):
        return self.gamma.many(_points(points, self.dim)).reshape(-1)

    def small_jump_mean(self, points):
        return np.zeros((_points(points, self.dim).shape[0], self.dim))

    def truncated_second_moment(self, points):
        alpha = self.alpha_at(points)
        gam = self.gamma_at(points)
        sphere = 2.0 * np.pi ** (self.dim / 2.0) / gamma_fn(self.dim / 2.0)
        const = np.array([stable_density_constant(a, self.dim) for a in alpha])
        return gam * const * sphere * (1.0 / (2.0 - alpha) + 1.0 / alpha)

    def to_dict(self):
        return {"kind": "stable", "alpha": self.alpha.to_dict(), "gamma": self.gamma.to_dict()}


JumpMeasure = Union[Atoms, FiniteDensity, SymmetricStable]


# ----------------------------------------------------------------------
# driving model
# ----------------------------------------------------------------------
class DrivingModel:
    """State-dependent triplet (b(x), c(x), nu(x, dy)) with an optional period"""

    def __init__(
        self,
        dim: int,
        drift=None,
        diffusion=None,
        jumps: Optional[JumpMeasure] = None,
        period=None,
        name: str = "model",
        probe_points: int = PROBE_POINTS,
    ):
        if int(dim) < 1:
            raise ModelError(f"dimension must be at least 1, got {dim}")
        self.dim = int(dim)
        self.drift = as_field(np.zeros(self.dim) if drift is None else drift)
        self.diffusion = as_field(np.zeros((self.dim, self.dim)) if diffusion is None else diffusion)
        self.jumps = jumps
        self.name = name
        if period is None:
            self.period = None
        else:
            period = np.atleast_1d(np.asarray(period, dtype=float))
            if period.shape != (self.dim,) or np.any(period <= 0) or not np.all(np.isfinite(period)):
                raise ModelError(f"period must hold {self.dim} positive entries, got {period.tolist()}")
            self.period = tuple(float(t) for t in period)
        if self.drift.shape not in ((self.dim,), ()) and not isinstance(self.drift, CallableField):
            raise ModelError(f"drift must be a {self.dim}-vector, got shape {self.drift.shape}")
        if jumps is not None and jumps.dim != self.dim:
            raise ModelError(f"jump measure lives in dimension {jumps.dim}, model in {self.dim}")
        self._validate(probe_points)

    # ------------------------------------------------------------------
    @property
    def is_levy(self) -> bool:
        return (
            self.drift.is_constant
            and self.diffusion.is_constant
            and (self.jumps is None or self.jumps.is_constant)
        )

    @property
    def is_periodic(self) -> bool:
        return self.period is not None

    @property
    def is_symmetric(self) -> bool:
        if not self.drift.is_constant or np.any(self.drift.value != 0):
            return False
        return self.jumps is None or bool(self.jumps.is_symmetric)

    @property
    def has_jumps(self) -> bool:
        return self.jumps is not None

    def probe_grid(self, n=PROBE_POINTS) -> np.ndarray:
        """Deterministic probe points: one period box, or [-PROBE_BOX, PROBE_BOX]^d"""
        rng = np.random.default_rng(20240611)
        if self.period is not None:
            return rng.uniform(0.0, 1.0, size=(n, self.dim)) * np.array(self.period)
        return rng.uniform(-PROBE_BOX, PROBE_BOX, size=(n, self.dim))

    # ------------------------------------------------------------------
    def drift_at(self, points) -> np.ndarray:
        return self.drift.many(_points(points, self.dim)).reshape(-1, self.dim)

    def diffusion_at(self, points) -> np.ndarray:
        return self.diffusion.many(_points(points, self.dim)).reshape(-1, self.dim, self.dim)

    def diffusion_sqrt(self, points) -> np.ndarray:
        return np.stack([psd_sqrt(c) for c in self.diffusion_at(points)])

    def effective_drift(self, points) -> np.ndarray:
        """b(x) - int_{|y|<=1} y nu(x, dy): the drift of the uncompensated jump form"""
        b = self.drift_at(points)
        if self.jumps is None:
            return b
        return b - self.jumps.small_jump_mean(points)

    def rate_at(self, points) -> np.ndarray:
        if self.jumps is None:
            return np.zeros(_points(points, self.dim).shape[0])
        if not self.jumps.is_finite:
            raise ModelError("infinite-activity measure has no finite jump rate")
        return self.jumps.rate_at(points)

    # ------------------------------------------------------------------
    def _validate(self, n):
        probes = self.probe_grid(n)
        cs = self.diffusion_at(probes)
        for c in cs:
            psd_sqrt(c)
        if self.jumps is not None and self.jumps.is_finite:
            if np.any(self.jumps.rate_at(probes) < 0):
                raise ModelError("jump rate must be nonnegative")
        if isinstance(self.jumps, SymmetricStable):
            alpha = self.jumps.alpha_at(probes)
            gam = self.jumps.gamma_at(probes)
            if alpha.min() <= 0 or alpha.max() >= 2:
                raise ModelError(
                    f"stable-like index must stay inside (0, 2), probed [{alpha.min()}, {alpha.max()}]"
                )
            if gam.min() <= 0:
                raise ModelError(f"stable-like scale must stay positive, probed min {gam.min()}")
        if self.period is not None:
            self._check_periodic(probes)

    def _check_periodic(self, probes):
        tau = np.array(self.period)
        for j in range(self.dim):
            shifted = probes.copy()
            shifted[:, j] += tau[j]
            pairs = [(self.drift_at, "drift"), (self.diffusion_at, "diffusion")]
            if self.jumps is not None and self.jumps.is_finite:
                pairs.append((self.jumps.rate_at, "jump rate"))
            if isinstance(self.jumps, SymmetricStable):
                pairs += [(self.jumps.alpha_at, "alpha"), (self.jumps.gamma_at, "gamma")]
            for fn, label in pairs:
                a, b = fn(probes), fn(shifted)
                if not np.allclose(a, b, rtol=1e-9, atol=1e-9):
                    raise ModelError(f"{label} is not periodic with period {tau[j]} along axis {j}")

    def to_dict(self):
        return {
            "name": self.name,
            "dimension": self.dim,
            "drift": self.drift.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "jumps": None if self.jumps is None else self.jumps.to_dict(),
            "period": None if self.period is None else list(self.period),
            "is_levy": self.is_levy,
        }

    def __repr__(self):
        return f"<DrivingModel {self.name} dim={self.dim} levy={self.is_levy} period={self.period}>"


# ----------------------------------------------------------------------
# symbol values and condition reports
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SymbolValue:
    """q(x, xi) with its Levy-Khintchine parts"""

    quadratic: float
    jump_real: float
    drift_imag: float
    jump_imag: float

    @property
    def value(self) -> complex:
        return complex(self.real, self.imag)

    @property
    def real(self) -> float:
        return self.quadratic + self.jump_real

    @property
    def imag(self) -> float:
        return self.drift_imag + self.jump_imag

    def to_dict(self):
        return {
            "re": self.real,
            "im": self.imag,
            "quadratic": self.quadratic,
            "jump_real": self.jump_real,
            "drift_imag": self.drift_imag,
            "jump_imag": self.jump_imag,
        }


@dataclass
class CheckResult:
    """Outcome of one analytic condition check"""

    check: str
    status: str  # pass | fail | inconclusive | diagnostic
    hard: bool = False
    k0: Optional[tuple] = None
    value: Optional[float] = None
    details: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status != "fail"

    def to_dict(self):
        return {
            "check": self.check,
            "status": self.status,
            "hard": self.hard,
            "k0": None if self.k0 is None else list(self.k0),
            "value": self.value,
            "details": self.details,
            "notes": list(self.notes),
        }


# ----------------------------------------------------------------------
# tracer model: drift laws and initial laws
# ----------------------------------------------------------------------
class PointDrift:
    is_point = True

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    @property
    def mean(self):
        return self.value.copy()

    def sample(self, rng):
        return self.value.copy()

    def to_dict(self):
        return {"kind": "point", "value": self.value.tolist()}


class NormalDrift:
    is_point = False

    def __init__(self, mean, cov):
        self._mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.asarray(cov, dtype=float).reshape(self._mean.size, self._mean.size)
        self._root = psd_sqrt(self.cov)

    @property
    def mean(self):
        return self._mean.copy()

    def sample(self, rng):
        return self._mean + self._root @ rng.standard_normal(self._mean.size)

    def to_dict(self):
        return {"kind": "normal", "mean": self._mean.tolist(), "cov": self.cov.tolist()}


class EmpiricalDrift:
    is_point = False

    def __init__(self, values):
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] < 1:
            raise ModelError("empirical drift law needs at least one vector")

    @property
    def mean(self):
        return self.values.mean(axis=0)

    def sample(self, rng):
        return self.values[rng.integers(self.values.shape[0])].copy()

    def to_dict(self):
        return {"kind": "empirical", "values": self.values.tolist()}


DriftLaw = Union[PointDrift, NormalDrift, EmpiricalDrift]


class PointStart:
    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def sample(self, rng):
        return self.value.copy()

    def to_dict(self):
        return {"kind": "point", "value": self.value.tolist()}


class NormalStart:
    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.asarray(cov, dtype=float).reshape(self.mean.size, self.mean.size)
        self._root = psd_sqrt(self.cov)

    def sample(self, rng):
        return self.mean + self._root @ rng.standard_normal(self.mean.size)

    def to_dict(self):
        return {"kind": "normal", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class UniformStart:
    """Uniform over one period box"""

    def __init__(self, period):
        self.period = np.atleast_1d(np.asarray(period, dtype=float))

    def sample(self, rng):
        return rng.uniform(0.0, 1.0, size=self.period.size) * self.period

    def to_dict(self):
        return {"kind": "uniform", "period": self.period.tolist()}


InitialLaw = Union[PointStart, NormalStart, UniformStart]


class TracerModel:
    """dX = (D + v(F_t)) dt + Sigma^{1/2} dB with v = (A w^1, ..., A w^d)"""

    def __init__(
        self,
        driving: DrivingModel,
        functions: list,
        noise_cov=None,
        drift_law: Optional[DriftLaw] = None,
        initial_law: Optional[InitialLaw] = None,
        x0=None,
    ):
        if not functions:
            raise ModelError("tracer needs at least one test function")
        self.driving = driving
        self.functions: list[PeriodicFunction] = list(functions)
        self.dim = len(self.functions)
        periods = {f.period for f in self.functions}
        if len(periods) != 1:
            raise ModelError(f"test functions must share one period, got {sorted(periods)}")
        self.period = self.functions[0].period
        if any(f.dim != driving.dim for f in self.functions):
            raise ModelError("test functions must live in the driving dimension")
        if driving.period is not None and not np.allclose(driving.period, self.period):
            raise ModelError(
                f"test function period {self.period} does not match model period {driving.period}"
            )
        if driving.period is None and not driving.is_levy:
            raise ModelError("state-dependent driving models need a period")

        self.noise_cov = (
            np.zeros((self.dim, self.dim))
            if noise_cov is None
            else np.asarray(noise_cov, dtype=float).reshape(self.dim, self.dim)
        )
        self.noise_root = psd_sqrt(self.noise_cov)
        self.drift_law = drift_law or PointDrift(np.zeros(self.dim))
        if self.drift_law.mean.size != self.dim:
            raise ModelError(f"drift law must be {self.dim}-dimensional")
        self.initial_law = initial_law or PointStart(np.zeros(driving.dim))
        self.x0 = np.zeros(self.dim) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
        if self.x0.size != self.dim:
            raise ModelError(f"tracer start must be {self.dim}-dimensional")

    @property
    def mean_drift(self) -> np.ndarray:
        """bar V, the mean of the drift law"""
        return self.drift_law.mean

    def to_dict(self):
        return {
            "driving": self.driving.to_dict(),
            "functions": [f.to_dict() for f in self.functions],
            "noise_cov": self.noise_cov.tolist(),
            "drift_law": self.drift_law.to_dict(),
            "initial_law": self.initial_law.to_dict(),
            "x0": self.x0.tolist(),
        }


# ----------------------------------------------------------------------
# paths
# ----------------------------------------------------------------------
@dataclass
class PathSample:
    """Driving path on the grid t_m = m * dt"""

    dt: float
    states: np.ndarray
    period: Optional[tuple] = None
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jump_sizes: Optional[np.ndarray] = None
    stream_id: tuple = ()

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.jump_sizes is None:
            self.jump_sizes = np.zeros((0, self.states.shape[1]))
        if not np.all(np.isfinite(self.states)):
            raise ModelError("path left the finite range")
        if self.jump_times.size and np.any(np.diff(self.jump_times) <= 0):
            raise ModelError("jump log times must increase strictly")
        if self.jump_sizes.size and np.any(~np.any(self.jump_sizes != 0, axis=1)):
            raise ModelError("jump log holds a zero jump")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt

    @property
    def torus_states(self) -> Optional[np.ndarray]:
        if self.period is None:
            return None
        return project(self.states, self.period)

    def to_dict(self):
        return {
            "dt": self.dt,
            "n_steps": self.n_steps,
            "period": None if self.period is None else list(self.period),
            "initial": self.states[0].tolist(),
            "final": self.states[-1].tolist(),
            "n_jumps": int(self.jump_times.size),
            "stream_id": list(self.stream_id),
        }


@dataclass
class TracerPath:
    """X_t = x0 + D t + I_t + (Sigma^{1/2} B)_t on the driving grid"""

    driving: PathSample
    drift: np.ndarray
    x0: np.ndarray
    integral: np.ndarray
    noise: np.ndarray

    @property
    def values(self) -> np.ndarray:
        t = self.driving.times[:, None]
        return self.x0 + self.drift * t + self.integral + self.noise

    def to_dict(self):
        return {
            "driving": self.driving.to_dict(),
            "drift": np.asarray(self.drift).tolist(),
            "x0": np.asarray(self.x0).tolist(),
            "final": self.values[-1].tolist(),
        }


# ----------------------------------------------------------------------
# ergodic and statistical reports
# ----------------------------------------------------------------------
@dataclass
class CovarianceReport:
    """C = Sigma + C~ with provenance"""

    sigma: np.ndarray
    ergodic: np.ndarray
    method: str  # series | quadrature | monte-carlo
    invariant: str = "uniform"  # uniform | empirical
    diagnostics: dict = field(default_factory=dict)
    psd_tol: float = PSD_TOL

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        self.ergodic = np.atleast_2d(np.asarray(self.ergodic, dtype=float))
        # symmetrize away roundoff, then require PSD
        self.ergodic = 0.5 * (self.ergodic + self.ergodic.T)
        eig = np.linalg.eigvalsh(self.ergodic)
        scale = max(1.0, float(np.max(np.abs(eig)))) if eig.size else 1.0
        self.diagnostics.setdefault("min_eigenvalue", float(eig.min()) if eig.size else 0.0)
        if eig.size and eig.min() < -self.psd_tol * scale:
            raise NumericalError(
                f"{self.method} covariance is not positive semidefinite (eigenvalue {eig.min():.3e})"
            )

    @property
    def total(self) -> np.ndarray:
        return self.sigma + self.ergodic

    def to_dict(self):
        return {
            "method": self.method,
            "invariant": self.invariant,
            "sigma": _matrix(self.sigma),
            "ergodic": _matrix(self.ergodic),
            "total": _matrix(self.total),
            "diagnostics": self.diagnostics,
        }


@dataclass
class OccupationHistogram:
    """Time-weighted occupation counts of the torus projection"""

    period: tuple
    bins: int
    counts: np.ndarray
    total_time: float

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if np.any(self.counts < 0):
            raise ModelError("occupation counts must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.period)

    @property
    def mass(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total > 0 else self.counts

    @property
    def edges(self) -> list:
        return [np.linspace(0.0, t, self.bins + 1) for t in self.period]

    def bin_centres(self) -> np.ndarray:
        axes = [(e[:-1] + e[1:]) / 2.0 for e in self.edges]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def tv_to_uniform(self) -> float:
        return 0.5 * float(np.abs(self.mass - 1.0 / self.mass.size).sum())

    def to_dict(self):
        return {
            "period": list(self.period),
            "bins": self.bins,
            "total_time": self.total_time,
            "mass": self.mass.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OccupationHistogram":
        period = tuple(float(t) for t in data["period"])
        bins = int(data["bins"])
        mass = np.asarray(data["mass"], dtype=float).reshape([bins] * len(period))
        return cls(period=period, bins=bins, counts=mass, total_time=float(data["total_time"]))


@dataclass
class KSResult:
    statistic: float
    pvalue: float
    n: int

    def to_dict(self):
        return {"statistic": self.statistic, "pvalue": self.pvalue, "n": self.n}


@dataclass
class EnsembleStats:
    """Monte Carlo summary of an ensemble of vector samples"""

    n_samples: int
    mean: np.ndarray
    covariance: np.ndarray
    standard_errors: np.ndarray
    covariance_errors: np.ndarray
    ks: list = field(default_factory=list)
    jump_cap: Optional[dict] = None

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "mean": np.asarray(self.mean).tolist(),
            "covariance": _matrix(self.covariance),
            "standard_errors": np.asarray(self.standard_errors).tolist(),
            "covariance_errors": _matrix(self.covariance_errors),
            "ks": [r.to_dict() for r in self.ks],
            "jump_cap": self.jump_cap,
        }


@dataclass
class TVDecayReport:
    times: list
    tv: list
    noise_floor: list
    rate: Optional[float]
    prefactor: Optional[float]
    decays: bool
    reference: str
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "times": list(self.times),
            "tv": list(self.tv),
            "noise_floor": list(self.noise_floor),
            "rate": self.rate,
            "prefactor": self.prefactor,
            "decays": self.decays,
            "reference": self.reference,
            "notes": list(self.notes),
        }


@dataclass
class LLNRung:
    n: int
    mean_deviation: float
    stderr: float
    bound: Optional[float] = None

    def to_dict(self):
        return {
            "n": self.n,
            "mean_deviation": self.mean_deviation,
            "stderr": self.stderr,
            "bound": self.bound,
        }


@dataclass
class LLNReport:
    t: float
    centring: str
    rungs: list
    slope: Optional[float]
    decreasing: bool

    def to_dict(self):
        return {
            "t": self.t,
            "centring": self.centring,
            "rungs": [r.to_dict() for r in self.rungs],
            "slope": self.slope,
            "decreasing": self.decreasing,
        }


@dataclass
class CLTRow:
    t: float
    stats: EnsembleStats
    theoretical: np.ndarray
    relative_error: float
    within_stderr: bool

    def to_dict(self):
        return {
            "t": self.t,
            "stats": self.stats.to_dict(),
            "theoretical": _matrix(self.theoretical),
            "relative_error": self.relative_error,
            "within_stderr": self.within_stderr,
        }


@dataclass
class CLTReport:
    n: int
    rows: list
    verdict: bool
    tol_cov: float
    p_min: float
    centring: str
    unconditional: Optional[list] = None
    linearity_ratio: Optional[float] = None

    def to_dict(self):
        return {
            "n": self.n,
            "verdict": "pass" if self.verdict else "fail",
            "tol_cov": self.tol_cov,
            "p_min": self.p_min,
            "centring": self.centring,
            "rows": [r.to_dict() for r in self.rows],
            "unconditional": self.unconditional,
            "linearity_ratio": self.linearity_ratio,
        }


@dataclass
class JumpCapReport:
    n: int
    max_jump: float
    cap: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_jump <= self.cap + self.tolerance)

    def to_dict(self):
        return {
            "n": self.n,
            "max_jump": self.max_jump,
            "cap": self.cap,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


@dataclass
class DynkinReport:
    label: str
    mean: float
    stderr: float
    n_paths: int
    z_max: float = 4.0
    atol: float = DYNKIN_ATOL

    @property
    def passed(self) -> bool:
        return bool(abs(self.mean) <= self.z_max * self.stderr + self.atol)

    def to_dict(self):
        return {
            "label": self.label,
            "mean": self.mean,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "passed": self.passed,
        }
