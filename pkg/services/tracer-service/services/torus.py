"""
Periodic test functions on the torus R^d / tau Z^d.

A PeriodicFunction is a real trigonometric polynomial stored by its Fourier
coefficients w(k) on a finite set of lattice points. The exponent uses the
per-axis dual lattice, e^{i 2 pi sum_j k_j x_j / tau_j}.
"""

from collections.abc import Callable, Iterable, Mapping
import logging
from typing import Optional

import numpy as np

from errors import ConfigError, ModelError, NumericalError

logger = logging.getLogger(__name__)

IMAG_TOL = 1e-12
SYMMETRY_TOL = 1e-12


def _as_period(period) -> np.ndarray:
    tau = np.atleast_1d(np.asarray(period, dtype=float))
    if tau.ndim != 1 or tau.size == 0:
        raise ConfigError(f"period must be a non-empty vector, got {period!r}")
    if not np.all(np.isfinite(tau)) or np.any(tau <= 0):
        raise ConfigError(f"period entries must be positive, got {tau.tolist()}")
    return tau


def _as_points(x, dim: int) -> tuple[np.ndarray, tuple]:
    """Reshape x into (N, dim) points; also return the output shape"""
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1 or x.ndim == 1):
        return x.reshape(-1, 1), x.shape
    if x.shape[-1] != dim:
        raise ConfigError(f"points must have trailing dimension {dim}, got shape {x.shape}")
    return x.reshape(-1, dim), x.shape[:-1]


def project(x, period) -> np.ndarray:
    """Covering map: componentwise x_j mod tau_j with result in [0, tau_j)"""
    tau = _as_period(period)
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        tau = tau[0]
    r = np.mod(x, tau)
    # np.mod can round a tiny negative input up to exactly tau
    r = np.where(r >= tau, r - tau, r)
    r = np.where(r < 0, 0.0, r)
    return float(r) if x.ndim == 0 else r


class PeriodicFunction:
    """Real tau-periodic trigonometric polynomial"""

    def __init__(
        self,
        period,
        coefficients: Mapping,
        label: Optional[str] = None,
    ):
        self._period = _as_period(period)
        dim = self._period.size
        merged: dict[tuple[int, ...], complex] = {}
        for key, value in coefficients.items():
            k = (int(key),) if np.isscalar(key) else tuple(int(v) for v in key)
            if len(k) != dim:
                raise ModelError(f"lattice point {key!r} does not match dimension {dim}")
            merged[k] = merged.get(k, 0j) + complex(value)

        merged = {k: c for k, c in merged.items() if c != 0}
        for k, c in merged.items():
            partner = merged.get(tuple(-v for v in k), 0j)
            if abs(partner - np.conj(c)) > SYMMETRY_TOL * max(1.0, abs(c)):
                raise ModelError(
                    f"coefficients are not conjugate symmetric at k={k}: "
                    f"w(k)={c}, w(-k)={partner}; only real functions are supported"
                )

        keys = sorted(merged)
        self._ks = np.array(keys, dtype=int).reshape(len(keys), dim)
        self._cs = np.array([merged[k] for k in keys], dtype=complex)
        self.label = label

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------
    @property
    def period(self) -> tuple[float, ...]:
        return tuple(float(t) for t in self._period)

    @property
    def dim(self) -> int:
        return self._period.size

    @property
    def volume(self) -> float:
        """|tau| = tau_1 * ... * tau_d"""
        return float(np.prod(self._period))

    @property
    def lattice(self) -> np.ndarray:
        return self._ks.copy()

    @property
    def values(self) -> np.ndarray:
        return self._cs.copy()

    @property
    def support_radius(self) -> int:
        return int(np.abs(self._ks).max()) if self._ks.size else 0

    def coefficient(self, k) -> complex:
        k = (int(k),) if np.isscalar(k) else tuple(int(v) for v in k)
        hits = np.all(self._ks == np.array(k), axis=1)
        return complex(self._cs[hits][0]) if hits.any() else 0j

    def coefficients(self) -> dict[tuple[int, ...], complex]:
        return {tuple(int(v) for v in k): complex(c) for k, c in zip(self._ks, self._cs)}

    def frequencies(self) -> np.ndarray:
        """Per-axis dual lattice frequencies 2 pi k_j / tau_j, shape (m, d)"""
        return 2.0 * np.pi * self._ks / self._period

    def is_constant(self) -> bool:
        return not np.any(self._ks)

    def mean(self) -> float:
        return float(self.coefficient(np.zeros(self.dim, dtype=int)).real)

    def energy(self) -> float:
        """Parseval: torus mean of w^2"""
        return float(np.sum(np.abs(self._cs) ** 2))

    def smoothness_sum(self) -> float:
        """sum |k|^2 |w(k)|, finite for every band-limited function"""
        return float(np.sum(np.sum(self._ks**2, axis=1) * np.abs(self._cs)))

    def sup_norm(self, n_per_axis: int = 256) -> float:
        points = torus_grid(self.period, n_per_axis)
        return float(np.max(np.abs(self.evaluate(points)))) if self._cs.size else 0.0

    def truncate(self, radius: int) -> tuple["PeriodicFunction", float]:
        """Drop modes with |k|_inf > radius; returns the function and the sup-norm error bound"""
        keep = np.abs(self._ks).max(axis=1, initial=0) <= radius
        dropped = float(np.sum(np.abs(self._cs[~keep])))
        kept = {tuple(k): c for k, c in zip(self._ks[keep], self._cs[keep])}
        return PeriodicFunction(self._period, kept, label=self.label), dropped

    def with_values(self, values, label: Optional[str] = None) -> "PeriodicFunction":
        """Same lattice, new coefficients"""
        return PeriodicFunction(
            self._period,
            {tuple(k): c for k, c in zip(self._ks, np.asarray(values, dtype=complex))},
            label=label,
        )

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def _check_compatible(self, other: "PeriodicFunction"):
        if self.dim != other.dim or not np.allclose(self._period, other._period):
            raise ModelError(f"periods differ: {self.period} vs {other.period}")

    def __add__(self, other: "PeriodicFunction") -> "PeriodicFunction":
        self._check_compatible(other)
        merged = self.coefficients()
        for k, c in other.coefficients().items():
            merged[k] = merged.get(k, 0j) + c
        return PeriodicFunction(self._period, merged)

    def __sub__(self, other: "PeriodicFunction") -> "PeriodicFunction":
        return self + other.scale(-1.0)

    def scale(self, factor: float) -> "PeriodicFunction":
        return self.with_values(self._cs * float(factor), label=self.label)

    def inner(self, other: "PeriodicFunction") -> float:
        """Torus mean of self * other, i.e. sum_k w(k) v(-k)"""
        self._check_compatible(other)
        theirs = other.coefficients()
        total = sum(
            c * theirs.get(tuple(-int(v) for v in k), 0j) for k, c in zip(self._ks, self._cs)
        )
        return float(np.real(total))

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------
    def _phases(self, points: np.ndarray) -> np.ndarray:
        return np.exp(1j * points @ self.frequencies().T)

    def _real(self, values: np.ndarray) -> np.ndarray:
        scale = max(1.0, float(np.sum(np.abs(self._cs))))
        residual = float(np.max(np.abs(values.imag))) if values.size else 0.0
        if residual > IMAG_TOL * scale:
            raise NumericalError(f"imaginary residual {residual:.3e}: corrupted coefficient map")
        return values.real

    def evaluate(self, x):
        points, shape = _as_points(x, self.dim)
        if not self._cs.size:
            values = np.zeros(points.shape[0])
        else:
            values = self._real(self._phases(points) @ self._cs)
        return float(values[0]) if shape == () else values.reshape(shape)

    __call__ = evaluate

    def gradient(self, x):
        points, shape = _as_points(x, self.dim)
        if not self._cs.size:
            grad = np.zeros((points.shape[0], self.dim))
        else:
            weights = self._cs[:, None] * 1j * self.frequencies()
            grad = self._real(self._phases(points) @ weights)
        return grad.reshape(*shape, self.dim) if shape != () else grad[0]

    def hessian(self, x):
        points, shape = _as_points(x, self.dim)
        omega = self.frequencies()
        if not self._cs.size:
            hess = np.zeros((points.shape[0], self.dim, self.dim))
        else:
            outer = -np.einsum("mp,mq->mpq", omega, omega) * self._cs[:, None, None]
            flat = self._phases(points) @ outer.reshape(len(self._cs), -1)
            hess = self._real(flat).reshape(-1, self.dim, self.dim)
        return hess.reshape(*shape, self.dim, self.dim) if shape != () else hess[0]

    def hessian_trace_form(self, x, c):
        """1/2 sum_pq c_pq d_p d_q w(x) for a constant or per-point diffusion matrix"""
        points, shape = _as_points(x, self.dim)
        c = np.asarray(c, dtype=float)
        if c.ndim <= 2:
            c = np.broadcast_to(c.reshape(self.dim, self.dim), (points.shape[0], self.dim, self.dim))
        hess = self.hessian(points).reshape(-1, self.dim, self.dim)
        values = 0.5 * np.einsum("npq,npq->n", c.reshape(-1, self.dim, self.dim), hess)
        return float(values[0]) if shape == () else values.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "period": list(self.period),
            "terms": [
                [*(int(v) for v in k), float(c.real), float(c.imag)]
                for k, c in zip(self._ks, self._cs)
            ],
        }

    def __repr__(self):
        name = self.label or "PeriodicFunction"
        return f"<{name} period={self.period} modes={len(self._cs)}>"


# ----------------------------------------------------------------------
# module level operations
# ----------------------------------------------------------------------
def evaluate(w: PeriodicFunction, x):
    return w.evaluate(x)


def gradient(w: PeriodicFunction, x):
    return w.gradient(x)


def hessian_trace_form(w: PeriodicFunction, x, c):
    return w.hessian_trace_form(x, c)


def torus_grid(period, n_per_axis: int) -> np.ndarray:
    """Uniform grid over one period, shape (n**d, d)"""
    tau = _as_period(period)
    axes = [np.arange(n_per_axis) * (t / n_per_axis) for t in tau]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def torus_average(fn: Callable, period, n_per_axis: int = 512) -> float:
    """Uniform-grid mean over one period, exact for trigonometric polynomials of degree < n"""
    points = torus_grid(period, n_per_axis)
    return float(np.mean(fn(points)))


def fourier_coefficients(
    samples,
    period,
    max_radius: int,
    label: Optional[str] = None,
    prune_tol: float = 1e-13,
) -> PeriodicFunction:
    """DFT estimate of w(k) = |tau|^-1 int e^{-i 2 pi <k, x/tau>} w(x) dx on a uniform grid"""
    tau = _as_period(period)
    values = np.asarray(samples, dtype=float)
    if values.ndim != tau.size:
        raise ConfigError(f"samples have {values.ndim} axes, period has {tau.size}")
    need = 2 * max_radius + 2
    if min(values.shape) < need:
        raise ConfigError(
            f"grid of shape {values.shape} too coarse for radius {max_radius}; "
            f"need at least {need} points per axis"
        )

    spectrum = np.fft.fftn(values) / values.size
    ranges = [range(-max_radius, max_radius + 1)] * tau.size
    grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, tau.size)
    index = tuple((grid % np.array(values.shape)).T)
    raw = spectrum[index]
    mirror = spectrum[tuple((-grid % np.array(values.shape)).T)]
    coeffs = 0.5 * (raw + np.conj(mirror))

    threshold = prune_tol * max(1.0, float(np.max(np.abs(coeffs))) if coeffs.size else 1.0)
    keep = np.abs(coeffs) > threshold
    logger.debug(f"Fourier analysis kept {int(keep.sum())} of {coeffs.size} modes")
    return PeriodicFunction(
        tau, {tuple(k): c for k, c in zip(grid[keep], coeffs[keep])}, label=label
    )


# ----------------------------------------------------------------------
# named primitives
# ----------------------------------------------------------------------
def _axis_point(dim: int, axis: int, mode: int) -> tuple[int, ...]:
    if not 0 <= axis < dim:
        raise ConfigError(f"axis {axis} out of range for dimension {dim}")
    k = [0] * dim
    k[axis] = mode
    return tuple(k)


def sine(period=2 * np.pi, axis: int = 0, mode: int = 1, amplitude: float = 1.0):
    tau = _as_period(period)
    if mode == 0:
        return PeriodicFunction(tau, {}, label="sin")
    k = _axis_point(tau.size, axis, mode)
    minus = tuple(-v for v in k)
    return PeriodicFunction(
        tau, {k: -0.5j * amplitude, minus: 0.5j * amplitude}, label=f"sin{mode}@{axis}"
    )


def cosine(period=2 * np.pi, axis: int = 0, mode: int = 1, amplitude: float = 1.0):
    tau = _as_period(period)
    k = _axis_point(tau.size, axis, mode)
    if mode == 0:
        return PeriodicFunction(tau, {k: amplitude}, label="cos0")
    minus = tuple(-v for v in k)
    return PeriodicFunction(
        tau, {k: 0.5 * amplitude, minus: 0.5 * amplitude}, label=f"cos{mode}@{axis}"
    )


def constant(value: float, period=2 * np.pi):
    tau = _as_period(period)
    return PeriodicFunction(tau, {(0,) * tau.size: value}, label="const")


def from_terms(period, terms: Iterable, label: Optional[str] = None) -> PeriodicFunction:
    """Build from rows (k_1, ..., k_d, re, im); repeated lattice points add up"""
    tau = _as_period(period)
    coeffs: dict[tuple[int, ...], complex] = {}
    for row in terms:
        row = list(row)
        if len(row) != tau.size + 2:
            raise ConfigError(f"term {row!r} must have {tau.size} lattice entries plus re, im")
        k = tuple(int(v) for v in row[: tau.size])
        coeffs[k] = coeffs.get(k, 0j) + complex(row[-2], row[-1])
    return PeriodicFunction(tau, coeffs, label=label)
