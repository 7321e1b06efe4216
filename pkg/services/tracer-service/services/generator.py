"""
The generator A of a driving model applied to periodic test functions.

A w(x) = <b(x), grad w(x)> + 1/2 div c(x) grad w(x)
         + int (w(x+y) - w(x) - <y, grad w(x)> 1_{|y|<=1}) nu(x, dy)

For a trigonometric polynomial the same value is -Re sum_k q(x, omega_k) w(k) e^{i<omega_k, x>},
which is the route used for vectorised evaluation.
"""

import logging
from typing import Optional

import numpy as np
from scipy import integrate

from config import COMPENSATION_RADIUS, QUAD_BUDGET, QUAD_RTOL, STABLE_SMALL_JUMP_EPS
from errors import ConfigError, ModelError, NonLevyError, NotEvaluableError, NumericalError
from models import Atoms, DrivingModel, FiniteDensity, SymmetricStable, stable_density_constant
from services.symbols import SymbolService
from services.torus import PeriodicFunction, torus_average, torus_grid
from utils.quadrature import integrate_box

logger = logging.getLogger(__name__)

METHODS = ("auto", "quadrature", "symbol")


def _points(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (x.ndim == 1 and dim > 1) or (x.ndim == 1 and x.size == 1 and dim == 1)
    return x.reshape(-1, dim), single


def _finish(values, single):
    return float(values[0]) if single else values


class VelocityField:
    """v(x) = (A w^1(x), ..., A w^d(x)); picklable so worker processes can evaluate it"""

    def __init__(
        self,
        model: DrivingModel,
        functions: list,
        generator: "GeneratorService",
        spectral: Optional[list] = None,
    ):
        self.model = model
        self.functions = list(functions)
        self.generator = generator
        self.spectral = spectral
        self.dim = len(self.functions)

    @property
    def is_spectral(self) -> bool:
        return self.spectral is not None

    def many(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, self.model.dim)
        if self.spectral is not None:
            return np.stack([f.evaluate(points).reshape(-1) for f in self.spectral], axis=1)
        return np.stack(
            [self.generator.apply_symbol(self.model, w, points) for w in self.functions], axis=1
        )

    def __call__(self, x) -> np.ndarray:
        return self.many(np.asarray(x, dtype=float).reshape(-1, self.model.dim))[0]

    def period_mean(self, n_per_axis: int = 256) -> np.ndarray:
        """Uniform torus mean of each component"""
        period = self.functions[0].period
        return np.array(
            [torus_average(lambda p, i=i: self.many(p)[:, i], period, n_per_axis) for i in range(self.dim)]
        )

    def sup_norm(self, n_per_axis: int = 256) -> float:
        grid = torus_grid(self.functions[0].period, n_per_axis)
        return float(np.abs(self.many(grid)).max())


class GeneratorService:
    """Applies the integro-differential generator pointwise, spectrally and as a carre du champ"""

    def __init__(
        self,
        symbols: Optional[SymbolService] = None,
        small_jump_eps: float = STABLE_SMALL_JUMP_EPS,
        rtol: float = QUAD_RTOL,
        budget: int = QUAD_BUDGET,
    ):
        self.symbols = symbols or SymbolService(rtol=rtol, budget=budget)
        self.small_jump_eps = small_jump_eps
        self.rtol = rtol
        self.budget = budget
        self._stable_mode_cache: dict = {}

    # ------------------------------------------------------------------
    # spectral route
    # ------------------------------------------------------------------
    def apply_fourier(self, model: DrivingModel, w: PeriodicFunction) -> PeriodicFunction:
        """Coefficients -q(omega_k) w(k) for a Levy model"""
        if not model.is_levy:
            raise NonLevyError(f"{model.name}: state-dependent coefficients mix Fourier modes")
        if w.dim != model.dim:
            raise ModelError(f"test function dimension {w.dim} differs from model dimension {model.dim}")
        if not len(w.values):
            return w.with_values([], label=f"A{w.label or ''}")
        q = self.symbols.levy_symbol(model, w.frequencies())
        values = -q * w.values
        # q(-xi) = conj q(xi); enforce it exactly on the output
        index = {tuple(k): i for i, k in enumerate(w.lattice)}
        mirror = np.array([index[tuple(-k)] for k in w.lattice])
        values = 0.5 * (values + np.conj(values[mirror]))
        return w.with_values(values, label=f"A{w.label or ''}")

    def apply_symbol(self, model: DrivingModel, w: PeriodicFunction, x) -> np.ndarray:
        """-Re sum_k q(x, omega_k) w(k) e^{i<omega_k, x>}, exact for any evaluable symbol"""
        points, _ = _points(x, model.dim)
        if not len(w.values):
            return np.zeros(points.shape[0])
        omegas = w.frequencies()
        q = self.symbols.symbol_at(model, points, omegas)
        phases = np.exp(1j * points @ omegas.T)
        return -np.real(np.sum(q * phases * w.values[None, :], axis=1))

    # ------------------------------------------------------------------
    # pointwise route
    # ------------------------------------------------------------------
    def _local_part(self, model, w, points):
        grad = w.gradient(points).reshape(-1, model.dim)
        drift = np.sum(model.drift_at(points) * grad, axis=1)
        diffusion = np.asarray(w.hessian_trace_form(points, model.diffusion_at(points))).reshape(-1)
        return drift + diffusion, grad

    def _atom_jumps(self, jumps: Atoms, w, points, grad):
        total = np.zeros(points.shape[0])
        base = np.asarray(w.evaluate(points)).reshape(-1)
        for y, rate in zip(jumps.locations, jumps.rates):
            shifted = np.asarray(w.evaluate(points + y)).reshape(-1)
            compensator = grad @ y if np.linalg.norm(y) <= COMPENSATION_RADIUS else 0.0
            total += rate * (shifted - base - compensator)
        return total

    def _density_jumps(self, jumps: FiniteDensity, w, points, grad):
        law = jumps.law
        if not law.has_density:
            raise NotEvaluableError("sampler-only jump law cannot be integrated pointwise")
        low, high = law.support_box()
        rates = jumps.rate_at(points)
        out = np.zeros(points.shape[0])
        for n, (x, g) in enumerate(zip(points, grad)):
            if rates[n] == 0:
                continue
            wx = float(w.evaluate(x[None, :])[0])

            def integrand(*y, x=x, g=g, wx=wx):
                y = np.array(y)
                comp = g @ y if np.linalg.norm(y) <= COMPENSATION_RADIUS else 0.0
                return (float(w.evaluate((x + y)[None, :])[0]) - wx - comp) * float(law.pdf(y)[0])

            out[n] = rates[n] * integrate_box(integrand, low, high, self.rtol, self.budget)[0]
        return out

    def _stable_mode_integral(self, alpha: float, omega: float) -> float:
        """int_eps^inf (cos(omega y) - 1) y^{-1-alpha} dy"""
        eps = self.small_jump_eps
        key = (round(alpha, 14), round(abs(omega), 14), eps)
        hit = self._stable_mode_cache.get(key)
        if hit is not None:
            return hit
        if omega == 0:
            value = 0.0
        else:
            # whole half-line in closed form, minus the part below eps
            whole = -abs(omega) ** alpha / (2.0 * stable_density_constant(alpha, 1))
            inner, _ = integrate.quad(
                lambda y: 2.0 * np.sin(0.5 * omega * y) ** 2 * y ** (-1.0 - alpha),
                0.0,
                eps,
                epsabs=1e-14,
                epsrel=self.rtol,
            )
            value = whole + inner
        self._stable_mode_cache[key] = value
        return value

    def _stable_like_jumps(self, jumps: SymmetricStable, w, points):
        """One-dimensional small/large jump split at |y| = eps"""
        if jumps.dim != 1:
            raise ModelError("the small-jump split handles one-dimensional stable-like jumps")
        eps = self.small_jump_eps
        alpha = jumps.alpha_at(points)
        gam = jumps.gamma_at(points)
        omegas = w.frequencies()[:, 0]
        hess = w.hessian(points).reshape(-1)
        out = np.zeros(points.shape[0])
        for n, (x, a, g) in enumerate(zip(points[:, 0], alpha, gam)):
            density = g * stable_density_constant(a, 1)
            small = 0.5 * hess[n] * 2.0 * density * eps ** (2.0 - a) / (2.0 - a)
            modes = np.array([self._stable_mode_integral(a, om) for om in omegas])
            large = np.real(np.sum(w.values * np.exp(1j * omegas * x) * 2.0 * density * modes))
            out[n] = small + large
        return out

    def apply_pointwise(self, model: DrivingModel, w: PeriodicFunction, x, method: str = "auto"):
        """A w at one point or an (N, d) array of points"""
        if method not in METHODS:
            raise ConfigError(f"unknown generator method {method!r}")
        if w.dim != model.dim:
            raise ModelError(f"test function dimension {w.dim} differs from model dimension {model.dim}")
        points, single = _points(x, model.dim)
        if method == "symbol":
            return _finish(self.apply_symbol(model, w, points), single)

        jumps = model.jumps
        if isinstance(jumps, SymmetricStable):
            if model.is_levy:
                return _finish(np.asarray(self.apply_fourier(model, w).evaluate(points)).reshape(-1), single)
            if jumps.dim > 1:
                return _finish(self.apply_symbol(model, w, points), single)

        values, grad = self._local_part(model, w, points)
        if isinstance(jumps, Atoms):
            values = values + self._atom_jumps(jumps, w, points, grad)
        elif isinstance(jumps, FiniteDensity):
            values = values + self._density_jumps(jumps, w, points, grad)
        elif isinstance(jumps, SymmetricStable):
            values = values + self._stable_like_jumps(jumps, w, points)
        return _finish(values, single)

    def velocity(self, model: DrivingModel, functions: list) -> VelocityField:
        """Velocity field v = (A w^1, ..., A w^d)"""
        if not functions:
            raise ConfigError("velocity needs at least one test function")
        if len({f.period for f in functions}) != 1:
            raise ModelError("test functions must share one period")
        if model.is_levy:
            spectral = [self.apply_fourier(model, w) for w in functions]
            return VelocityField(model, functions, self, spectral=spectral)
        # probe once so a non-evaluable symbol fails here, not inside a worker
        self.apply_symbol(model, functions[0], np.zeros((1, model.dim)))
        return VelocityField(model, functions, self)

    # ------------------------------------------------------------------
    # carre du champ
    # ------------------------------------------------------------------
    def _spectral_gamma(self, model, wi, wj, points):
        if not len(wi.values) or not len(wj.values):
            return np.zeros(points.shape[0])
        oa, ob = wi.frequencies(), wj.frequencies()
        qa = self.symbols.symbol_at(model, points, oa)
        qb = self.symbols.symbol_at(model, points, ob)
        osum = (oa[:, None, :] + ob[None, :, :]).reshape(-1, model.dim)
        qab = self.symbols.symbol_at(model, points, osum).reshape(-1, len(oa), len(ob))
        bracket = qa[:, :, None] + qb[:, None, :] - qab
        phases = np.exp(1j * points @ osum.T).reshape(-1, len(oa), len(ob))
        weights = wi.values[:, None] * wj.values[None, :]
        values = np.sum(weights[None] * phases * bracket, axis=(1, 2))
        scale = max(1.0, float(np.abs(values).max()))
        if float(np.abs(values.imag).max()) > 1e-9 * scale:
            raise NumericalError("carre du champ has an imaginary residual")
        return values.real

    def _direct_gamma(self, model, wi, wj, points):
        gi = wi.gradient(points).reshape(-1, model.dim)
        gj = wj.gradient(points).reshape(-1, model.dim)
        values = np.einsum("np,npq,nq->n", gi, model.diffusion_at(points), gj)
        jumps = model.jumps
        if isinstance(jumps, Atoms):
            base_i = np.asarray(wi.evaluate(points)).reshape(-1)
            base_j = np.asarray(wj.evaluate(points)).reshape(-1)
            for y, rate in zip(jumps.locations, jumps.rates):
                di = np.asarray(wi.evaluate(points + y)).reshape(-1) - base_i
                dj = np.asarray(wj.evaluate(points + y)).reshape(-1) - base_j
                values = values + rate * di * dj
        elif isinstance(jumps, FiniteDensity):
            law = jumps.law
            if not law.has_density:
                raise NotEvaluableError("sampler-only jump law cannot be integrated pointwise")
            low, high = law.support_box()
            rates = jumps.rate_at(points)
            for n, x in enumerate(points):
                if rates[n] == 0:
                    continue
                vi = float(wi.evaluate(x[None, :])[0])
                vj = float(wj.evaluate(x[None, :])[0])

                def integrand(*y, x=x, vi=vi, vj=vj):
                    z = (x + np.array(y))[None, :]
                    pdf = float(law.pdf(np.array(y))[0])
                    return (float(wi.evaluate(z)[0]) - vi) * (float(wj.evaluate(z)[0]) - vj) * pdf

                values[n] += rates[n] * integrate_box(integrand, low, high, self.rtol, self.budget)[0]
        elif isinstance(jumps, SymmetricStable):
            return None
        return values

    def carre_du_champ(self, model: DrivingModel, wi: PeriodicFunction, wj: PeriodicFunction, x, method: str = "auto"):
        """<grad w^i, c grad w^j> + int (w^i(x+y) - w^i(x)) (w^j(x+y) - w^j(x)) nu(x, dy)"""
        if method not in METHODS:
            raise ConfigError(f"unknown carre du champ method {method!r}")
        points, single = _points(x, model.dim)
        values = None
        if method == "quadrature" or (method == "auto" and not isinstance(model.jumps, FiniteDensity)):
            values = self._direct_gamma(model, wi, wj, points)
        if values is None:
            values = self._spectral_gamma(model, wi, wj, points)
        return _finish(values, single)

    def carre_du_champ_matrix(self, model: DrivingModel, functions: list, points, method: str = "auto") -> np.ndarray:
        """Gamma(w^i, w^j) at every point, shape (N, d, d)"""
        points, _ = _points(points, model.dim)
        d = len(functions)
        out = np.zeros((points.shape[0], d, d))
        for i in range(d):
            for j in range(i, d):
                values = np.asarray(self.carre_du_champ(model, functions[i], functions[j], points, method))
                out[:, i, j] = values.reshape(-1)
                out[:, j, i] = out[:, i, j]
        return out
