"""
Symbol evaluation and analytic condition checks for driving models.

q(x, xi) = -i <xi, b(x)> + 1/2 <xi, c(x) xi>
           - int (e^{i<xi,y>} - 1 - i<xi,y> 1_{|y|<=1}) nu(x, dy)
"""

import itertools
import logging
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gamma as gamma_fn

from config import (
    COMPENSATION_RADIUS,
    EPS_ZERO,
    FREQUENCY_CONVENTION,
    PROBE_POINTS,
    QUAD_BUDGET,
    QUAD_RTOL,
)
from errors import ConfigError, ModelError, NonLevyError, NotEvaluableError, NumericalError
from models import Atoms, CheckResult, DrivingModel, FiniteDensity, SymbolValue, SymmetricStable
from services.torus import PeriodicFunction
from utils.quadrature import integrate_box

logger = logging.getLogger(__name__)

CONVENTIONS = ("per_axis", "scalar")


def lattice(dim: int, k_max: int) -> np.ndarray:
    """Nonzero k with |k|_inf <= k_max, ordered by shell, positive entries first"""
    axis = range(-k_max, k_max + 1)
    ks = [k for k in itertools.product(axis, repeat=dim) if any(k)]
    ks.sort(key=lambda k: (max(abs(v) for v in k), tuple(-v for v in k)))
    return np.array(ks, dtype=int).reshape(-1, dim)


def frequencies(ks, period, convention: str = "per_axis") -> np.ndarray:
    """2 pi k_j / tau_j (per_axis) or 2 pi k / (tau_1 ... tau_d) (scalar)"""
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown frequency convention {convention!r}")
    tau = np.atleast_1d(np.asarray(period, dtype=float))
    ks = np.asarray(ks, dtype=float)
    if convention == "scalar":
        return 2.0 * np.pi * ks / float(np.prod(tau))
    return 2.0 * np.pi * ks / tau


class SymbolService:
    """Evaluates q(x, xi) and checks the spectral and structural conditions"""

    SECTOR_RADII = np.logspace(-1, 2, 16)
    HEAT_KERNEL_CUTOFF = 50.0
    HEAT_KERNEL_RADIAL_POINTS = 400
    ROUNDOFF_FACTOR = 64.0

    def __init__(
        self,
        eps_zero: float = EPS_ZERO,
        rtol: float = QUAD_RTOL,
        budget: int = QUAD_BUDGET,
        convention: str = FREQUENCY_CONVENTION,
    ):
        if convention not in CONVENTIONS:
            raise ConfigError(f"unknown frequency convention {convention!r}")
        self.eps_zero = eps_zero
        self.rtol = rtol
        self.budget = budget
        self.convention = convention
        self._law_cache: dict = {}

    # ------------------------------------------------------------------
    # symbol evaluation
    # ------------------------------------------------------------------
    def _law_symbol(self, measure: FiniteDensity, xi: np.ndarray) -> tuple[float, float]:
        """int (1 - cos<xi,y>) law(dy) and -int (sin<xi,y> - <xi,y> 1_{|y|<=1}) law(dy)"""
        law = measure.law
        if not law.has_density:
            raise NotEvaluableError(
                "jump law is sampler-only; the symbol needs a density or atoms"
            )
        key = (id(law), tuple(np.round(xi, 15)))
        hit = self._law_cache.get(key)
        if hit is not None:
            return hit[1]
        if not np.any(xi):
            value = (0.0, 0.0)
        else:
            low, high = law.support_box()

            def real_part(*y):
                y = np.array(y)
                return (1.0 - np.cos(xi @ y)) * float(law.pdf(y)[0])

            re = integrate_box(real_part, low, high, self.rtol, self.budget)[0]
            im = 0.0
            if not law.is_symmetric:

                def imag_part(*y):
                    y = np.array(y)
                    phase = xi @ y
                    small = phase if np.linalg.norm(y) <= COMPENSATION_RADIUS else 0.0
                    return -(np.sin(phase) - small) * float(law.pdf(y)[0])

                im = integrate_box(imag_part, low, high, self.rtol, self.budget)[0]
            value = (re, im)
        self._law_cache[key] = (law, value)
        return value

    def symbol_parts(self, model: DrivingModel, points, xis) -> tuple[np.ndarray, ...]:
        """(quadratic, jump_real, drift_imag, jump_imag), each of shape (N, m)"""
        points = np.asarray(points, dtype=float).reshape(-1, model.dim)
        xis = np.asarray(xis, dtype=float).reshape(-1, model.dim)
        n, m = points.shape[0], xis.shape[0]

        drift_imag = -model.drift_at(points) @ xis.T
        quadratic = 0.5 * np.einsum("npq,mp,mq->nm", model.diffusion_at(points), xis, xis)
        jump_real = np.zeros((n, m))
        jump_imag = np.zeros((n, m))

        jumps = model.jumps
        if isinstance(jumps, Atoms):
            phase = xis @ jumps.locations.T
            small = np.linalg.norm(jumps.locations, axis=1) <= COMPENSATION_RADIUS
            jump_real += ((1.0 - np.cos(phase)) @ jumps.rates)[None, :]
            jump_imag += (-(np.sin(phase) - phase * small) @ jumps.rates)[None, :]
        elif isinstance(jumps, FiniteDensity):
            parts = np.array([self._law_symbol(jumps, xi) for xi in xis]).reshape(m, 2)
            rate = jumps.rate_at(points)[:, None]
            jump_real += rate * parts[None, :, 0]
            jump_imag += rate * parts[None, :, 1]
        elif isinstance(jumps, SymmetricStable):
            norm = np.linalg.norm(xis, axis=1)[None, :]
            alpha = jumps.alpha_at(points)[:, None]
            jump_real += jumps.gamma_at(points)[:, None] * norm**alpha

        return quadratic, jump_real, drift_imag, jump_imag

    def symbol_at(self, model: DrivingModel, points, xis) -> np.ndarray:
        """Complex q(x_n, xi_m), shape (N, m)"""
        quadratic, jump_real, drift_imag, jump_imag = self.symbol_parts(model, points, xis)
        return (quadratic + jump_real) + 1j * (drift_imag + jump_imag)

    def eval_symbol(self, model: DrivingModel, x, xi) -> SymbolValue:
        parts = self.symbol_parts(model, x, xi)
        if any(p.size != 1 for p in parts):
            raise ConfigError("eval_symbol takes a single point and a single frequency")
        return SymbolValue(*(float(p[0, 0]) for p in parts))

    def levy_symbol(self, model: DrivingModel, xis) -> np.ndarray:
        """q(xi_m) of a Levy model, shape (m,)"""
        if not model.is_levy:
            raise NonLevyError(f"{model.name} has state-dependent coefficients")
        return self.symbol_at(model, np.zeros(model.dim), xis)[0]

    def lattice_symbol(self, model: DrivingModel, period, k_max: int, convention=None):
        """Lattice points, frequencies and Levy symbol values on one shell range"""
        ks = lattice(model.dim, k_max)
        omegas = frequencies(ks, period, convention or self.convention)
        return ks, omegas, self.levy_symbol(model, omegas)

    # ------------------------------------------------------------------
    # spectral conditions
    # ------------------------------------------------------------------
    def _period_for(self, model: DrivingModel, period):
        period = period if period is not None else model.period
        if period is None:
            raise ModelError(f"{model.name} has no period; pass one explicitly")
        period = tuple(float(t) for t in np.atleast_1d(period))
        if len(period) != model.dim or min(period) <= 0:
            raise ConfigError(f"period {period} does not fit dimension {model.dim}")
        return period

    def _zero_scale(self, model: DrivingModel, omegas: np.ndarray) -> np.ndarray:
        """Magnitude of the terms summed into Re q, for a roundoff-level zero test"""
        c = np.abs(model.diffusion_at(np.zeros(model.dim))[0]).sum()
        scale = 1.0 + c * np.sum(omegas**2, axis=1)
        if isinstance(model.jumps, Atoms):
            scale = scale + model.jumps.total_rate
        elif isinstance(model.jumps, FiniteDensity):
            scale = scale + float(model.jumps.rate_at(np.zeros(model.dim))[0])
        return scale

    def check_ergodicity_condition(
        self,
        model: DrivingModel,
        period=None,
        k_max: int = 50,
        convention: Optional[str] = None,
        ks: Optional[np.ndarray] = None,
    ) -> CheckResult:
        """Re q(omega_k) > 0 on the nonzero dual lattice with |k|_inf <= k_max"""
        if not model.is_levy:
            raise NonLevyError(f"{model.name}: spectral ergodicity check needs a Levy model")
        period = self._period_for(model, period)
        convention = convention or self.convention
        ks = lattice(model.dim, k_max) if ks is None else np.asarray(ks, dtype=int).reshape(-1, model.dim)
        details = {"k_max": k_max, "convention": convention, "period": list(period), "n_checked": len(ks)}
        if not len(ks):
            return CheckResult("spectral_positivity", "pass", hard=True, details=details)

        omegas = frequencies(ks, period, convention)
        re = self.levy_symbol(model, omegas).real
        roundoff = self.ROUNDOFF_FACTOR * np.finfo(float).eps * self._zero_scale(model, omegas)
        if np.any(re < -np.maximum(roundoff, self.eps_zero)):
            raise NumericalError(f"negative Re q = {re.min():.3e}: symbol is not negative definite")

        details["min_re"] = float(re.min())
        details["argmin_k"] = ks[int(np.argmin(re))].tolist()
        zero = np.abs(re) <= roundoff
        near = (np.abs(re) <= self.eps_zero) & ~zero
        if zero.any():
            k0 = tuple(int(v) for v in ks[np.argmax(zero)])
            logger.info(f"spectral positivity fails for {model.name} at k={k0}")
            return CheckResult(
                "spectral_positivity", "fail", hard=True, k0=k0, value=float(re.min()), details=details,
                notes=[f"Re q vanishes at k={list(k0)}: the torus projection is not ergodic"],
            )
        if near.any():
            k0 = tuple(int(v) for v in ks[np.argmax(near)])
            return CheckResult(
                "spectral_positivity", "inconclusive", hard=True, k0=k0, value=float(re.min()),
                details=details, notes=[f"Re q within {self.eps_zero:g} of zero at k={list(k0)}"],
            )
        return CheckResult(
            "spectral_positivity", "pass", hard=True, value=float(re.min()), details=details,
            notes=["spectral positivity holds; strong ergodicity not implied"],
        )

    def check_strong_ergodicity_hint(
        self, model: DrivingModel, period=None, k_max: int = 50
    ) -> CheckResult:
        """Heuristic: can transition laws of the projection converge in total variation?"""
        spectral = self.check_ergodicity_condition(model, period, k_max)
        details = {"spectral_status": spectral.status}
        if spectral.status == "fail":
            return CheckResult(
                "strong_ergodicity_hint", "fail", k0=spectral.k0, details=details,
                notes=["spectral positivity fails, so laws stay on a coset lattice"],
            )
        c = model.diffusion_at(np.zeros(model.dim))[0]
        min_eig = float(np.linalg.eigvalsh(c).min())
        details["diffusion_min_eigenvalue"] = min_eig
        if min_eig > self.eps_zero:
            return CheckResult(
                "strong_ergodicity_hint", "pass", details=details,
                notes=["nondegenerate diffusion smooths the transition laws"],
            )
        if isinstance(model.jumps, SymmetricStable):
            return CheckResult(
                "strong_ergodicity_hint", "pass", details=details,
                notes=["stable jumps give an integrable heat kernel"],
            )
        if isinstance(model.jumps, FiniteDensity) and np.allclose(c, 0.0):
            return CheckResult(
                "strong_ergodicity_hint", "inconclusive", details=details,
                notes=["compound Poisson with a jump density: the no-jump atom decays like e^{-rate t}"],
            )
        if model.jumps is None or isinstance(model.jumps, Atoms):
            if np.allclose(c, 0.0):
                return CheckResult(
                    "strong_ergodicity_hint", "fail", details=details,
                    notes=["transition laws are purely atomic: not strongly ergodic"],
                )
        return CheckResult(
            "strong_ergodicity_hint", "inconclusive", details=details,
            notes=["degenerate diffusion; no smoothing argument available"],
        )

    def check_summability(
        self,
        w: PeriodicFunction,
        model: DrivingModel,
        k_max: Optional[int] = None,
        convention: Optional[str] = None,
        tail_fraction: float = 1e-3,
    ) -> CheckResult:
        """Shell partial sums of sum_k |k|^2 |w(k)| (1 + Re q(omega_k)^{-2})"""
        if not model.is_levy:
            raise NonLevyError(f"{model.name}: summability check needs a Levy model")
        period = w.period
        convention = convention or self.convention
        radius = w.support_radius if k_max is None else int(k_max)

        keep = np.abs(w.lattice).max(axis=1, initial=0) <= radius
        nonzero = keep & np.any(w.lattice != 0, axis=1)
        ks = w.lattice[nonzero]
        coeffs = w.values[nonzero]
        details = {"k_max": radius, "convention": convention, "support_radius": w.support_radius}
        if not len(ks):
            details.update({"total": 0.0, "shells": []})
            return CheckResult("summability", "pass", value=0.0, details=details,
                               notes=["no nonzero modes"])

        spectral = self.check_ergodicity_condition(model, period, convention=convention, ks=ks)
        if spectral.status == "fail":
            return CheckResult(
                "summability", "fail", k0=spectral.k0, details=details,
                notes=[f"Re q vanishes at k={list(spectral.k0)}; the series is undefined"],
            )

        re = self.levy_symbol(model, frequencies(ks, period, convention)).real
        terms = np.sum(ks**2, axis=1) * np.abs(coeffs) * (1.0 + re**-2.0)
        shell = np.abs(ks).max(axis=1)
        shells = []
        partial = 0.0
        for r in range(1, radius + 1):
            contribution = float(terms[shell == r].sum())
            partial += contribution
            shells.append({"radius": r, "contribution": contribution, "partial": partial})
        details.update({"total": partial, "shells": shells})

        notes = []
        by_shell = [s["contribution"] for s in shells]
        min_re = np.array([re[shell == r].min() if np.any(shell == r) else np.inf for r in range(1, radius + 1)])
        finite = np.isfinite(min_re)
        if finite.any() and np.all(np.diff(min_re[finite]) >= -self.eps_zero) and min_re[finite].min() > self.eps_zero:
            notes.append("Re q is nondecreasing and bounded away from zero: reduces to sum |k|^2 |w(k)| < inf")

        if w.support_radius > radius:
            status = "inconclusive"
            notes.append(f"support radius {w.support_radius} exceeds checked radius {radius}")
        elif radius >= 4 and by_shell[-1] > tail_fraction * partial:
            status = "inconclusive"
            notes.append(
                f"slow decay: last shell carries {by_shell[-1] / partial:.2%} of the partial sum"
            )
        else:
            status = "pass"
            notes.append("pass (finite support)")
        return CheckResult("summability", status, value=partial, details=details, notes=notes)

    # ------------------------------------------------------------------
    # conditions on the symbol over a probe grid
    # ------------------------------------------------------------------
    def _probe_directions(self, dim: int, n: int = 8) -> np.ndarray:
        if dim == 1:
            return np.array([[1.0], [-1.0]])
        rng = np.random.default_rng(7)
        extra = rng.standard_normal((n, dim))
        dirs = np.vstack([np.eye(dim), -np.eye(dim), extra])
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def _probe_points(self, model: DrivingModel, points=None) -> np.ndarray:
        if points is not None:
            return np.asarray(points, dtype=float).reshape(-1, model.dim)
        if model.is_levy:
            return np.zeros((1, model.dim))
        return model.probe_grid(PROBE_POINTS)

    def check_sector_condition(self, model: DrivingModel, xis=None, points=None) -> CheckResult:
        """Smallest c with sup_x |Im q(x, xi)| <= c inf_x Re q(x, xi) on the probes"""
        if xis is None:
            dirs = self._probe_directions(model.dim)
            xis = (dirs[:, None, :] * self.SECTOR_RADII[None, :, None]).reshape(-1, model.dim)
        xis = np.asarray(xis, dtype=float).reshape(-1, model.dim)
        q = self.symbol_at(model, self._probe_points(model, points), xis)
        sup_im = np.abs(q.imag).max(axis=0)
        inf_re = q.real.min(axis=0)

        degenerate = (inf_re <= self.eps_zero) & (sup_im > self.eps_zero)
        details = {"n_frequencies": len(xis)}
        if degenerate.any():
            bad = xis[np.argmax(degenerate)].tolist()
            details["xi"] = bad
            return CheckResult(
                "sector", "fail", details=details,
                notes=[f"Re q vanishes where Im q does not, at xi={bad}"],
            )
        ok = inf_re > self.eps_zero
        ratios = np.where(ok, sup_im / np.where(ok, inf_re, 1.0), 0.0)
        c = float(ratios.max()) if ratios.size else 0.0
        return CheckResult("sector", "pass" if c < 1.0 else "fail", value=c, details=details)

    def check_heat_kernel_integrability(
        self,
        model: DrivingModel,
        t: float = 1.0,
        cutoff: Optional[float] = None,
        points=None,
    ) -> CheckResult:
        """Diagnostic: int_{|xi|<=R} exp(-t inf_x Re q(x, xi)) dxi on a radial grid"""
        if t <= 0:
            raise ConfigError(f"heat kernel time must be positive, got {t}")
        cutoff = self.HEAT_KERNEL_CUTOFF if cutoff is None else float(cutoff)
        radii = np.linspace(0.0, cutoff, self.HEAT_KERNEL_RADIAL_POINTS + 1)
        dirs = self._probe_directions(model.dim)
        xis = (dirs[:, None, :] * radii[None, :, None]).reshape(-1, model.dim)
        inf_re = self.symbol_at(model, self._probe_points(model, points), xis).real.min(axis=0)
        profile = np.exp(-t * inf_re.reshape(len(dirs), len(radii))).mean(axis=0)

        sphere = 2.0 * np.pi ** (model.dim / 2.0) / gamma_fn(model.dim / 2.0)
        radial = sphere * radii ** (model.dim - 1) * profile
        integral = float(trapezoid(radial, radii))

        outer = radii >= cutoff / 2.0
        tail = float(profile[-1])
        with np.errstate(divide="ignore"):
            logs = np.log(np.maximum(profile[outer], 1e-300))
        slope = float(np.polyfit(np.log(radii[outer]), logs, 1)[0])
        if tail < 1e-8 or slope < -(model.dim + 1.0):
            verdict = "integrable"
        elif tail > 1e-3 and slope > -0.5:
            verdict = "non-integrable"
        else:
            verdict = "undetermined"
        details = {
            "t": t,
            "cutoff": cutoff,
            "integral": integral,
            "tail_value": tail,
            "tail_slope": slope,
            "verdict": verdict,
        }
        notes = []
        if verdict == "non-integrable":
            notes.append(f"integrand stays above {tail:.3e} at |xi|={cutoff:g}; flagged non-integrable")
        return CheckResult("heat_kernel", "diagnostic", details=details, notes=notes)

    def check_structural_conditions(self, model: DrivingModel) -> list[CheckResult]:
        """Bounded coefficients and conservativeness q(x, 0) = 0 over the probe grid"""
        probes = self._probe_points(model) if model.is_levy else model.probe_grid(PROBE_POINTS)
        b = float(np.linalg.norm(model.drift_at(probes), axis=1).max())
        c = float(np.linalg.norm(model.diffusion_at(probes), ord=2, axis=(1, 2)).max())
        moment = 0.0
        if model.jumps is not None:
            moment = float(np.max(model.jumps.truncated_second_moment(probes)))
        bounds = {"sup_drift": b, "sup_diffusion": c, "sup_truncated_moment": moment}
        finite = all(np.isfinite(v) for v in bounds.values())
        boundedness = CheckResult(
            "boundedness", "pass" if finite else "fail", hard=True, details=bounds
        )

        try:
            q0 = self.symbol_at(model, probes, np.zeros((1, model.dim)))
            worst = float(np.abs(q0).max())
        except NotEvaluableError:
            worst = 0.0  # no killing term exists by construction
        conservative = CheckResult(
            "conservativeness",
            "pass" if worst <= self.eps_zero else "fail",
            hard=True,
            value=worst,
            details={"max_abs_q_at_zero": worst},
        )
        return [boundedness, conservative]
