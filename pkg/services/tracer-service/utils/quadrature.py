"""
Budgeted adaptive quadrature over boxes in R^d
"""

import logging
import warnings

import numpy as np
from scipy import integrate

from errors import NumericalError

logger = logging.getLogger(__name__)


class _BudgetExceeded(Exception):
    pass


class _Counter:
    """Wraps an integrand and stops the integration once the budget is spent"""

    def __init__(self, fn, budget):
        self.fn = fn
        self.budget = budget
        self.calls = 0

    def __call__(self, *args):
        self.calls += 1
        if self.calls > self.budget:
            raise _BudgetExceeded()
        return self.fn(*args)


def integrate_box(fn, low, high, rtol, budget, breakpoints=(-1.0, 1.0), atol=1e-13):
    """
    Integrate fn over the box [low, high] with at most `budget` evaluations.

    fn takes d scalar arguments. Breakpoints that fall inside an axis range
    are handed to the integrator so the compensator jump at |y| = 1 does not
    stall the subdivision.
    """
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    counter = _Counter(fn, budget)
    limit = int(min(5000, max(50, budget // 21)))

    ranges = []
    axis_points = []
    for a, b in zip(low, high):
        ranges.append((float(a), float(b)))
        axis_points.append([p for p in breakpoints if a < p < b] or None)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            if len(ranges) == 1:
                value, error = integrate.quad(
                    counter,
                    *ranges[0],
                    points=axis_points[0],
                    epsrel=rtol,
                    epsabs=atol,
                    limit=limit,
                )
            else:
                opts = [
                    {"epsrel": rtol, "epsabs": atol, "limit": limit, "points": pts}
                    for pts in axis_points
                ]
                value, error = integrate.nquad(counter, ranges, opts=opts)
    except _BudgetExceeded:
        raise NumericalError(
            f"quadrature exceeded its budget of {budget} evaluations"
        ) from None
    except integrate.IntegrationWarning as e:
        raise NumericalError(f"quadrature did not converge: {e}") from None

    logger.debug(f"quadrature used {counter.calls} evaluations, error estimate {error:.2e}")
    return float(value), float(error), counter.calls
