"""
Exception hierarchy
Every error carries the exit code the command line reports for it
"""


class TracerError(Exception):
    """Base error, treated as an internal numerical failure"""

    exit_code = 3


class ConfigError(TracerError, ValueError):
    """Unreadable or inconsistent experiment configuration"""

    exit_code = 2


class ModelError(ConfigError):
    """A model violates one of its invariants"""


class NotEvaluableError(ModelError):
    """The jump measure can be sampled but not integrated"""


class NonLevyError(ModelError):
    """Operation needs constant coefficients"""


class HorizonError(ConfigError):
    """Path horizon or time grid does not fit the request"""


class InsufficientSamplesError(ConfigError):
    pass


class NumericalError(TracerError):
    """Quadrature failure or a broken numerical invariant"""


class DegenerateCovarianceError(NumericalError):
    pass


class CheckFailedError(TracerError):
    """A hard analytic check failed and --force was not given"""

    exit_code = 1
