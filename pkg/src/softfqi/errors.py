"""Exception types raised across the package."""


class SoftFqiError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(SoftFqiError, ValueError):
    pass


class DimensionError(SoftFqiError, ValueError):
    pass


class NonConvergenceError(SoftFqiError):
    """An iterative solver hit its iteration cap.

    The last residual is kept on the instance so callers can decide whether
    to retry (e.g. with damping) or give up.
    """

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class SingularDesignError(SoftFqiError, ArithmeticError):
    pass


class DegenerateSupportError(SoftFqiError, ValueError):
    pass


class NoGapError(SoftFqiError, ValueError):
    pass


class OutOfRegionError(SoftFqiError, ValueError):
    pass


class ConfigError(SoftFqiError, ValueError):
    pass
