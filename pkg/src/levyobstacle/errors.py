"""Exception types raised across the package."""


class LevyObstacleError(Exception):
    """Base class for all package errors."""


class BranchError(LevyObstacleError, ValueError):
    """Complex logarithm/power evaluated outside the model's analyticity strip."""


class DivergentIntegral(LevyObstacleError, ValueError):
    pass


class MomentError(LevyObstacleError, ValueError):
    """The exponential moment needed for the martingale condition is infinite."""


class TruncationError(LevyObstacleError, ValueError):
    pass


class DomainError(LevyObstacleError, ValueError):
    pass


class CompatibilityError(LevyObstacleError, ValueError):
    """Terminal data violates g >= obstacle(T, .)."""


class StabilityError(LevyObstacleError, ValueError):
    """Time step too large for the explicit treatment of the jump integral."""


class NoConvergence(LevyObstacleError, RuntimeError):
    def __init__(self, message, iterations=None, omega=None, update=None):
        super().__init__(message)
        self.iterations = iterations
        self.omega = omega
        self.update = update


class EmptyContact(LevyObstacleError):
    """The contact set {v = obstacle} is empty on a slice."""


class DegenerateFit(LevyObstacleError, ValueError):
    pass


class ConfigError(LevyObstacleError, ValueError):
    pass
