"""Exception hierarchy shared by all stages of the estimator."""


class RobCMLError(Exception):
    """Base class for package errors. ``stage`` names the pipeline step."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class DomainError(RobCMLError, ValueError):
    """Argument outside the support or parameter space of a family."""


class NumericError(RobCMLError, ArithmeticError):
    """A numerical routine failed to reach its accuracy target."""


class DegenerateDataError(RobCMLError, ValueError):
    """Data carry no information for the requested estimate."""


class OverTruncationError(RobCMLError, ValueError):
    """Cutoffs leave an empty conditional support."""


class ConvergenceError(RobCMLError, RuntimeError):
    """Optimizer diverged; ``best`` holds the best parameters seen."""

    def __init__(self, message, best=None, stage=None):
        super().__init__(message, stage=stage)
        self.best = best


class ConfigError(RobCMLError, ValueError):
    """Invalid configuration value."""
