"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Non-finite or malformed numerical input."""


class InvalidConfigurationError(ValueError):
    """A configuration value violates a documented constraint."""


class NonstationaryModelError(ValueError):
    """Autoregressive slope with modulus >= 1."""


class InfeasibleTargetError(ValueError):
    """A tuning target cannot be reached within the admissible batch sizes.

    The calibration statistics used for the attempt are attached as
    ``stats`` so callers can report them.
    """

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = dict(stats or {})


class DegenerateDenominatorError(ZeroDivisionError):
    """The signs of an importance-sampling estimate sum to zero."""


class DegenerateSeriesError(ValueError):
    """A statistic is undefined because the input has no spread."""
