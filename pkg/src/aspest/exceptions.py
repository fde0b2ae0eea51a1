"""Exception hierarchy shared by all modules."""


class AspestError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AspestError, ValueError):
    pass


class ShapeError(AspestError, ValueError):
    pass


class NumericError(AspestError, FloatingPointError):
    pass


class BudgetError(AspestError, ValueError):
    """Requested more selections than the remaining pool or budget allows."""


class ProtocolError(AspestError, RuntimeError):
    """Oracle misuse: relabeling a point or exceeding the labeling budget."""


class EmptyEnsembleError(AspestError, RuntimeError):
    pass


class DegenerateFrameError(AspestError, ValueError):
    pass


class UndefinedMetricError(AspestError, ValueError):
    pass


class IngestionError(AspestError, ValueError):
    pass


class ExperimentError(AspestError, RuntimeError):
    """A run failed; the message carries the config hash."""

    def __init__(self, message: str, config_hash: str = ""):
        super().__init__(message)
        self.config_hash = config_hash
