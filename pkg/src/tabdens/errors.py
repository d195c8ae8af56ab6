"""Exception hierarchy shared across the package."""


class TabdensError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TabdensError):
    """Operand shapes do not conform to the operation's rules."""


class NumericError(TabdensError):
    """An operation produced a non-finite value (overflow, NaN)."""


class GraphError(TabdensError):
    """Autodiff graph contract violated (e.g. backward from a non-scalar)."""


class DataError(TabdensError):
    """Problem with an input dataset, feature name, or export range."""


class ConfigError(TabdensError):
    """Invalid configuration value or unusable feature statistics."""


class TrainingDiverged(TabdensError):
    """Training hit a non-finite loss; carries the last-good checkpoint path."""

    def __init__(self, message: str, last_good_path: str | None = None):
        super().__init__(message)
        self.last_good_path = last_good_path
