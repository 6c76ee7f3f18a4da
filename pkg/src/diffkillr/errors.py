"""Exception types shared across the package."""


class DiffKillRError(Exception):
    """Base class for all package errors."""


class ParameterError(DiffKillRError, ValueError):
    """A transform or shape parameter is outside its legal range."""


class DimensionError(DiffKillRError, ValueError):
    """Array shapes do not agree."""


class ConfigError(DiffKillRError, ValueError):
    """A configuration value is missing, unknown or inconsistent."""


class BoundsError(DiffKillRError, IndexError):
    """A coordinate lies outside the image."""


class FormatError(DiffKillRError, ValueError):
    """An on-disk artifact is corrupted or has the wrong version."""


class TrainingError(DiffKillRError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class NumericError(DiffKillRError, ArithmeticError):
    """A computation hit a degenerate numeric case (e.g. a zero-norm vector)."""
