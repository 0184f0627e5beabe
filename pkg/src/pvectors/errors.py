"""Exception types shared across the package."""


class PVectorsError(Exception):
    """Base class for all package errors."""


class DimensionError(PVectorsError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(PVectorsError, ValueError):
    """A configuration value is invalid or inconsistent."""


class StateError(PVectorsError, RuntimeError):
    """An object is used in a state that does not support the call."""


class UsageError(PVectorsError, RuntimeError):
    """An API was called incorrectly (e.g. backward on a non-scalar)."""


class FormatError(PVectorsError, ValueError):
    """A file does not follow the expected on-disk format."""


class TransferError(PVectorsError, KeyError):
    """Stage-1 checkpoints are missing tensors required for transfer."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing tensors: {', '.join(self.missing)}")

    def __str__(self):
        return self.args[0]


class DivergenceError(PVectorsError, ArithmeticError):
    """Training produced a non-finite loss."""
