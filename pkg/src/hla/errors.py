"""Shared exception types."""


class DimensionError(ValueError):
    """Array rank or axis length does not match what the operation requires."""


class PrecisionError(TypeError):
    """Unsupported dtype, or operands with mismatched dtypes."""


class MemoryCapError(RuntimeError):
    """An allocation would exceed the configured memory cap."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite.

    ``step`` is the index of the update at which divergence was detected.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"loss diverged at step {step}")
