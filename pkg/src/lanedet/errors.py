"""Exceptions shared across the package."""


class ShapeMismatchError(ValueError):
    """An array dimension does not match the declared layer/spec contract."""


class FormatError(ValueError):
    """A file (PNM image, weight file, list file) is malformed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class MissingCacheError(RuntimeError):
    """backward() called without a preceding train-mode forward()."""
