"""Exception types shared across the package."""


class GenerationError(RuntimeError):
    """Synthetic sample generation could not satisfy its contracts."""


class NumericError(RuntimeError):
    """A numeric computation produced non-finite results."""
