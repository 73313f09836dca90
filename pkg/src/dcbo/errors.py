"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """Linear algebra failed beyond recovery (e.g. factorization after jitter escalation)."""


class OptimizationError(RuntimeError):
    """An inner or outer optimization produced no usable result."""
