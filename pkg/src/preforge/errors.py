"""Exception hierarchy. Every error carries enough structured context to be
reported as JSON by the command-line front-end."""

from __future__ import annotations


class PreforgeError(Exception):
    """Base class; ``details`` is a JSON-friendly dict."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self), **self.details}


class DimensionError(PreforgeError, ValueError):
    pass


class ValidationError(PreforgeError, ValueError):
    pass


class UnsupportedError(PreforgeError, ValueError):
    pass


class NonUniqueSteadyStateError(PreforgeError):
    pass


class SymmetryError(PreforgeError):
    pass


class SemiUnitarityError(PreforgeError, ValueError):
    pass


class StepSizeError(PreforgeError, ValueError):
    pass


class InfeasibleGraphError(PreforgeError, ValueError):
    pass


class ReducibleChainError(PreforgeError):
    pass


class DivergenceError(PreforgeError):
    """Refinement failed; ``last_iterate`` holds the final point."""

    def __init__(self, message: str, last_iterate=None, **details):
        super().__init__(message, **details)
        self.last_iterate = last_iterate


class ContinuationError(PreforgeError):
    """Continuation lost the solution at ``step``."""

    def __init__(self, message: str, step: int, last_iterate=None, **details):
        super().__init__(message, step=step, **details)
        self.step = step
        self.last_iterate = last_iterate


class NoSchemeError(PreforgeError):
    pass


class UnverifiedSchemeError(PreforgeError):
    pass
