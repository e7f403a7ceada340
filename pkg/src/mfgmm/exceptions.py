"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations

from typing import Any


class MFGError(Exception):
    """Base class for every error raised by this package."""


class ModelError(MFGError):
    pass


class HypothesisViolation(ModelError):
    """A sampled point where a model breaks one of its standing assumptions.

    ``witness`` holds the evaluation point (time, states, actions, x).
    """

    def __init__(self, message: str, witness: dict[str, Any] | None = None):
        super().__init__(message)
        self.witness = dict(witness or {})

    def to_dict(self) -> dict[str, Any]:
        return {"kind": type(self).__name__, "message": str(self), "witness": self.witness}


class RowSumNonzero(HypothesisViolation):
    pass


class NegativeOffDiagonal(HypothesisViolation):
    pass


class RateBoundExceeded(HypothesisViolation):
    pass


class ExtinctionViolated(HypothesisViolation):
    pass


class Alpha0DependenceDetected(HypothesisViolation):
    pass


class InvalidShift(ModelError, ValueError):
    pass


class GridTooLarge(ModelError, ValueError):
    pass


class OutOfSimplex(ModelError, ValueError):
    pass


class UnknownModel(ModelError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class BadParameter(ModelError, ValueError):
    pass


class NoActions(ModelError, ValueError):
    pass


class IndexBug(MFGError, RuntimeError):
    """A shifted grid index left the grid. Unreachable unless the guard is broken."""


class UnstableIntegration(MFGError, ArithmeticError):
    def __init__(self, message: str, suggested_steps: int | None = None):
        super().__init__(message)
        self.suggested_steps = suggested_steps


class RateBoundViolation(MFGError, ArithmeticError):
    pass


class OracleTooLarge(MFGError, ValueError):
    pass


class FlowLeftSimplex(MFGError, ArithmeticError):
    pass


class ConsistencyFailure(MFGError, AssertionError):
    pass


class NonConvergence(MFGError):
    pass


class NonConvergenceWarning(UserWarning):
    pass


class BoundWarning(UserWarning):
    pass


class InfeasibleN(MFGError, ValueError):
    pass


class ConfigError(MFGError, ValueError):
    pass
