"""Exception hierarchy shared by all modules.

Each class carries an ``exit_code`` used by the command-line front end so
that every failure mode maps to a distinct process status.
"""
from __future__ import annotations

from typing import Any


class LawsonError(Exception):
    exit_code = 10

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details = details

    def record(self) -> dict:
        return {"error": type(self).__name__, "message": str(self),
                "exit_code": self.exit_code,
                "details": {k: _plain(v) for k, v in self.details.items()}}


def _plain(v: Any) -> Any:
    try:
        import numpy as np
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, np.generic):
            return v.item()
    except ImportError:  # pragma: no cover
        pass
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


class InvalidDimensions(LawsonError):
    exit_code = 2


class NonConvergence(LawsonError):
    exit_code = 11


class NotAnEquilibrium(LawsonError):
    exit_code = 12


class ReconstructionError(LawsonError):
    exit_code = 13


class FitAmbiguous(LawsonError):
    exit_code = 14


class PositivityViolated(LawsonError):
    exit_code = 15


class SingularQuadrature(LawsonError):
    exit_code = 16


class DomainError(LawsonError):
    exit_code = 17


class OrthogonalityViolated(LawsonError):
    exit_code = 18


class LogDomainError(LawsonError):
    exit_code = 19


class EigFailure(LawsonError):
    exit_code = 20


class RegimeFitError(LawsonError):
    exit_code = 21


class SolveFailure(LawsonError):
    exit_code = 22


class NewtonDiverged(LawsonError):
    exit_code = 23


class OrderingLost(LawsonError):
    exit_code = 24


class QuadratureError(LawsonError):
    exit_code = 25


class OverlapError(LawsonError):
    exit_code = 26


class ExpansionMismatch(LawsonError):
    exit_code = 27


class SubcriticalLambda(LawsonError):
    exit_code = 28


class SupportError(LawsonError):
    exit_code = 29


class PositiveValue(LawsonError):
    exit_code = 30


class ConfigError(LawsonError):
    exit_code = 3
