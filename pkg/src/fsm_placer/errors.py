"""
Exception hierarchy for fsm_placer.

The CLI maps these onto exit codes: input problems (configuration, placement,
dimensions) exit with 2, numerical failures with 3.
"""

from typing import Optional


class FsmPlacerError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(FsmPlacerError, ValueError):
    """Array or control dimensions do not match the model."""


class ModelError(FsmPlacerError, ValueError):
    """Unknown built-in model or invalid model options."""


class OffGridError(FsmPlacerError, ValueError):
    """A requested time does not coincide with a point of the time grid."""


class ConfigError(FsmPlacerError, ValueError):
    """Invalid experiment configuration."""


class PlacementError(FsmPlacerError):
    """Observation placement cannot satisfy its constraints."""


class SingularPlanError(PlacementError):
    """Every candidate observation plan yields a singular Gramian."""


class NumericalError(FsmPlacerError, ArithmeticError):
    """
    Non-finite or otherwise unusable numbers were produced.

    Args:
        message: Human readable description
        step: Time-grid index where the failure was detected, if known
    """

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class SingularGramianError(NumericalError):
    """The observability Gramian is singular to working precision."""


class DegenerateSensitivityError(NumericalError):
    """A forward sensitivity is zero where it has to be inverted."""


class LineSearchError(NumericalError):
    """Backtracking exhausted its halvings without lowering the cost."""


class EstimationFailedError(NumericalError):
    """The estimator failed for every seed of a run."""
