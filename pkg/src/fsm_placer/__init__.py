"""
fsm_placer package initialization
"""

from .assimilate import (
    cost_and_gradient,
    estimate_gauss_newton_tsvd,
    estimate_linear_closed_form,
    estimate_newton,
)
from .dynamics import ControlSelection, ControlVector, TimeGrid, builtin_model, integrate
from .observe import build_gramian, explicit_plan, plan_placement, synthesize_observations
from .sensitivity import invariants, propagate

__version__ = "0.1.0"

__all__ = [
    "ControlSelection",
    "ControlVector",
    "TimeGrid",
    "build_gramian",
    "builtin_model",
    "cost_and_gradient",
    "estimate_gauss_newton_tsvd",
    "estimate_linear_closed_form",
    "estimate_newton",
    "explicit_plan",
    "integrate",
    "invariants",
    "plan_placement",
    "propagate",
    "synthesize_observations",
]
