"""
Forward sensitivities u = dx/dx0 and v = dx/dalpha along a trajectory, and the
trace invariants of u^T u used to rank observation times for field models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from fsm_placer.dynamics import (
    ControlSelection,
    ModelKind,
    ModelSystem,
    TimeGrid,
    Trajectory,
    rk4_stages,
)
from fsm_placer.errors import DimensionError, NumericalError, OffGridError, PlacementError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensitivityInvariants:
    """I1 = trace(u^T u) and I2 = ((trace u^T u)^2 - trace((u^T u)^2)) / 2 per step."""

    grid: TimeGrid
    steps: np.ndarray
    I1: np.ndarray
    I2: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid.t0 + self.grid.dt * self.steps


@dataclass(frozen=True)
class SensitivityTrajectory:
    """
    Sensitivity blocks u (n x n) and v (n x p) at the retained steps of a grid.

    `steps` lists the grid indices that were kept; u[j] and v[j] belong to steps[j].
    """

    grid: TimeGrid
    steps: np.ndarray
    u: np.ndarray
    v: np.ndarray
    tracked: Optional[SensitivityInvariants] = None

    def __post_init__(self):
        if not (len(self.steps) == self.u.shape[0] == self.v.shape[0]):
            raise DimensionError("sensitivity blocks and retained steps differ in length")

    @property
    def state_dim(self) -> int:
        return self.u.shape[1]

    @property
    def param_dim(self) -> int:
        return self.v.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.grid.t0 + self.grid.dt * self.steps

    def position(self, step: int) -> int:
        """Position of grid step `step` among the retained steps."""
        j = int(np.searchsorted(self.steps, step))
        if j >= len(self.steps) or self.steps[j] != step:
            raise OffGridError(f"sensitivities were not retained at step {step}")
        return j

    def at_step(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        j = self.position(step)
        return self.u[j], self.v[j]

    def at_time(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        return self.at_step(self.grid.index_of(t))

    def columns(self, step: int, selection: ControlSelection = ControlSelection.FULL) -> np.ndarray:
        """F = [u | v] at `step`, restricted to the estimated control components."""
        u, v = self.at_step(step)
        full = np.hstack([u, v])
        return full[:, selection.span(self.state_dim, self.param_dim)]


def _retained_steps(grid: TimeGrid, keep: Optional[Iterable[int]]) -> np.ndarray:
    if keep is None:
        return np.arange(grid.steps + 1)
    steps = np.unique(np.asarray(list(keep), dtype=int))
    if steps.size == 0:
        raise DimensionError("keep must name at least one step")
    if steps[0] < 0 or steps[-1] > grid.steps:
        raise OffGridError(f"keep steps {steps.tolist()} fall outside 0..{grid.steps}")
    return steps


def _gram_invariants(u: np.ndarray) -> Tuple[float, float]:
    gram = u.T @ u
    i1 = float(np.trace(gram))
    i2 = 0.5 * (i1**2 - float(np.sum(gram * gram)))
    return i1, i2


def _variational_step(
    model: ModelSystem,
    x: np.ndarray,
    alpha: np.ndarray,
    dt: float,
    S: np.ndarray,
) -> np.ndarray:
    """
    Advance S = [u | v] by one step.

    Continuous models differentiate the RK4 step with the Jacobians frozen at
    the stage states, which is the exact derivative of the discrete RK4 map.
    """
    n = model.state_dim
    p = model.param_dim

    def forcing(xs):
        B = np.zeros((n, n + p))
        if p:
            B[:, n:] = model.jac_param(xs, alpha)
        return B

    if model.kind is ModelKind.DISCRETE_MAP:
        return model.jac_state(x, alpha) @ S + forcing(x)

    (x1, x2, x3, x4), _ = rk4_stages(model, x, alpha, dt)
    dK1 = model.jac_state(x1, alpha) @ S + forcing(x1)
    dK2 = model.jac_state(x2, alpha) @ (S + 0.5 * dt * dK1) + forcing(x2)
    dK3 = model.jac_state(x3, alpha) @ (S + 0.5 * dt * dK2) + forcing(x3)
    dK4 = model.jac_state(x4, alpha) @ (S + dt * dK3) + forcing(x4)
    return S + (dt / 6.0) * (dK1 + 2.0 * dK2 + 2.0 * dK3 + dK4)


def propagate(
    model: ModelSystem,
    trajectory: Trajectory,
    keep: Optional[Iterable[int]] = None,
    invariant_stride: Optional[int] = None,
) -> SensitivityTrajectory:
    """
    Propagate the forward sensitivities along a trajectory.

    Args:
        model: The model that produced the trajectory
        trajectory: Output of `integrate` for the same model
        keep: Grid steps at which u and v are retained; all steps when None.
            Propagation stops at the last retained step unless invariants are tracked.
        invariant_stride: Record I1 and I2 every `invariant_stride` steps over the
            whole grid; not tracked when None

    Returns:
        SensitivityTrajectory with u[0] = I and v[0] = 0 at step 0

    Raises:
        DimensionError: if the trajectory does not belong to the model
        NumericalError: if a sensitivity entry becomes non-finite
    """
    n, p = model.state_dim, model.param_dim
    if trajectory.states.shape[1] != n or trajectory.parameters.size != p:
        raise DimensionError(
            f"trajectory of dims ({trajectory.states.shape[1]}, {trajectory.parameters.size}) "
            f"does not match {model.name} ({n}, {p})"
        )
    grid = trajectory.grid
    steps = _retained_steps(grid, keep)
    tracking = invariant_stride is not None
    if tracking and invariant_stride < 1:
        raise DimensionError(f"invariant_stride must be positive, got {invariant_stride}")
    last = grid.steps if tracking else int(steps[-1])
    tracked_steps = np.arange(0, last + 1, invariant_stride or 1)
    alpha = trajectory.parameters

    u = np.empty((steps.size, n, n))
    v = np.empty((steps.size, n, p))
    i1 = np.empty(tracked_steps.size)
    i2 = np.empty(tracked_steps.size)

    S = np.hstack([np.eye(n), np.zeros((n, p))])
    slot = 0
    for k in range(last + 1):
        if k > 0:
            S = _variational_step(model, trajectory.states[k - 1], alpha, grid.dt, S)
            if not np.all(np.isfinite(S)):
                raise NumericalError(
                    f"non-finite sensitivity in {model.name} at step {k} (t={grid.time_at(k):.6g})",
                    step=k,
                )
        if slot < steps.size and steps[slot] == k:
            u[slot] = S[:, :n]
            v[slot] = S[:, n:]
            slot += 1
        if tracking and k % invariant_stride == 0:
            i1[k // invariant_stride], i2[k // invariant_stride] = _gram_invariants(S[:, :n])

    tracked = None
    if tracking:
        tracked = SensitivityInvariants(grid=grid, steps=tracked_steps, I1=i1, I2=i2)
    logger.debug("propagated %s sensitivities over %d steps, kept %d", model.name, last, steps.size)
    return SensitivityTrajectory(grid=grid, steps=steps, u=u, v=v, tracked=tracked)


def invariants(sens: SensitivityTrajectory) -> SensitivityInvariants:
    """
    Trace invariants of u^T u at every retained step (or every step, if they
    were tracked during propagation).
    """
    if sens.tracked is not None:
        return sens.tracked
    values = np.array([_gram_invariants(u) for u in sens.u])
    return SensitivityInvariants(grid=sens.grid, steps=sens.steps, I1=values[:, 0], I2=values[:, 1])


def squared_series(
    sens: SensitivityTrajectory,
    which: ControlSelection,
    index: int = 0,
    row: int = 0,
) -> np.ndarray:
    """Squared sensitivity entry u[row, index]^2 or v[row, index]^2 over the retained steps."""
    if which is ControlSelection.INITIAL_STATE:
        block = sens.u
    elif which is ControlSelection.PARAMETERS:
        block = sens.v
    else:
        raise PlacementError("a sensitivity channel is either initial_state or parameters")
    if not (0 <= index < block.shape[2] and 0 <= row < block.shape[1]):
        raise DimensionError(f"no sensitivity entry ({row}, {index}) for {which.value}")
    return block[:, row, index] ** 2


def argmax_squared_sensitivity(
    sens: SensitivityTrajectory,
    which: ControlSelection,
    index: int = 0,
    window: Optional[Tuple[float, float]] = None,
    row: int = 0,
) -> int:
    """
    Grid step where the squared sensitivity of one channel peaks.

    Args:
        sens: Propagated sensitivities
        which: INITIAL_STATE for u, PARAMETERS for v
        index: Column of the block (control component)
        window: Closed time interval searched; the whole grid when None
        row: State component observed

    Returns:
        Grid index of the maximum; ties go to the earliest time

    Raises:
        PlacementError: if no retained step lies in the window
    """
    series = squared_series(sens, which, index, row)
    times = sens.times
    mask = np.ones(times.size, dtype=bool)
    if window is not None:
        lo, hi = window
        tol = 1e-9 * sens.grid.dt
        mask = (times >= lo - tol) & (times <= hi + tol)
    if not mask.any():
        raise PlacementError(f"window {window} contains no grid time")
    candidates = np.flatnonzero(mask)
    return int(sens.steps[candidates[np.argmax(series[candidates])]])
