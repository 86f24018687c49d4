"""
Assimilation: the weighted least-squares cost, its gradient from forward
sensitivities, and the three estimators (Newton, closed-form linear solve and
Gauss-Newton with truncated SVD).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from fsm_placer.dynamics import (
    ControlSelection,
    ControlVector,
    Matrix,
    ModelSystem,
    TimeGrid,
    Trajectory,
    advance,
    integrate,
)
from fsm_placer.errors import (
    DimensionError,
    LineSearchError,
    NumericalError,
    SingularGramianError,
)
from fsm_placer.observe import Gramian, ObservationOperator, ObservationSet, weighted_jacobian_blocks
from fsm_placer.sensitivity import propagate

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
DEFAULT_TSVD_THRESHOLD = 1e-3
MAX_HALVINGS = 30


@dataclass(frozen=True)
class CostReport:
    """
    J(c) = 1/2 sum_i e_i^T R_i^{-1} e_i with its gradient and Gauss-Newton pieces.

    `jacobian` stacks R_i^{-1/2} D_h F_i and `weighted_residual` stacks R_i^{-1/2} e_i,
    so that gradient = -jacobian^T weighted_residual and gramian = jacobian^T jacobian.
    """

    value: float
    gradient: np.ndarray
    innovations: np.ndarray
    jacobian: np.ndarray
    weighted_residual: np.ndarray
    gramian: Gramian


def _observation_horizon(obs: ObservationSet, grid: TimeGrid) -> Tuple[List[int], TimeGrid]:
    steps = obs.steps(grid)
    return steps, grid.truncated(max(steps))


def _innovations(trajectory: Trajectory, obs: ObservationSet, steps: Sequence[int]) -> np.ndarray:
    return np.array([z - obs.operator(trajectory.states[k]) for z, k in zip(obs.values, steps)])


def cost_value(model: ModelSystem, control: ControlVector, obs: ObservationSet, grid: TimeGrid) -> float:
    """J(c) alone, from one forward run up to the last observation."""
    steps, horizon = _observation_horizon(obs, grid)
    trajectory = integrate(model, control, horizon)
    e = _innovations(trajectory, obs, steps)
    return 0.5 * float(np.sum((e / obs.noise_std[:, None]) ** 2))


def cost_and_gradient(
    model: ModelSystem,
    control: ControlVector,
    obs: ObservationSet,
    grid: TimeGrid,
    selection: ControlSelection = ControlSelection.FULL,
) -> CostReport:
    """
    Cost, gradient and Gramian from one forward run plus one sensitivity propagation.

    Args:
        model: Forecast model
        control: Control at which J is evaluated
        obs: Observations on `grid`
        grid: Integration grid
        selection: Control components the gradient is taken with respect to

    Returns:
        CostReport; gradient = -sum_i F_i^T D_h^T R_i^{-1} e_i

    Raises:
        NumericalError: if the trajectory or sensitivities become non-finite
    """
    steps, horizon = _observation_horizon(obs, grid)
    trajectory = integrate(model, control, horizon)
    sens = propagate(model, trajectory, keep=steps)
    e = _innovations(trajectory, obs, steps)

    blocks = weighted_jacobian_blocks(sens, trajectory, obs.operator, steps, obs.noise_std, selection)
    A = np.vstack(blocks)
    r = (e / obs.noise_std[:, None]).ravel()
    return CostReport(
        value=0.5 * float(r @ r),
        gradient=-(A.T @ r),
        innovations=e,
        jacobian=A,
        weighted_residual=r,
        gramian=Gramian.from_blocks(blocks, obs.times),
    )


class EstimateRecord(BaseModel):
    """JSON form of an EstimateResult."""

    model_config = ConfigDict(frozen=True)

    control: Dict[str, List[float]]
    iterations: int
    final_cost: float
    final_gradient_norm: float
    converged: bool
    tsvd_rank: Optional[int]
    gramian_det: float
    gramian_logdet: float
    criterion: str
    tolerance: float
    cost_history: List[float]


@dataclass(frozen=True)
class EstimateResult:
    control: ControlVector
    iterations: int
    final_cost: float
    final_gradient_norm: float
    gramian: Gramian
    converged: bool
    tsvd_rank: Optional[int] = None
    cost_history: Tuple[float, ...] = ()
    criterion: str = "gradient"
    tolerance: float = DEFAULT_TOL

    def to_record(self) -> EstimateRecord:
        return EstimateRecord(
            control={
                "initial_state": self.control.initial_state.tolist(),
                "parameters": self.control.parameters.tolist(),
            },
            iterations=self.iterations,
            final_cost=self.final_cost,
            final_gradient_norm=self.final_gradient_norm,
            converged=self.converged,
            tsvd_rank=self.tsvd_rank,
            gramian_det=self.gramian.det,
            gramian_logdet=self.gramian.logdet,
            criterion=self.criterion,
            tolerance=self.tolerance,
            cost_history=list(self.cost_history),
        )


def _line_search(
    model: ModelSystem,
    control: ControlVector,
    step: np.ndarray,
    obs: ObservationSet,
    grid: TimeGrid,
    selection: ControlSelection,
    current: float,
) -> Tuple[ControlVector, float]:
    """Halve the step until the cost does not increase; non-finite runs count as increases."""
    base = control.select(selection)
    scale = 1.0
    for halving in range(MAX_HALVINGS + 1):
        trial = control.replace(selection, base + scale * step)
        try:
            value = cost_value(model, trial, obs, grid)
        except NumericalError as e:
            logger.warning("rejected step of length %.3g: %s", scale * np.linalg.norm(step), e)
            value = math.inf
        if value <= current:
            if halving:
                logger.debug("step accepted after %d halvings", halving)
            return trial, scale
        scale *= 0.5
    raise LineSearchError(f"no cost decrease after {MAX_HALVINGS} step halvings")


def estimate_newton(
    model: ModelSystem,
    guess: ControlVector,
    obs: ObservationSet,
    grid: TimeGrid,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    selection: ControlSelection = ControlSelection.FULL,
) -> EstimateResult:
    """
    Newton iteration c <- c - G^{-1} grad J with the Gramian as Hessian.

    Stops when ||grad J|| <= tol; hitting max_iter returns a non-converged result.

    Raises:
        SingularGramianError: if the Gramian at an iterate is singular
        LineSearchError: if no step halving decreases the cost
    """
    control = guess
    report = cost_and_gradient(model, control, obs, grid, selection)
    history = [report.value]
    converged = False
    iterations = 0

    while True:
        gnorm = float(np.linalg.norm(report.gradient))
        logger.debug("newton iter %d: J=%.6e |grad|=%.3e", iterations, report.value, gnorm)
        if gnorm <= tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        if not report.gramian.is_nonsingular():
            raise SingularGramianError(f"Gramian is singular at iterate {iterations}")
        step = np.linalg.solve(report.gramian.total, -report.gradient)
        control, _ = _line_search(model, control, step, obs, grid, selection, report.value)
        report = cost_and_gradient(model, control, obs, grid, selection)
        history.append(report.value)
        iterations += 1

    if not converged:
        logger.warning("newton stopped after %d iterations with |grad|=%.3e", iterations, gnorm)
    return EstimateResult(
        control=control,
        iterations=iterations,
        final_cost=report.value,
        final_gradient_norm=gnorm,
        gramian=report.gramian,
        converged=converged,
        cost_history=tuple(history),
        criterion="gradient",
        tolerance=tol,
    )


def _tsvd_solve(
    U: np.ndarray, s: np.ndarray, Vt: np.ndarray, rhs: np.ndarray, threshold: float
) -> Tuple[np.ndarray, int]:
    keep = s > threshold * s[0] if s.size else np.zeros(0, dtype=bool)
    rank = int(np.count_nonzero(keep))
    if rank == 0:
        raise SingularGramianError("every singular value was truncated")
    return Vt[keep].T @ ((U[:, keep].T @ rhs) / s[keep]), rank


def map_powers(map_matrix: Matrix, steps: Sequence[int]) -> Dict[int, np.ndarray]:
    """Dense M^k for each requested k, built by repeated multiplication."""
    wanted = set(steps)
    n = map_matrix.shape[0]
    power = np.eye(n)
    out = {}
    for k in range(max(wanted) + 1):
        if k:
            power = np.asarray(map_matrix @ power)
        if k in wanted:
            out[k] = power.copy()
    return out


def estimate_linear_closed_form(
    map_matrix: Matrix,
    operator: ObservationOperator,
    obs: ObservationSet,
    grid: TimeGrid,
    tsvd_threshold: float = DEFAULT_TSVD_THRESHOLD,
    parameters: Optional[np.ndarray] = None,
) -> EstimateResult:
    """
    Initial state of a linear map from c = G^{-1} sum_i (M^T)^i H^T R_i^{-1} z_i.

    G is inverted through its SVD; singular values of G below
    tsvd_threshold^2 times the largest are discarded, which matches truncating the
    weighted observation matrix at tsvd_threshold.

    Args:
        map_matrix: One-step matrix M
        operator: Linear observation operator H
        obs: Observations on `grid`
        grid: Grid whose dt is the map step
        tsvd_threshold: Relative truncation level
        parameters: Known parameters attached to the returned control

    Raises:
        DimensionError: for an empty set or a nonlinear operator
        SingularGramianError: if every singular value is truncated
    """
    if len(obs) == 0:
        raise DimensionError("closed-form estimate needs at least one observation")
    if not operator.is_linear:
        raise DimensionError("closed-form estimate needs a linear observation operator")
    H = operator.matrix
    steps = obs.steps(grid)
    powers = map_powers(map_matrix, steps)

    blocks = [np.asarray(H @ powers[k]) / s for k, s in zip(steps, obs.noise_std)]
    gramian = Gramian.from_blocks(blocks, obs.times)
    G = gramian.total
    rhs = np.sum([B.T @ (z / s) for B, z, s in zip(blocks, obs.values, obs.noise_std)], axis=0)

    U, sg, Vt = np.linalg.svd(G, hermitian=True)
    c, rank = _tsvd_solve(U, sg, Vt, rhs, tsvd_threshold**2)
    if rank < G.shape[0]:
        logger.warning("closed-form estimate truncated to rank %d of %d", rank, G.shape[0])

    A = np.vstack(blocks)
    r = np.concatenate([z / s for z, s in zip(obs.values, obs.noise_std)])
    residual = A @ c - r
    gradient = A.T @ residual
    cost = 0.5 * float(residual @ residual)
    return EstimateResult(
        control=ControlVector(c, parameters if parameters is not None else np.zeros(0)),
        iterations=1,
        final_cost=cost,
        final_gradient_norm=float(np.linalg.norm(gradient)),
        gramian=gramian,
        converged=True,
        tsvd_rank=rank,
        cost_history=(cost,),
        criterion="closed_form",
        tolerance=tsvd_threshold,
    )


def estimate_gauss_newton_tsvd(
    model: ModelSystem,
    guess: ControlVector,
    obs: ObservationSet,
    grid: TimeGrid,
    tsvd_threshold: float = DEFAULT_TSVD_THRESHOLD,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    selection: ControlSelection = ControlSelection.FULL,
) -> EstimateResult:
    """
    Gauss-Newton with truncated-SVD steps on the stacked weighted Jacobian.

    Each step solves min ||A d - r|| keeping singular values above
    tsvd_threshold times the largest, then backtracks on the cost. Stops when
    ||step|| <= tol (1 + ||c||) or after max_iter iterations.

    Raises:
        SingularGramianError: if the weighted Jacobian collapses to rank zero
    """
    control = guess
    report = cost_and_gradient(model, control, obs, grid, selection)
    history = [report.value]
    converged = False
    rank = None
    iterations = 0

    while iterations < max_iter:
        U, s, Vt = np.linalg.svd(report.jacobian, full_matrices=False)
        step, rank = _tsvd_solve(U, s, Vt, report.weighted_residual, tsvd_threshold)
        try:
            control, scale = _line_search(model, control, step, obs, grid, selection, report.value)
        except LineSearchError:
            logger.warning("gauss-newton line search stalled at iterate %d", iterations)
            break
        report = cost_and_gradient(model, control, obs, grid, selection)
        history.append(report.value)
        iterations += 1
        step_norm = scale * float(np.linalg.norm(step))
        logger.debug(
            "gauss-newton iter %d: J=%.6e |step|=%.3e rank=%d", iterations, report.value, step_norm, rank
        )
        if step_norm <= tol * (1.0 + float(np.linalg.norm(control.select(selection)))):
            converged = True
            break

    if rank is not None and rank < report.jacobian.shape[1]:
        logger.warning("gauss-newton steps truncated to rank %d of %d", rank, report.jacobian.shape[1])
    if not converged:
        logger.warning("gauss-newton stopped after %d iterations without meeting the step criterion", iterations)
    return EstimateResult(
        control=control,
        iterations=iterations,
        final_cost=report.value,
        final_gradient_norm=float(np.linalg.norm(report.gradient)),
        gramian=report.gramian,
        converged=converged,
        tsvd_rank=rank,
        cost_history=tuple(history),
        criterion="step",
        tolerance=tol,
    )


@dataclass(frozen=True)
class CostSurface:
    """J over a (x0, alpha) grid of a scalar model; cells that blow up are NaN."""

    x0_axis: np.ndarray
    alpha_axis: np.ndarray
    values: np.ndarray

    def rows(self) -> List[Tuple[float, float, float]]:
        return [
            (float(x0), float(a), float(self.values[i, j]))
            for i, x0 in enumerate(self.x0_axis)
            for j, a in enumerate(self.alpha_axis)
        ]


def cost_surface(
    model: ModelSystem,
    obs: ObservationSet,
    grid: TimeGrid,
    x0_axis: Sequence[float],
    alpha_axis: Sequence[float],
) -> CostSurface:
    """
    Cost landscape of a scalar model with one parameter.

    All cells are integrated together: the scalar right-hand sides act
    elementwise on a vector of states and a row of parameters.
    """
    if model.state_dim != 1 or model.param_dim != 1:
        raise DimensionError(f"cost surface needs a scalar model with one parameter, got {model.name}")
    x0_axis = np.asarray(x0_axis, dtype=float)
    alpha_axis = np.asarray(alpha_axis, dtype=float)
    X0, ALPHA = np.meshgrid(x0_axis, alpha_axis, indexing="ij")
    x = X0.ravel().copy()
    alpha = ALPHA.ravel()[None, :]

    steps, horizon = _observation_horizon(obs, grid)
    at_step = {0: x.copy()} if 0 in steps else {}
    with np.errstate(all="ignore"):
        for k in range(1, horizon.steps + 1):
            x = advance(model, x, alpha, grid.dt)
            if k in steps:
                at_step[k] = x.copy()

        cost = np.zeros(x.size)
        for z, k, s in zip(obs.values, steps, obs.noise_std):
            states = at_step[k]
            predicted = np.array(
                [obs.operator(np.array([xc]))[0] if np.isfinite(xc) else np.nan for xc in states]
            )
            cost += 0.5 * ((z[0] - predicted) / s) ** 2
    cost[~np.isfinite(cost)] = np.nan
    return CostSurface(x0_axis=x0_axis, alpha_axis=alpha_axis, values=cost.reshape(X0.shape))
