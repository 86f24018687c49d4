"""
Sensitivity of the optimal estimate to the observations, d(c_hat)/dz_i.

Small values mean a noise-robust estimate; the (t1, t2) sweeps map this
robustness for scalar models with two observations.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from fsm_placer.config import settings
from fsm_placer.dynamics import (
    ControlSelection,
    ControlVector,
    Matrix,
    ModelSystem,
    TimeGrid,
    Trajectory,
    integrate,
)
from fsm_placer.errors import (
    DegenerateSensitivityError,
    DimensionError,
    SingularGramianError,
)
from fsm_placer.assimilate import map_powers
from fsm_placer.observe import (
    SINGULAR_RTOL,
    Gramian,
    NoiseStd,
    ObservationOperator,
    noise_array,
    weighted_jacobian_blocks,
)
from fsm_placer.sensitivity import SensitivityTrajectory, propagate

logger = logging.getLogger(__name__)

SWEEP_FIELDS = ("y1sq", "w1sq", "y2sq", "w2sq", "detG")


@dataclass(frozen=True)
class EstimateSensitivity:
    """One block d(c_hat)/dz_i (control dim x observation dim) per observation."""

    times: Tuple[float, ...]
    blocks: Tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.blocks)


def single_obs_sensitivity(
    sens: SensitivityTrajectory,
    which: ControlSelection,
    time: float,
    index: int = 0,
    row: int = 0,
) -> float:
    """
    1/u(k) for the initial-state channel or 1/v(k) for the parameter channel.

    Raises:
        DegenerateSensitivityError: if the sensitivity vanishes at `time` (e.g. v(0) = 0)
    """
    u, v = sens.at_time(time)
    if which is ControlSelection.INITIAL_STATE:
        value = u[row, index]
    elif which is ControlSelection.PARAMETERS:
        value = v[row, index]
    else:
        raise DimensionError("choose the initial_state or the parameters channel")
    if abs(value) <= 1e-15:
        raise DegenerateSensitivityError(f"{which.value} sensitivity vanishes at t={time}")
    return 1.0 / float(value)


def estimate_sensitivity(
    sens: SensitivityTrajectory,
    trajectory: Trajectory,
    operator: ObservationOperator,
    times: Sequence[float],
    noise_std: NoiseStd = 1.0,
    selection: ControlSelection = ControlSelection.FULL,
) -> EstimateSensitivity:
    """
    d(c_hat)/dz_i = G^{-1} (D_h F_i)^T R_i^{-1} for every observation time.

    Raises:
        SingularGramianError: for repeated times or collinear sensitivities
    """
    grid = trajectory.grid
    steps = [grid.index_of(t) for t in times]
    if len(set(steps)) < len(steps):
        raise SingularGramianError(f"repeated observation times {list(times)} give a singular Gramian")
    sigma = noise_array(noise_std, len(steps))
    blocks = weighted_jacobian_blocks(sens, trajectory, operator, steps, sigma, selection)
    gramian = Gramian.from_blocks(blocks, times)
    if not gramian.is_nonsingular():
        raise SingularGramianError(f"Gramian at times {list(times)} is singular")
    out = tuple(np.linalg.solve(gramian.total, A.T / s) for A, s in zip(blocks, sigma))
    return EstimateSensitivity(times=tuple(grid.time_at(k) for k in steps), blocks=out)


def pair_sensitivities(
    sens: SensitivityTrajectory,
    trajectory: Trajectory,
    operator: ObservationOperator,
    t1: float,
    t2: float,
    noise_std: NoiseStd = 1.0,
) -> EstimateSensitivity:
    """[y_i, w_i]^T for two observations of a scalar model with one parameter."""
    if sens.state_dim != 1 or sens.param_dim != 1:
        raise DimensionError("pair sensitivities need a scalar model with one parameter")
    return estimate_sensitivity(sens, trajectory, operator, (t1, t2), noise_std)


def pair_sensitivities_closed_form(
    u1: float, v1: float, u2: float, v2: float, d1: float = 1.0, d2: float = 1.0
) -> Tuple[float, float, float, float]:
    """
    (y1, w1, y2, w2) from the two sensitivity pairs and the observation-operator
    derivatives d_i = h'(x(k_i)).

    With delta = u1 v2 - u2 v1 and |G| = d1^2 d2^2 delta^2:
    y1 = d1 d2^2 v2 delta / |G|, w1 = -d1 d2^2 u2 delta / |G|,
    y2 = -d2 d1^2 v1 delta / |G|, w2 = d2 d1^2 u1 delta / |G|.
    """
    delta = u1 * v2 - u2 * v1
    det = d1**2 * d2**2 * delta**2
    if det == 0:
        raise SingularGramianError("collinear sensitivities give a singular Gramian")
    return (
        d1 * d2**2 * v2 * delta / det,
        -d1 * d2**2 * u2 * delta / det,
        -d2 * d1**2 * v1 * delta / det,
        d2 * d1**2 * u1 * delta / det,
    )


def linear_vector_sensitivity(
    map_matrix: Matrix,
    operator: ObservationOperator,
    obs_step: int,
    noise_std: float = 1.0,
    other_steps: Sequence[int] = (),
) -> np.ndarray:
    """
    d(c_hat)/dz_i = G^{-1} (M^T)^i H^T R^{-1} for a linear map.

    Args:
        map_matrix: One-step matrix M
        operator: Linear observation operator H
        obs_step: Step i of the observation being perturbed
        noise_std: Common observation sigma
        other_steps: Steps of the remaining observations entering G

    Raises:
        SingularGramianError: if G is singular
    """
    if not operator.is_linear:
        raise DimensionError("linear sensitivity needs a linear observation operator")
    steps = [obs_step, *other_steps]
    powers = map_powers(map_matrix, steps)
    H = operator.matrix
    blocks = {k: np.asarray(H @ powers[k]) for k in set(steps)}
    gramian = Gramian.from_blocks([blocks[k] / noise_std for k in steps])
    if not gramian.is_nonsingular():
        raise SingularGramianError(f"Gramian over steps {steps} is singular")
    return np.linalg.solve(gramian.total, blocks[obs_step].T / noise_std**2)


@dataclass(frozen=True)
class SweepGrid:
    """
    Squared estimate sensitivities over a (t1, t2) grid. Arrays are indexed
    [i, j] for t1_axis[i], t2_axis[j]; singular cells hold NaN.
    """

    t1_axis: np.ndarray
    t2_axis: np.ndarray
    y1sq: np.ndarray
    w1sq: np.ndarray
    y2sq: np.ndarray
    w2sq: np.ndarray
    detG: np.ndarray
    singular: np.ndarray

    def field(self, name: str) -> np.ndarray:
        if name not in SWEEP_FIELDS:
            raise DimensionError(f"unknown sweep field '{name}'")
        return getattr(self, name)

    def _locate(self, values: np.ndarray, row: Optional[float], col: Optional[float], pick) -> Tuple[float, float]:
        i0 = None if row is None else int(np.argmin(np.abs(self.t1_axis - row)))
        j0 = None if col is None else int(np.argmin(np.abs(self.t2_axis - col)))
        view = values
        if i0 is not None:
            view = view[i0 : i0 + 1, :]
        if j0 is not None:
            view = view[:, j0 : j0 + 1]
        if np.all(np.isnan(view)):
            raise SingularGramianError("every selected sweep cell is singular")
        i, j = np.unravel_index(pick(view), view.shape)
        i = i0 if i0 is not None else int(i)
        j = j0 if j0 is not None else int(j)
        return float(self.t1_axis[i]), float(self.t2_axis[j])

    def argmin(self, name: str, row: Optional[float] = None, col: Optional[float] = None) -> Tuple[float, float]:
        """(t1, t2) of the smallest finite value, optionally along the row t1 = row or column t2 = col."""
        return self._locate(self.field(name), row, col, np.nanargmin)

    def argmax(self, name: str, row: Optional[float] = None, col: Optional[float] = None) -> Tuple[float, float]:
        return self._locate(self.field(name), row, col, np.nanargmax)

    def rows(self) -> List[Tuple[float, ...]]:
        """CSV rows: t1, t2, y1sq, w1sq, y2sq, w2sq, detG, singular_flag."""
        out = []
        for i, t1 in enumerate(self.t1_axis):
            for j, t2 in enumerate(self.t2_axis):
                out.append(
                    (
                        float(t1),
                        float(t2),
                        float(self.y1sq[i, j]),
                        float(self.w1sq[i, j]),
                        float(self.y2sq[i, j]),
                        float(self.w2sq[i, j]),
                        float(self.detG[i, j]),
                        int(self.singular[i, j]),
                    )
                )
        return out


def default_axis(grid: TimeGrid, resolution: int = 100) -> np.ndarray:
    """`resolution` evenly spaced grid times in (t0, end]."""
    span = grid.end - grid.t0
    raw = grid.t0 + span * np.arange(1, resolution + 1) / resolution
    return np.array([grid.time_at(grid.nearest_index(t)) for t in raw])


def sweep(
    model: ModelSystem,
    control: ControlVector,
    operator: ObservationOperator,
    t1_axis: Sequence[float],
    t2_axis: Sequence[float],
    grid: TimeGrid,
    workers: Optional[int] = None,
) -> SweepGrid:
    """
    Evaluate y1^2, w1^2, y2^2, w2^2 and |G| over the Cartesian (t1, t2) grid.

    Axis values are snapped to the nearest grid time. Cells with t1 = t2 or
    |G| <= 1e-12 (trace G)^2 are flagged singular and hold NaN. Rows run on a
    thread pool; the result does not depend on scheduling.

    Raises:
        DimensionError: if the model is not scalar with one parameter
    """
    if model.state_dim != 1 or model.param_dim != 1:
        raise DimensionError(f"sweeps need a scalar model with one parameter, got {model.name}")
    k1 = np.array([grid.nearest_index(t) for t in t1_axis], dtype=int)
    k2 = np.array([grid.nearest_index(t) for t in t2_axis], dtype=int)
    needed = np.union1d(k1, k2)

    trajectory = integrate(model, control, grid.truncated(int(needed[-1])))
    sens = propagate(model, trajectory, keep=needed)

    # weighted scalar sensitivities d*u and d*v at every needed step
    du = {}
    dv = {}
    for k in needed:
        Dh = operator.jacobian(trajectory.states[k])
        d = float((Dh.toarray() if sparse.issparse(Dh) else np.asarray(Dh))[0, 0])
        u, v = sens.at_step(int(k))
        du[int(k)] = d * u[0, 0]
        dv[int(k)] = d * v[0, 0]
    a1 = np.array([du[int(k)] for k in k1])
    b1 = np.array([dv[int(k)] for k in k1])
    a2 = np.array([du[int(k)] for k in k2])
    b2 = np.array([dv[int(k)] for k in k2])

    def row(i: int) -> np.ndarray:
        # G entries for (t1_i, t2_j) over all j
        g11 = a1[i] ** 2 + a2**2
        g12 = a1[i] * b1[i] + a2 * b2
        g22 = b1[i] ** 2 + b2**2
        det = g11 * g22 - g12**2
        singular = (det <= SINGULAR_RTOL * (g11 + g22) ** 2) | (k2 == k1[i])
        with np.errstate(divide="ignore", invalid="ignore"):
            y1 = (g22 * a1[i] - g12 * b1[i]) / det
            w1 = (g11 * b1[i] - g12 * a1[i]) / det
            y2 = (g22 * a2 - g12 * b2) / det
            w2 = (g11 * b2 - g12 * a2) / det
        fields = np.vstack([y1**2, w1**2, y2**2, w2**2, det])
        fields[:4, singular] = np.nan
        return np.vstack([fields, singular.astype(float)])

    with ThreadPoolExecutor(max_workers=workers or settings.max_workers) as executor:
        rows = list(executor.map(row, range(k1.size)))
    stacked = np.stack(rows)  # (len(t1), 6, len(t2))

    logger.info("swept %d x %d observation pairs for %s", k1.size, k2.size, model.name)
    return SweepGrid(
        t1_axis=np.array([grid.time_at(k) for k in k1]),
        t2_axis=np.array([grid.time_at(k) for k in k2]),
        y1sq=stacked[:, 0, :],
        w1sq=stacked[:, 1, :],
        y2sq=stacked[:, 2, :],
        w2sq=stacked[:, 3, :],
        detG=stacked[:, 4, :],
        singular=stacked[:, 5, :].astype(bool),
    )
