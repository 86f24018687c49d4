"""
Observation operators, twin-experiment observation synthesis, observability
Gramian assembly and the sensitivity-driven placement of observation times.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat
from scipy import sparse

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
    ConfigError,
    DimensionError,
    NumericalError,
    PlacementError,
    SingularPlanError,
)
from fsm_placer.sensitivity import SensitivityTrajectory, invariants, propagate

logger = logging.getLogger(__name__)

NoiseStd = Union[float, Sequence[float], np.ndarray]

# |G| <= SINGULAR_RTOL * (trace G)^d marks a Gramian as singular
SINGULAR_RTOL = 1e-12


class OperatorKind(str, Enum):
    IDENTITY = "identity"
    LINEAR = "linear"
    POINTWISE = "pointwise"
    SCALAR = "scalar"


@dataclass(frozen=True)
class ObservationOperator:
    """
    Observation map h: state -> R^m and its Jacobian D_h.

    Linear operators also carry their matrix; pointwise sampling carries the
    sampled state indices.
    """

    kind: OperatorKind
    state_dim: int
    obs_dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], Matrix]
    matrix: Optional[Matrix] = None
    indices: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.apply(x), dtype=float))

    @property
    def is_linear(self) -> bool:
        return self.matrix is not None


def identity_operator(n: int) -> ObservationOperator:
    """Full-state observation."""
    eye = sparse.identity(n, format="csr")
    return ObservationOperator(
        kind=OperatorKind.IDENTITY,
        state_dim=n,
        obs_dim=n,
        apply=lambda x: np.array(x, dtype=float),
        jacobian=lambda x: eye,
        matrix=eye,
    )


def linear_operator(H: Matrix) -> ObservationOperator:
    """Observation z = H x with a constant (dense or sparse) matrix."""
    if sparse.issparse(H):
        H = H.tocsr()
    else:
        H = np.atleast_2d(np.asarray(H, dtype=float))
    m, n = H.shape
    return ObservationOperator(
        kind=OperatorKind.LINEAR,
        state_dim=n,
        obs_dim=m,
        apply=lambda x: H @ x,
        jacobian=lambda x: H,
        matrix=H,
    )


def pointwise_operator(n: int, indices: Sequence[int]) -> ObservationOperator:
    """Sampling of selected state components (sensor locations)."""
    idx = np.unique(np.asarray(indices, dtype=int))
    if idx.size == 0 or idx[0] < 0 or idx[-1] >= n:
        raise DimensionError(f"pointwise indices must lie in 0..{n - 1}")
    H = sparse.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, n))
    return ObservationOperator(
        kind=OperatorKind.POINTWISE,
        state_dim=n,
        obs_dim=idx.size,
        apply=lambda x: np.asarray(x, dtype=float)[idx],
        jacobian=lambda x: H,
        matrix=H,
        indices=idx,
    )


def scalar_operator(
    h: Callable[[float], float], dh: Callable[[float], float]
) -> ObservationOperator:
    """Nonlinear observation of a scalar state with derivative dh."""
    return ObservationOperator(
        kind=OperatorKind.SCALAR,
        state_dim=1,
        obs_dim=1,
        apply=lambda x: np.array([h(float(x[0]))]),
        jacobian=lambda x: np.array([[dh(float(x[0]))]]),
    )


class ObservationSetRecord(BaseModel):
    """JSON form of an ObservationSet."""

    model_config = ConfigDict(frozen=True)

    times: List[float]
    values: List[List[float]]
    noise_std: List[float]
    operator: OperatorKind
    state_dim: int
    indices: Optional[List[int]] = None
    matrix: Optional[List[List[float]]] = None


@dataclass(frozen=True)
class ObservationSet:
    """Noisy observations z(k_i) with their standard deviations."""

    times: np.ndarray
    values: np.ndarray
    noise_std: np.ndarray
    operator: ObservationOperator

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.asarray(self.values, dtype=float).reshape(times.size, -1)
        noise = np.broadcast_to(np.asarray(self.noise_std, dtype=float), times.shape).copy()
        if times.size == 0:
            raise DimensionError("an observation set needs at least one observation")
        if np.any(np.diff(times) <= 0):
            raise DimensionError("observation times must be strictly increasing")
        if values.shape[1] != self.operator.obs_dim:
            raise DimensionError(
                f"observations have dimension {values.shape[1]}, operator expects {self.operator.obs_dim}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericalError("observation values must be finite")
        if np.any(~np.isfinite(noise)) or np.any(noise <= 0):
            raise NumericalError("observation noise standard deviations must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "noise_std", noise)

    def __len__(self) -> int:
        return self.times.size

    def steps(self, grid: TimeGrid) -> List[int]:
        return grid.indices_of(self.times)

    def perturbed(self, index: int, delta: float, component: int = 0) -> "ObservationSet":
        """Copy with one observation value shifted by delta."""
        values = self.values.copy()
        values[index, component] += delta
        return ObservationSet(self.times, values, self.noise_std, self.operator)

    def to_record(self) -> ObservationSetRecord:
        matrix = None
        if self.operator.kind is OperatorKind.LINEAR:
            H = self.operator.matrix
            matrix = (H.toarray() if sparse.issparse(H) else np.asarray(H)).tolist()
        indices = self.operator.indices.tolist() if self.operator.indices is not None else None
        return ObservationSetRecord(
            times=self.times.tolist(),
            values=self.values.tolist(),
            noise_std=self.noise_std.tolist(),
            operator=self.operator.kind,
            state_dim=self.operator.state_dim,
            indices=indices,
            matrix=matrix,
        )

    @classmethod
    def from_record(
        cls, record: ObservationSetRecord, operator: Optional[ObservationOperator] = None
    ) -> "ObservationSet":
        """Rebuild from JSON; custom scalar operators must be supplied by the caller."""
        if operator is None:
            if record.operator is OperatorKind.IDENTITY:
                operator = identity_operator(record.state_dim)
            elif record.operator is OperatorKind.POINTWISE and record.indices is not None:
                operator = pointwise_operator(record.state_dim, record.indices)
            elif record.operator is OperatorKind.LINEAR and record.matrix is not None:
                operator = linear_operator(np.array(record.matrix))
            else:
                raise ConfigError(f"cannot rebuild a '{record.operator.value}' observation operator")
        return cls(
            times=np.array(record.times),
            values=np.array(record.values),
            noise_std=np.array(record.noise_std),
            operator=operator,
        )


def _noise_scale(clean: np.ndarray) -> float:
    if clean.size == 1:
        return float(abs(clean[0]))
    return float(np.sqrt(np.mean(clean**2)))


def synthesize_observations(
    truth_model: ModelSystem,
    truth_control: ControlVector,
    operator: ObservationOperator,
    times: Sequence[float],
    noise_pct: float,
    seed: int,
    grid: TimeGrid,
    trajectory: Optional[Trajectory] = None,
) -> ObservationSet:
    """
    Twin-experiment observations z_i = h(x_true(k_i)) + eta_i.

    Args:
        truth_model: Model generating the truth
        truth_control: True initial state and parameters
        operator: Observation operator
        times: Observation times on `grid`
        noise_pct: Noise level in percent of the observable's scale
            (|h| for scalar observations, RMS of h for vector ones)
        seed: Seed of the noise generator
        grid: Integration grid
        trajectory: Precomputed truth trajectory on `grid`, reused when given

    Returns:
        ObservationSet; noise-free sets carry unit standard deviations

    Raises:
        OffGridError: if a time is not on the grid
        ConfigError: for a negative noise level
    """
    if noise_pct < 0:
        raise ConfigError(f"noise_pct must be non-negative, got {noise_pct}")
    steps = grid.indices_of(times)
    if trajectory is None:
        trajectory = integrate(truth_model, truth_control, grid.truncated(max(steps)))

    rng = np.random.default_rng(seed)
    values = []
    sigmas = []
    for k in steps:
        clean = operator(trajectory.states[k])
        if noise_pct == 0:
            values.append(clean)
            sigmas.append(1.0)
            continue
        sigma = noise_pct / 100.0 * _noise_scale(clean)
        if sigma <= 0:
            logger.warning("observable vanishes at step %d, using unit noise scale", k)
            sigma = noise_pct / 100.0
        values.append(clean + sigma * rng.standard_normal(clean.size))
        sigmas.append(sigma)

    return ObservationSet(
        times=np.array([grid.time_at(k) for k in steps]),
        values=np.array(values),
        noise_std=np.array(sigmas),
        operator=operator,
    )


def noise_array(noise_std: NoiseStd, count: int) -> np.ndarray:
    """Per-observation sigma, broadcast from a scalar if needed."""
    sigma = np.broadcast_to(np.asarray(noise_std, dtype=float), (count,)).copy()
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise NumericalError("noise standard deviation must be positive to weight observations")
    return sigma


def weighted_jacobian_blocks(
    sens: SensitivityTrajectory,
    trajectory: Trajectory,
    operator: ObservationOperator,
    steps: Sequence[int],
    noise_std: NoiseStd,
    selection: ControlSelection = ControlSelection.FULL,
) -> List[np.ndarray]:
    """R_i^{-1/2} D_h(x(k_i)) F(k_i) for every observation step."""
    sigma = noise_array(noise_std, len(steps))
    if operator.state_dim != sens.state_dim:
        raise DimensionError(
            f"operator acts on dimension {operator.state_dim}, model state has {sens.state_dim}"
        )
    blocks = []
    for k, s in zip(steps, sigma):
        Dh = operator.jacobian(trajectory.states[k])
        blocks.append(np.asarray(Dh @ sens.columns(k, selection)) / s)
    return blocks


def _symmetrized(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class Gramian:
    """Observability Gramian G = sum of per-observation parts G_i."""

    total: np.ndarray
    parts: Tuple[np.ndarray, ...]
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray], times: Optional[Sequence[float]] = None) -> "Gramian":
        """Parts A_i^T A_i of the stacked blocks, each made exactly symmetric, and their sum."""
        parts = tuple(_symmetrized(A.T @ A) for A in blocks)
        return cls(
            total=np.sum(parts, axis=0),
            parts=parts,
            times=np.zeros(0) if times is None else np.asarray(times, dtype=float),
        )

    @property
    def dim(self) -> int:
        return self.total.shape[0]

    @property
    def det(self) -> float:
        """|G| rebuilt from the log-determinant; leaves the float range for large fields, use `logdet` there."""
        sign, value = np.linalg.slogdet(self.total)
        with np.errstate(over="ignore", under="ignore"):
            return float(sign * np.exp(value))

    @property
    def logdet(self) -> float:
        sign, value = np.linalg.slogdet(self.total)
        return float(value) if sign > 0 else -math.inf

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.total)

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.total))

    def is_nonsingular(self, rtol: float = SINGULAR_RTOL) -> bool:
        """|G| > rtol * (trace G)^d, evaluated in log space."""
        trace = float(np.trace(self.total))
        if trace <= 0:
            return False
        return self.logdet > math.log(rtol) + self.dim * math.log(trace)


def build_gramian(
    sens: SensitivityTrajectory,
    trajectory: Trajectory,
    operator: ObservationOperator,
    times: Sequence[float],
    noise_std: NoiseStd = 1.0,
    selection: ControlSelection = ControlSelection.FULL,
) -> Gramian:
    """
    Assemble G = sum_i F_i^T D_h^T R_i^{-1} D_h F_i over the observation times.

    Duplicate times are allowed here and produce a singular total.
    """
    steps = [trajectory.grid.index_of(t) for t in times]
    blocks = weighted_jacobian_blocks(sens, trajectory, operator, steps, noise_std, selection)
    return Gramian.from_blocks(blocks, times)


def gramian_det_closed_form(
    u1: float, v1: float, u2: float, v2: float, d1: float = 1.0, d2: float = 1.0
) -> float:
    """|G| = d1^2 d2^2 (u1 v2 - u2 v1)^2 for two scalar observations."""
    return d1**2 * d2**2 * (u1 * v2 - u2 * v1) ** 2


class PlacementConstraints(BaseModel):
    model_config = ConfigDict(frozen=True)

    min_time: NonNegativeFloat = 0.0
    min_separation: NonNegativeFloat = 0.0
    max_time: Optional[float] = None


class PlacementChoice(BaseModel):
    model_config = ConfigDict(frozen=True)

    time: float
    channel: str
    squared_value: float


class PlacementRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    times: List[float]
    steps: List[int]
    rationale: List[PlacementChoice]
    gramian_det: float
    gramian_logdet: float


@dataclass(frozen=True)
class PlacementPlan:
    times: Tuple[float, ...]
    steps: Tuple[int, ...]
    rationale: Tuple[PlacementChoice, ...]
    gramian_det: float
    gramian_logdet: float

    def to_record(self) -> PlacementRecord:
        return PlacementRecord(
            times=list(self.times),
            steps=list(self.steps),
            rationale=list(self.rationale),
            gramian_det=self.gramian_det,
            gramian_logdet=self.gramian_logdet,
        )


def _channel_names(sens: SensitivityTrajectory, selection: ControlSelection) -> List[str]:
    names = [f"u[{j}]" for j in range(sens.state_dim)] + [f"v[{j}]" for j in range(sens.param_dim)]
    return names[selection.span(sens.state_dim, sens.param_dim)]


def _allowed(step: int, chosen: List[int], dt: float, min_separation: float) -> bool:
    if min_separation <= 0:
        return True
    return all(abs(step - c) * dt >= min_separation - 1e-9 * dt for c in chosen)


def _candidate_mask(times: np.ndarray, constraints: PlacementConstraints, dt: float) -> np.ndarray:
    tol = 1e-9 * dt
    mask = times >= constraints.min_time - tol
    if constraints.max_time is not None:
        mask &= times <= constraints.max_time + tol
    return mask


def plan_placement(
    sens: SensitivityTrajectory,
    trajectory: Trajectory,
    operator: ObservationOperator,
    count: int,
    constraints: Optional[PlacementConstraints] = None,
    selection: ControlSelection = ControlSelection.FULL,
    noise_std: NoiseStd = 1.0,
    model: Optional[ModelSystem] = None,
) -> PlacementPlan:
    """
    Place `count` observations where squared sensitivities peak.

    Scalar models pick, channel by channel, the admissible time maximizing
    ||D_h F[:, j]||^2. Field models rank admissible times by the invariant I1.
    Channels are revisited in turn when `count` exceeds their number.

    Args:
        sens: Sensitivities covering the candidate times (or tracked invariants for field models)
        trajectory: Reference trajectory the sensitivities were propagated along
        operator: Observation operator
        count: Number of observation times
        constraints: Earliest/latest admissible time and minimum separation
        selection: Estimated control components
        noise_std: Observation sigma used to weight the Gramian of the plan
        model: Used to re-propagate at the chosen steps when they were not retained

    Returns:
        PlacementPlan with sorted times and the Gramian determinant

    Raises:
        PlacementError: infeasible constraints or too few observations
        SingularPlanError: the chosen times give a singular Gramian
    """
    constraints = constraints or PlacementConstraints()
    grid = trajectory.grid
    channels = _channel_names(sens, selection)
    needed = math.ceil(len(channels) / operator.obs_dim)
    if count < needed:
        raise PlacementError(
            f"{len(channels)} control components need at least {needed} observation times, got {count}"
        )

    chosen: List[int] = []
    rationale: List[PlacementChoice] = []
    field_model = sens.state_dim > 1

    if field_model:
        inv = invariants(sens)
        mask = _candidate_mask(inv.times, constraints, grid.dt)
        # adjacent grid steps carry the same information, keep plans distinct
        separation = max(constraints.min_separation, grid.dt)
        for pos in np.argsort(-np.where(mask, inv.I1, -np.inf), kind="stable"):
            if len(chosen) == count or not mask[pos]:
                break
            step = int(inv.steps[pos])
            if _allowed(step, chosen, grid.dt, separation):
                chosen.append(step)
                rationale.append(
                    PlacementChoice(time=grid.time_at(step), channel="I1", squared_value=float(inv.I1[pos]))
                )
        if len(chosen) < count:
            raise PlacementError(f"only {len(chosen)} of {count} observation times satisfy the constraints")
    else:
        mask = _candidate_mask(sens.times, constraints, grid.dt)
        if not mask.any():
            raise PlacementError(f"no grid time satisfies min_time={constraints.min_time}")
        span = selection.span(sens.state_dim, sens.param_dim)
        series = np.empty((len(channels), sens.steps.size))
        for pos, step in enumerate(sens.steps):
            Dh = operator.jacobian(trajectory.states[step])
            F = np.hstack([sens.u[pos], sens.v[pos]])[:, span]
            series[:, pos] = np.sum(np.asarray(Dh @ F) ** 2, axis=0)
        for i in range(count):
            j = i % len(channels)
            admissible = [
                pos
                for pos in np.flatnonzero(mask)
                if _allowed(int(sens.steps[pos]), chosen, grid.dt, constraints.min_separation)
                and (i < len(channels) or int(sens.steps[pos]) not in chosen)
            ]
            if not admissible:
                raise PlacementError(
                    f"no admissible time left for channel {channels[j]} "
                    f"(min_time={constraints.min_time}, min_separation={constraints.min_separation})"
                )
            best = admissible[int(np.argmax(series[j, admissible]))]
            step = int(sens.steps[best])
            chosen.append(step)
            rationale.append(
                PlacementChoice(time=grid.time_at(step), channel=channels[j], squared_value=float(series[j, best]))
            )

    if len(set(chosen)) < len(chosen):
        raise SingularPlanError(
            f"channels peak at the same time {sorted(grid.time_at(k) for k in chosen)}; the Gramian is singular"
        )
    steps = sorted(chosen)
    times = [grid.time_at(k) for k in steps]
    gramian = plan_gramian(sens, trajectory, operator, steps, noise_std, selection, model)
    if not _acceptable(gramian, field_model):
        raise SingularPlanError(f"observation times {times} give a singular Gramian")

    logger.info("placed observations at %s (log|G| = %.6g)", [round(t, 10) for t in times], gramian.logdet)
    return PlacementPlan(
        times=tuple(times),
        steps=tuple(steps),
        rationale=tuple(sorted(rationale, key=lambda c: c.time)),
        gramian_det=gramian.det,
        gramian_logdet=gramian.logdet,
    )


def plan_gramian(
    sens: SensitivityTrajectory,
    trajectory: Trajectory,
    operator: ObservationOperator,
    steps: Sequence[int],
    noise_std: NoiseStd = 1.0,
    selection: ControlSelection = ControlSelection.FULL,
    model: Optional[ModelSystem] = None,
) -> Gramian:
    """Gramian at the given steps, re-propagating when they were not retained."""
    missing = [k for k in steps if k not in set(sens.steps.tolist())]
    if missing:
        if model is None:
            raise PlacementError(f"sensitivities at steps {missing} are needed to assess the plan")
        sens = propagate(model, trajectory, keep=steps)
    grid = trajectory.grid
    return build_gramian(sens, trajectory, operator, [grid.time_at(k) for k in steps], noise_std, selection)


def _acceptable(gramian: Gramian, field_model: bool) -> bool:
    # field Gramians are ill-conditioned by nature and rely on TSVD downstream
    if field_model:
        return float(np.trace(gramian.total)) > 0
    return gramian.is_nonsingular()


def explicit_plan(
    sens: SensitivityTrajectory,
    trajectory: Trajectory,
    operator: ObservationOperator,
    times: Sequence[float],
    selection: ControlSelection = ControlSelection.FULL,
    noise_std: NoiseStd = 1.0,
    model: Optional[ModelSystem] = None,
) -> PlacementPlan:
    """
    Plan from user-given times, checked the same way as a computed plan.

    Raises:
        OffGridError: if a time is not on the grid
        SingularPlanError: for repeated times or a singular Gramian
    """
    grid = trajectory.grid
    steps = sorted(grid.index_of(t) for t in times)
    if len(set(steps)) < len(steps):
        raise SingularPlanError(f"observation times {list(times)} repeat; the Gramian is singular")
    gramian = plan_gramian(sens, trajectory, operator, steps, noise_std, selection, model)
    plan_times = [grid.time_at(k) for k in steps]
    if not _acceptable(gramian, sens.state_dim > 1):
        raise SingularPlanError(f"observation times {plan_times} give a singular Gramian")
    rationale = tuple(
        PlacementChoice(time=t, channel="explicit", squared_value=float(np.trace(part)))
        for t, part in zip(plan_times, gramian.parts)
    )
    return PlacementPlan(
        times=tuple(plan_times),
        steps=tuple(steps),
        rationale=rationale,
        gramian_det=gramian.det,
        gramian_logdet=gramian.logdet,
    )
