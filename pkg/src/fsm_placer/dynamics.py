"""
Dynamics module for fsm_placer.
Defines the control vector, the time grid, the model abstraction (continuous
ODE or discrete one-step map), the four built-in models and the fixed-step
integrator that advances them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
)
from scipy import sparse
from scipy.special import expit

from fsm_placer.errors import DimensionError, ModelError, NumericalError, OffGridError

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sparse.spmatrix, sparse.sparray]

# Relative tolerance (in units of dt) for matching a time to a grid point
GRID_TOLERANCE = 1e-6


class ModelKind(str, Enum):
    """How the model right-hand side is interpreted"""

    CONTINUOUS = "continuous"
    DISCRETE_MAP = "discrete_map"


class ControlSelection(str, Enum):
    """Which control components are being estimated"""

    FULL = "full"
    INITIAL_STATE = "initial_state"
    PARAMETERS = "parameters"

    def span(self, state_dim: int, param_dim: int) -> slice:
        """Slice of the full control vector (initial state first) that is selected."""
        if self is ControlSelection.INITIAL_STATE:
            return slice(0, state_dim)
        if self is ControlSelection.PARAMETERS:
            return slice(state_dim, state_dim + param_dim)
        return slice(0, state_dim + param_dim)


class TimeGrid(BaseModel):
    """
    Uniform time grid t_k = t0 + k * dt for k = 0..steps.
    """

    model_config = ConfigDict(frozen=True)

    t0: float = 0.0
    dt: PositiveFloat
    steps: NonNegativeInt

    @classmethod
    def from_horizon(cls, horizon: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        """
        Build the grid covering [t0, t0 + horizon].

        Args:
            horizon: Length of the time window
            dt: Step size; horizon must be an integer multiple of it
            t0: Start time

        Returns:
            TimeGrid with steps = horizon / dt
        """
        if dt <= 0 or horizon < 0:
            raise OffGridError(f"invalid horizon {horizon} or step {dt}")
        steps = int(round(horizon / dt))
        if abs(steps * dt - horizon) > GRID_TOLERANCE * dt:
            raise OffGridError(f"horizon {horizon} is not a multiple of dt={dt}")
        return cls(t0=t0, dt=dt, steps=steps)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def end(self) -> float:
        return self.t0 + self.dt * self.steps

    def time_at(self, step: int) -> float:
        return self.t0 + step * self.dt

    def nearest_index(self, t: float) -> int:
        """Closest grid index to t, clipped to the grid."""
        k = int(round((t - self.t0) / self.dt))
        return min(max(k, 0), self.steps)

    def index_of(self, t: float) -> int:
        """
        Grid index of time t.

        Raises:
            OffGridError: if t is outside the grid or between two grid points
        """
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.steps or abs(self.time_at(k) - t) > GRID_TOLERANCE * self.dt:
            raise OffGridError(
                f"time {t} is not on the grid t0={self.t0}, dt={self.dt}, steps={self.steps}"
            )
        return k

    def indices_of(self, times: Sequence[float]) -> list[int]:
        return [self.index_of(t) for t in times]

    def truncated(self, steps: int) -> "TimeGrid":
        """Same grid cut after `steps` steps."""
        return TimeGrid(t0=self.t0, dt=self.dt, steps=min(steps, self.steps))


@dataclass(frozen=True)
class ControlVector:
    """
    The unknowns of the inverse problem: initial state x0 and parameters alpha.
    """

    initial_state: np.ndarray
    parameters: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        x0 = np.atleast_1d(np.array(self.initial_state, dtype=float))
        alpha = np.atleast_1d(np.array(self.parameters, dtype=float))
        if x0.ndim != 1 or alpha.ndim != 1:
            raise DimensionError("initial_state and parameters must be vectors")
        if x0.size < 1:
            raise DimensionError("initial_state must have at least one component")
        object.__setattr__(self, "initial_state", x0)
        object.__setattr__(self, "parameters", alpha)

    @property
    def state_dim(self) -> int:
        return self.initial_state.size

    @property
    def param_dim(self) -> int:
        return self.parameters.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.initial_state, self.parameters])

    def select(self, selection: ControlSelection = ControlSelection.FULL) -> np.ndarray:
        """Components of the control picked by `selection`, initial state first."""
        return self.as_array()[selection.span(self.state_dim, self.param_dim)]

    def replace(self, selection: ControlSelection, values: np.ndarray) -> "ControlVector":
        """New control with the selected components replaced by `values`."""
        full = self.as_array()
        span = selection.span(self.state_dim, self.param_dim)
        values = np.asarray(values, dtype=float).ravel()
        if values.size != full[span].size:
            raise DimensionError(
                f"expected {full[span].size} values for {selection.value}, got {values.size}"
            )
        full[span] = values
        return ControlVector(full[: self.state_dim], full[self.state_dim :])


@dataclass(frozen=True)
class SpatialGrid1D:
    """Interior nodes of a 1D domain [0, length]."""

    nodes: np.ndarray
    length: float

    @property
    def spacing(self) -> float:
        return self.length / (self.nodes.size + 1)


@dataclass(frozen=True)
class SpatialGrid2D:
    """
    Nodes of the unit square; flattened index is j * nx + i with i along x.
    """

    x: np.ndarray
    y: np.ndarray
    periodic: bool = False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.y.size, self.x.size

    @property
    def spacing(self) -> Tuple[float, float]:
        if self.periodic:
            return 1.0 / self.x.size, 1.0 / self.y.size
        return 1.0 / (self.x.size + 1), 1.0 / (self.y.size + 1)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flattened node coordinates (X, Y)."""
        X, Y = np.meshgrid(self.x, self.y)
        return X.ravel(), Y.ravel()


SpatialGrid = Union[SpatialGrid1D, SpatialGrid2D]


@dataclass(frozen=True)
class ModelSystem:
    """
    A dynamical model with analytic Jacobians.

    For continuous models `rhs` is dx/dt = f(x, alpha); for discrete maps it is
    the one-step map x_{k+1} = M(x_k, alpha) built for the step `dt`.
    """

    name: str
    state_dim: int
    param_dim: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_state: Callable[[np.ndarray, np.ndarray], Matrix]
    jac_param: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: ModelKind = ModelKind.CONTINUOUS
    default_parameters: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dt: Optional[float] = None
    linear: bool = False
    space: Optional[SpatialGrid] = None

    def __post_init__(self):
        object.__setattr__(
            self, "default_parameters", np.atleast_1d(np.array(self.default_parameters, dtype=float))
        )

    @property
    def is_scalar(self) -> bool:
        return self.state_dim == 1

    def check_control(self, control: ControlVector) -> None:
        if control.state_dim != self.state_dim or control.param_dim != self.param_dim:
            raise DimensionError(
                f"{self.name} expects control dims ({self.state_dim}, {self.param_dim}), "
                f"got ({control.state_dim}, {control.param_dim})"
            )

    def check_grid(self, grid: TimeGrid) -> None:
        if self.kind is ModelKind.DISCRETE_MAP and self.dt is not None:
            if abs(grid.dt - self.dt) > GRID_TOLERANCE * self.dt:
                raise DimensionError(
                    f"{self.name} is a one-step map for dt={self.dt}, grid uses dt={grid.dt}"
                )

    def default_control(self, initial_state: np.ndarray) -> ControlVector:
        return ControlVector(initial_state, self.default_parameters)


@dataclass(frozen=True)
class Trajectory:
    """Model states on every point of a time grid, with the parameters that produced them."""

    grid: TimeGrid
    states: np.ndarray
    parameters: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.states.shape[0] != self.grid.steps + 1:
            raise DimensionError(
                f"trajectory has {self.states.shape[0]} states for {self.grid.steps} steps"
            )

    def at_step(self, step: int) -> np.ndarray:
        return self.states[step]

    def at_time(self, t: float) -> np.ndarray:
        return self.states[self.grid.index_of(t)]


def rk4_stages(
    model: ModelSystem, x: np.ndarray, alpha: np.ndarray, h: float
) -> Tuple[Tuple[np.ndarray, ...], Tuple[np.ndarray, ...]]:
    """
    Stage states and slopes of one classical RK4 step.

    Returns:
        ((x1, x2, x3, x4), (k1, k2, k3, k4))
    """
    k1 = model.rhs(x, alpha)
    x2 = x + 0.5 * h * k1
    k2 = model.rhs(x2, alpha)
    x3 = x + 0.5 * h * k2
    k3 = model.rhs(x3, alpha)
    x4 = x + h * k3
    k4 = model.rhs(x4, alpha)
    return (x, x2, x3, x4), (k1, k2, k3, k4)


def advance(model: ModelSystem, x: np.ndarray, alpha: np.ndarray, dt: float) -> np.ndarray:
    """One step of the model: RK4 for continuous models, the map itself otherwise."""
    if model.kind is ModelKind.DISCRETE_MAP:
        return np.asarray(model.rhs(x, alpha), dtype=float)
    _, (k1, k2, k3, k4) = rk4_stages(model, x, alpha, dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(model: ModelSystem, control: ControlVector, grid: TimeGrid) -> Trajectory:
    """
    Integrate the model from the control's initial state over the grid.

    Args:
        model: Model to integrate
        control: Initial state and parameters
        grid: Time grid; for discrete maps dt must equal the map step

    Returns:
        Trajectory with steps + 1 states

    Raises:
        DimensionError: if control or grid do not fit the model
        NumericalError: if a state becomes non-finite (blow-up, CFL violation)
    """
    model.check_control(control)
    model.check_grid(grid)

    states = np.empty((grid.steps + 1, model.state_dim))
    states[0] = control.initial_state
    alpha = control.parameters
    x = states[0]
    for k in range(grid.steps):
        x = advance(model, x, alpha, grid.dt)
        if not np.all(np.isfinite(x)):
            raise NumericalError(
                f"non-finite state in {model.name} at step {k + 1} (t={grid.time_at(k + 1):.6g})",
                step=k + 1,
            )
        states[k + 1] = x
    return Trajectory(grid=grid, states=states, parameters=alpha.copy())


class ModelOptions(BaseModel):
    """
    Options of the built-in models. Fields irrelevant to a model are ignored by it.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    # scalar decay models
    a: float = -1.0

    # burgers_1d
    n: PositiveInt = 128
    length: PositiveFloat = 1.0
    re: PositiveFloat = 500.0
    viscous: bool = True

    # advdiff_2d
    nx: PositiveInt = 32
    ny: PositiveInt = 32
    cx: float = 0.5
    cy: float = 0.5
    nu: PositiveFloat = 0.01
    map_dt: PositiveFloat = 0.005
    boundary: Literal["dirichlet", "periodic"] = "dirichlet"


def _linear_decay(options: ModelOptions) -> ModelSystem:
    return ModelSystem(
        name="linear_decay",
        state_dim=1,
        param_dim=1,
        rhs=lambda x, alpha: alpha[0] * x,
        jac_state=lambda x, alpha: np.array([[alpha[0]]]),
        jac_param=lambda x, alpha: np.reshape(x, (1, 1)).astype(float),
        default_parameters=np.array([options.a]),
    )


def _quadratic_decay(options: ModelOptions) -> ModelSystem:
    return ModelSystem(
        name="quadratic_decay",
        state_dim=1,
        param_dim=1,
        rhs=lambda x, alpha: alpha[0] * x**2,
        jac_state=lambda x, alpha: np.array([[2.0 * alpha[0] * x[0]]]),
        jac_param=lambda x, alpha: np.reshape(x**2, (1, 1)).astype(float),
        default_parameters=np.array([options.a]),
    )


def _burgers_1d(options: ModelOptions) -> ModelSystem:
    n = options.n
    dx = options.length / (n + 1)
    viscous = options.viscous

    def neighbours(u):
        # zero Dirichlet ghosts on both ends
        padded = np.concatenate(([0.0], u, [0.0]))
        return padded[:-2], padded[1:-1], padded[2:]

    def rhs(u, alpha):
        left, mid, right = neighbours(u)
        du = -(left + mid + right) * (right - left) / (6.0 * dx)
        if viscous:
            du = du + alpha[0] * (right - 2.0 * mid + left) / dx**2
        return du

    def jac_state(u, alpha):
        left, mid, right = neighbours(u)
        lower = (2.0 * left + mid) / (6.0 * dx)
        main = -(right - left) / (6.0 * dx)
        upper = -(2.0 * right + mid) / (6.0 * dx)
        if viscous:
            nu = alpha[0]
            lower = lower + nu / dx**2
            main = main - 2.0 * nu / dx**2
            upper = upper + nu / dx**2
        return sparse.diags([lower[1:], main, upper[:-1]], [-1, 0, 1], shape=(n, n), format="csr")

    def jac_param(u, alpha):
        if not viscous:
            return np.zeros((n, 1))
        left, mid, right = neighbours(u)
        return ((right - 2.0 * mid + left) / dx**2).reshape(n, 1)

    return ModelSystem(
        name="burgers_1d",
        state_dim=n,
        param_dim=1,
        rhs=rhs,
        jac_state=jac_state,
        jac_param=jac_param,
        default_parameters=np.array([1.0 / options.re]),
        space=SpatialGrid1D(nodes=dx * np.arange(1, n + 1), length=options.length),
    )


def _difference_matrices(m: int, h: float, periodic: bool) -> Tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Centered first and second difference matrices on m nodes with spacing h."""
    first = sparse.diags([-1.0, 1.0], [-1, 1], shape=(m, m), format="lil")
    second = sparse.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(m, m), format="lil")
    if periodic:
        first[0, m - 1] += -1.0
        first[m - 1, 0] += 1.0
        second[0, m - 1] += 1.0
        second[m - 1, 0] += 1.0
    return first.tocsr() / (2.0 * h), second.tocsr() / h**2


def advdiff_operators(
    space: SpatialGrid2D,
) -> Tuple[sparse.csr_matrix, sparse.csr_matrix, sparse.csr_matrix]:
    """
    Centered x-derivative, y-derivative and 5-point Laplacian on the grid.
    """
    ny, nx = space.shape
    hx, hy = space.spacing
    d1x, d2x = _difference_matrices(nx, hx, space.periodic)
    d1y, d2y = _difference_matrices(ny, hy, space.periodic)
    ix = sparse.identity(nx, format="csr")
    iy = sparse.identity(ny, format="csr")
    dx = sparse.kron(iy, d1x, format="csr")
    dy = sparse.kron(d1y, ix, format="csr")
    lap = (sparse.kron(iy, d2x) + sparse.kron(d2y, ix)).tocsr()
    return dx, dy, lap


def _advdiff_2d(options: ModelOptions) -> ModelSystem:
    periodic = options.boundary == "periodic"
    if periodic:
        x = np.arange(options.nx) / options.nx
        y = np.arange(options.ny) / options.ny
    else:
        x = np.arange(1, options.nx + 1) / (options.nx + 1)
        y = np.arange(1, options.ny + 1) / (options.ny + 1)
    space = SpatialGrid2D(x=x, y=y, periodic=periodic)
    dx, dy, lap = advdiff_operators(space)
    n = options.nx * options.ny
    eye = sparse.identity(n, format="csr")
    h = options.map_dt

    # forward Euler folded into the map: M(x) = x + h (-cx Dx - cy Dy + nu L) x
    def rhs(u, alpha):
        cx, cy, nu = alpha
        return u + h * (-cx * (dx @ u) - cy * (dy @ u) + nu * (lap @ u))

    def jac_state(u, alpha):
        cx, cy, nu = alpha
        return (eye + h * (-cx * dx - cy * dy + nu * lap)).tocsr()

    def jac_param(u, alpha):
        return h * np.column_stack([-(dx @ u), -(dy @ u), lap @ u])

    return ModelSystem(
        name="advdiff_2d",
        state_dim=n,
        param_dim=3,
        rhs=rhs,
        jac_state=jac_state,
        jac_param=jac_param,
        kind=ModelKind.DISCRETE_MAP,
        default_parameters=np.array([options.cx, options.cy, options.nu]),
        dt=h,
        linear=True,
        space=space,
    )


_BUILDERS: Dict[str, Callable[[ModelOptions], ModelSystem]] = {
    "linear_decay": _linear_decay,
    "quadratic_decay": _quadratic_decay,
    "burgers_1d": _burgers_1d,
    "advdiff_2d": _advdiff_2d,
}

BUILTIN_MODELS = tuple(_BUILDERS)


def builtin_model(
    name: str,
    options: Union[ModelOptions, Mapping, None] = None,
    **overrides,
) -> ModelSystem:
    """
    Construct one of the built-in models.

    Args:
        name: One of linear_decay, quadratic_decay, burgers_1d, advdiff_2d
        options: ModelOptions or a mapping of option values
        **overrides: Individual option overrides

    Returns:
        ModelSystem with analytically coded Jacobians

    Raises:
        ModelError: for an unknown name or invalid (e.g. non-positive) options
    """
    builder = _BUILDERS.get(name)
    if builder is None:
        raise ModelError(f"unknown model '{name}', expected one of {', '.join(BUILTIN_MODELS)}")

    if isinstance(options, ModelOptions):
        values = options.model_dump()
    else:
        values = dict(options or {})
    values.update(overrides)
    try:
        opts = ModelOptions.model_validate(values)
    except ValidationError as e:
        raise ModelError(f"invalid options for {name}: {e}") from e

    model = builder(opts)
    logger.debug("built %s: n=%d, p=%d, kind=%s", name, model.state_dim, model.param_dim, model.kind.value)
    return model


def one_step_matrix(model: ModelSystem, control: ControlVector) -> Matrix:
    """
    Constant one-step matrix of a linear discrete map.

    Raises:
        ModelError: if the model is not a linear discrete map
    """
    if model.kind is not ModelKind.DISCRETE_MAP or not model.linear:
        raise ModelError(f"{model.name} is not a linear discrete map")
    return model.jac_state(control.initial_state, control.parameters)


def gaussian_field_ic(
    center: Tuple[float, float], width: float, space: SpatialGrid2D
) -> np.ndarray:
    """
    Gaussian blob exp(-((x - x0)^2 + (y - y0)^2) / width) sampled at the nodes.

    Args:
        center: (x0, y0) inside the unit square
        width: Positive width; plays the role of nu in the exponent
        space: 2D spatial grid

    Returns:
        Flattened state vector
    """
    if width <= 0:
        raise ModelError(f"Gaussian width must be positive, got {width}")
    x0, y0 = center
    if not (0.0 <= x0 <= 1.0 and 0.0 <= y0 <= 1.0):
        raise ModelError(f"Gaussian center {center} lies outside the unit square")
    X, Y = space.mesh()
    return np.exp(-((X - x0) ** 2 + (Y - y0) ** 2) / width)


def burgers_shock_ic(space: SpatialGrid1D, re: float) -> np.ndarray:
    """Shock profile u(x, 0) = x / (1 + exp(Re/16 (4x^2 - 1)))."""
    x = space.nodes
    return x * expit(-(re / 16.0) * (4.0 * x**2 - 1.0))


def sine_ic(space: SpatialGrid1D) -> np.ndarray:
    """Sinusoidal profile sin(2 pi x / L)."""
    return np.sin(2.0 * np.pi * space.nodes / space.length)
