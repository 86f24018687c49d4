"""
Declarative twin-experiment configuration and the shipped presets.

An ExperimentConfig is plain JSON: model, truth and guess controls, grid,
placement, observation noise, estimator and output toggles.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    model_validator,
)

from fsm_placer.dynamics import (
    ControlSelection,
    ControlVector,
    ModelOptions,
    ModelSystem,
    SpatialGrid1D,
    SpatialGrid2D,
    TimeGrid,
    builtin_model,
    burgers_shock_ic,
    gaussian_field_ic,
    sine_ic,
)
from fsm_placer.errors import ConfigError, FsmPlacerError
from fsm_placer.observe import (
    ObservationOperator,
    PlacementConstraints,
    identity_operator,
    pointwise_operator,
)

logger = logging.getLogger(__name__)

# scalar models integrate with this step unless the config says otherwise
DEFAULT_DT = 1e-3


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["linear_decay", "quadratic_decay", "burgers_1d", "advdiff_2d"]
    options: ModelOptions = Field(default_factory=ModelOptions)


class FieldSpec(BaseModel):
    """
    Initial state: explicit values, a Gaussian blob, the Burgers shock
    profile or a sine wave.
    """

    model_config = ConfigDict(extra="forbid")

    kind: Literal["values", "gaussian", "burgers_shock", "sine"] = "values"
    values: Optional[List[float]] = None
    center: Optional[Tuple[float, float]] = None
    width: Optional[PositiveFloat] = None

    @model_validator(mode="after")
    def check_kind(self) -> "FieldSpec":
        if self.kind == "values" and not self.values:
            raise ValueError("kind 'values' needs a non-empty values list")
        if self.kind == "gaussian" and self.center is None:
            raise ValueError("kind 'gaussian' needs a center")
        return self


class ControlSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    initial_state: FieldSpec
    # None means the model's default parameters
    parameters: Optional[List[float]] = None


class PlacementSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    auto: bool = True
    count: PositiveInt = 2
    min_time: NonNegativeFloat = 0.0
    min_separation: NonNegativeFloat = 0.0
    times: Optional[List[float]] = None
    reference: Literal["truth", "guess"] = "truth"

    @model_validator(mode="after")
    def check_times(self) -> "PlacementSpec":
        if not self.auto and not self.times:
            raise ValueError("explicit placement (auto = false) needs times")
        return self

    @property
    def constraints(self) -> PlacementConstraints:
        return PlacementConstraints(min_time=self.min_time, min_separation=self.min_separation)


class ObservationSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    operator: Literal["identity", "pointwise"] = "identity"
    indices: Optional[List[int]] = None

    @model_validator(mode="after")
    def check_indices(self) -> "ObservationSpec":
        if self.operator == "pointwise" and not self.indices:
            raise ValueError("pointwise observations need indices")
        return self


class EstimatorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["newton", "linear_closed_form", "gauss_newton_tsvd"] = "newton"
    tol: PositiveFloat = 1e-8
    max_iter: PositiveInt = 100
    tsvd_threshold: PositiveFloat = 1e-3
    selection: ControlSelection = ControlSelection.FULL


class SweepSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resolution: PositiveInt = 100
    t1_axis: Optional[List[float]] = None
    t2_axis: Optional[List[float]] = None


class OutputSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trajectory: bool = True
    sensitivities: bool = True
    forecast: bool = True
    cost_surface: bool = True
    sensitivity_stride: PositiveInt = 1
    cost_surface_resolution: PositiveInt = 41
    format: Literal["csv", "json"] = "csv"


class ExperimentConfig(BaseModel):
    """A complete twin experiment."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    model: ModelSpec
    truth: ControlSpec
    guess: ControlSpec
    horizon: PositiveFloat
    dt: Optional[PositiveFloat] = None
    placement: PlacementSpec = Field(default_factory=PlacementSpec)
    observation: ObservationSpec = Field(default_factory=ObservationSpec)
    noise_pct: NonNegativeFloat = 0.0
    noise_sweep: Optional[List[NonNegativeFloat]] = None
    seeds: List[int] = Field(default_factory=lambda: [0])
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    compare_times: List[List[float]] = Field(default_factory=list)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    outputs: OutputSpec = Field(default_factory=OutputSpec)

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentConfig":
        plans = list(self.compare_times)
        if self.placement.times:
            plans.append(self.placement.times)
        for times in plans:
            if not times:
                raise ValueError("observation time lists must not be empty")
            outside = [t for t in times if t < 0 or t > self.horizon]
            if outside:
                raise ValueError(f"observation times {outside} lie outside [0, {self.horizon}]")
        if any(level > 0 for level in self.noise_levels) and not self.seeds:
            raise ValueError("noisy experiments need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.estimator.method == "linear_closed_form":
            if self.model.name != "advdiff_2d":
                raise ValueError("linear_closed_form needs a linear discrete-map model (advdiff_2d)")
            if self.estimator.selection is not ControlSelection.INITIAL_STATE:
                raise ValueError("linear_closed_form estimates the initial state only")
        return self

    @property
    def noise_levels(self) -> List[float]:
        return list(self.noise_sweep) if self.noise_sweep else [self.noise_pct]

    def step_size(self) -> float:
        if self.dt is not None:
            return self.dt
        if self.model.name == "advdiff_2d":
            return self.model.options.map_dt
        return DEFAULT_DT

    def time_grid(self) -> TimeGrid:
        try:
            return TimeGrid.from_horizon(self.horizon, self.step_size())
        except FsmPlacerError as e:
            raise ConfigError(str(e)) from e

    def build_model(self) -> ModelSystem:
        return builtin_model(self.model.name, self.model.options)

    def build_operator(self, model: ModelSystem) -> ObservationOperator:
        if self.observation.operator == "pointwise":
            return pointwise_operator(model.state_dim, self.observation.indices)
        return identity_operator(model.state_dim)

    def realize(self, spec: ControlSpec, model: ModelSystem) -> ControlVector:
        """Turn a control description into a ControlVector for `model`."""
        state = realize_field(spec.initial_state, model, self.model.options)
        parameters = model.default_parameters if spec.parameters is None else np.array(spec.parameters)
        if state.size != model.state_dim or parameters.size != model.param_dim:
            raise ConfigError(
                f"{model.name} expects {model.state_dim} state values and {model.param_dim} parameters, "
                f"got {state.size} and {parameters.size}"
            )
        return ControlVector(state, parameters)

    def truth_control(self, model: ModelSystem) -> ControlVector:
        return self.realize(self.truth, model)

    def guess_control(self, model: ModelSystem) -> ControlVector:
        return self.realize(self.guess, model)


def realize_field(spec: FieldSpec, model: ModelSystem, options: ModelOptions) -> np.ndarray:
    if spec.kind == "values":
        return np.array(spec.values, dtype=float)
    space = model.space
    if spec.kind == "gaussian":
        if not isinstance(space, SpatialGrid2D):
            raise ConfigError(f"a Gaussian field needs a 2D model, {model.name} is not one")
        return gaussian_field_ic(spec.center, spec.width or options.nu, space)
    if not isinstance(space, SpatialGrid1D):
        raise ConfigError(f"a '{spec.kind}' profile needs a 1D model, {model.name} is not one")
    if spec.kind == "burgers_shock":
        return burgers_shock_ic(space, options.re)
    return sine_ic(space)


def load_config(path: Path) -> ExperimentConfig:
    """
    Read and validate a JSON experiment file.

    Raises:
        ConfigError: if the file is missing or does not validate
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e


def _linear_decay() -> ExperimentConfig:
    return ExperimentConfig(
        name="linear-decay",
        model=ModelSpec(name="linear_decay"),
        truth=ControlSpec(initial_state=FieldSpec(values=[2.0]), parameters=[-1.0]),
        guess=ControlSpec(initial_state=FieldSpec(values=[1.8]), parameters=[-0.8]),
        horizon=2.0,
        placement=PlacementSpec(auto=True, count=2, min_time=0.1),
        noise_pct=10.0,
        seeds=list(range(10)),
        estimator=EstimatorSpec(method="newton"),
        sweep=SweepSpec(resolution=100),
    )


def _quadratic_decay() -> ExperimentConfig:
    return ExperimentConfig(
        name="quadratic-decay",
        model=ModelSpec(name="quadratic_decay"),
        truth=ControlSpec(initial_state=FieldSpec(values=[2.0]), parameters=[-1.0]),
        guess=ControlSpec(initial_state=FieldSpec(values=[1.75]), parameters=[-0.75]),
        horizon=2.0,
        placement=PlacementSpec(auto=True, count=2, min_time=0.1),
        noise_pct=10.0,
        seeds=list(range(10)),
        estimator=EstimatorSpec(method="newton"),
        sweep=SweepSpec(resolution=100),
    )


def _burgers() -> ExperimentConfig:
    return ExperimentConfig(
        name="burgers",
        model=ModelSpec(name="burgers_1d", options=ModelOptions(n=128, re=500.0)),
        truth=ControlSpec(initial_state=FieldSpec(kind="burgers_shock")),
        guess=ControlSpec(initial_state=FieldSpec(kind="sine")),
        horizon=1.0,
        placement=PlacementSpec(auto=False, times=[0.01, 0.05], reference="guess"),
        noise_pct=10.0,
        noise_sweep=[1.0, 5.0, 10.0],
        seeds=[0],
        estimator=EstimatorSpec(
            method="gauss_newton_tsvd",
            selection=ControlSelection.INITIAL_STATE,
            max_iter=30,
            tol=1e-8,
        ),
        compare_times=[[0.01, 0.35], [0.25, 0.5], [0.5, 1.0]],
        outputs=OutputSpec(cost_surface=False, sensitivity_stride=10),
    )


def _advdiff() -> ExperimentConfig:
    return ExperimentConfig(
        name="advdiff",
        model=ModelSpec(
            name="advdiff_2d",
            options=ModelOptions(nx=32, ny=32, cx=0.5, cy=0.5, nu=0.01, map_dt=0.005),
        ),
        truth=ControlSpec(initial_state=FieldSpec(kind="gaussian", center=(0.25, 0.25), width=0.01)),
        guess=ControlSpec(initial_state=FieldSpec(kind="gaussian", center=(0.5, 0.5), width=0.01)),
        horizon=1.0,
        placement=PlacementSpec(auto=False, times=[0.01, 0.05]),
        noise_pct=10.0,
        seeds=[0],
        estimator=EstimatorSpec(
            method="linear_closed_form",
            selection=ControlSelection.INITIAL_STATE,
            tsvd_threshold=1e-3,
        ),
        compare_times=[[0.1, 0.2], [0.5, 1.0]],
        outputs=OutputSpec(cost_surface=False, sensitivity_stride=20),
    )


PRESETS: Dict[str, Callable[[], ExperimentConfig]] = {
    "linear-decay": _linear_decay,
    "quadratic-decay": _quadratic_decay,
    "burgers": _burgers,
    "advdiff": _advdiff,
}


def preset(name: str) -> ExperimentConfig:
    """
    A fully populated configuration for one of the shipped experiments.

    Raises:
        ConfigError: for an unknown preset name
    """
    factory = PRESETS.get(name)
    if factory is None:
        raise ConfigError(f"unknown preset '{name}', expected one of {', '.join(PRESETS)}")
    return factory()


def with_overrides(
    config: ExperimentConfig,
    seeds: Optional[List[int]] = None,
    noise_pct: Optional[float] = None,
    times: Optional[List[float]] = None,
    fmt: Optional[str] = None,
) -> ExperimentConfig:
    """
    Copy of the config with command-line overrides applied and revalidated.
    A noise override replaces any noise sweep; a times override makes placement explicit.
    """
    data = config.model_dump(mode="json")
    if seeds is not None:
        data["seeds"] = list(seeds)
    if noise_pct is not None:
        data["noise_pct"] = noise_pct
        data["noise_sweep"] = None
    if times is not None:
        data["placement"] = {**data["placement"], "auto": False, "times": list(times)}
    if fmt is not None:
        data["outputs"] = {**data["outputs"], "format": fmt}
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid override: {e}") from e
