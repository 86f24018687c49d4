"""
Experiment runner.
Executes a twin experiment end to end (integrate, propagate, place, synthesize,
assimilate) or a (t1, t2) sweep, and writes the CSV/JSON artifacts.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from fsm_placer.assimilate import (
    EstimateResult,
    cost_surface,
    estimate_gauss_newton_tsvd,
    estimate_linear_closed_form,
    estimate_newton,
)
from fsm_placer.config import settings
from fsm_placer.dynamics import (
    ControlSelection,
    ControlVector,
    ModelSystem,
    TimeGrid,
    Trajectory,
    integrate,
    one_step_matrix,
)
from fsm_placer.errors import ConfigError, EstimationFailedError, NumericalError, SingularGramianError
from fsm_placer.experiment import ExperimentConfig
from fsm_placer.metasens import SWEEP_FIELDS, default_axis, sweep
from fsm_placer.observe import (
    ObservationOperator,
    ObservationSet,
    PlacementPlan,
    explicit_plan,
    plan_placement,
    synthesize_observations,
)
from fsm_placer.sensitivity import SensitivityTrajectory, invariants, propagate

logger = logging.getLogger(__name__)

# largest control whose estimate is copied into summary.json
SUMMARY_CONTROL_LIMIT = 8


class SeedOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int
    converged: bool = False
    iterations: int = 0
    analysis_error: Optional[float] = None
    background_error: float
    estimate: Optional[List[float]] = None
    control_error: Optional[List[float]] = None
    failure: Optional[str] = None


class ScenarioSummary(BaseModel):
    label: str
    times: List[float]
    noise_pct: float
    gramian_det: Optional[float]
    gramian_logdet: Optional[float]
    background_error: float
    converged_fraction: float
    analysis_error_mean: Optional[float] = None
    analysis_error_std: Optional[float] = None
    analysis_error_q05: Optional[float] = None
    analysis_error_q50: Optional[float] = None
    analysis_error_q95: Optional[float] = None
    estimate_mean: Optional[List[float]] = None
    estimate_std: Optional[List[float]] = None
    seeds: List[SeedOutcome]


class RunArtifacts(BaseModel):
    """Files written by a run and the summary that was saved with them."""

    out_dir: Path
    files: List[Path]
    summary: Dict[str, Any]


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_table(stem: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], fmt: str = "csv") -> Path:
    """
    Write rows as CSV (header row, 17 significant digits) or as a JSON list of objects.

    Args:
        stem: Target path without suffix
        header: Column names
        rows: Row values in header order
        fmt: "csv" or "json"

    Returns:
        Path of the written file
    """
    stem.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        records = [dict(zip(header, row)) for row in rows]
        return write_json(stem.with_suffix(".json"), records)
    path = stem.with_suffix(".csv")
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def _relative_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    scale = float(np.linalg.norm(truth))
    error = float(np.linalg.norm(estimate - truth))
    return error / scale if scale > 0 else error


def _trajectory_errors(states: np.ndarray, truth: np.ndarray) -> np.ndarray:
    scale = np.linalg.norm(truth, axis=1)
    error = np.linalg.norm(states - truth, axis=1)
    return np.where(scale > 0, error / np.where(scale > 0, scale, 1.0), error)


def _estimate(
    config: ExperimentConfig,
    model: ModelSystem,
    guess: ControlVector,
    obs: ObservationSet,
    grid: TimeGrid,
) -> EstimateResult:
    spec = config.estimator
    if spec.method == "newton":
        return estimate_newton(model, guess, obs, grid, spec.tol, spec.max_iter, spec.selection)
    if spec.method == "gauss_newton_tsvd":
        return estimate_gauss_newton_tsvd(
            model, guess, obs, grid, spec.tsvd_threshold, spec.tol, spec.max_iter, spec.selection
        )
    return estimate_linear_closed_form(
        one_step_matrix(model, guess), obs.operator, obs, grid, spec.tsvd_threshold, guess.parameters
    )


def _reference_sensitivities(
    config: ExperimentConfig, model: ModelSystem, reference: Trajectory
) -> SensitivityTrajectory:
    # full traces for scalar models, strided invariants for field models
    if model.state_dim == 1:
        return propagate(model, reference)
    return propagate(model, reference, keep=[0], invariant_stride=config.outputs.sensitivity_stride)


def _plan(
    config: ExperimentConfig,
    model: ModelSystem,
    operator: ObservationOperator,
    reference: Trajectory,
    sens: SensitivityTrajectory,
    times: Optional[Sequence[float]] = None,
) -> PlacementPlan:
    selection = config.estimator.selection
    placement = config.placement
    if times is None and placement.auto:
        return plan_placement(
            sens, reference, operator, placement.count, placement.constraints, selection, model=model
        )
    return explicit_plan(
        sens, reference, operator, times if times is not None else placement.times, selection, model=model
    )


class _Pipeline:
    """State shared by the scenarios of one run."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, workers: Optional[int]):
        self.config = config
        self.out_dir = out_dir
        self.workers = workers or settings.max_workers
        self.fmt = config.outputs.format
        self.grid = config.time_grid()
        self.model = config.build_model()
        self.truth = config.truth_control(self.model)
        self.guess = config.guess_control(self.model)
        self.operator = config.build_operator(self.model)
        self.selection = config.estimator.selection
        self.files: List[Path] = []

        logger.info("integrating %s over %d steps", self.model.name, self.grid.steps)
        self.truth_trajectory = integrate(self.model, self.truth, self.grid)
        self.background_trajectory = integrate(self.model, self.guess, self.grid)
        self.reference = (
            self.truth_trajectory if config.placement.reference == "truth" else self.background_trajectory
        )
        self.background_error = _relative_error(self.guess.initial_state, self.truth.initial_state)

    def run_seed(
        self, seed: int, plan: PlacementPlan, noise_pct: float, seed_dir: Path
    ) -> Tuple[SeedOutcome, Optional[ObservationSet], List[Path]]:
        files = []
        obs = synthesize_observations(
            self.model, self.truth, self.operator, plan.times, noise_pct, seed, self.grid, self.truth_trajectory
        )
        files.append(write_json(seed_dir / "observations.json", obs.to_record().model_dump(mode="json")))
        try:
            result = _estimate(self.config, self.model, self.guess, obs, self.grid)
        except NumericalError as e:
            logger.warning("seed %d failed: %s", seed, e)
            return (
                SeedOutcome(seed=seed, background_error=self.background_error, failure=str(e)),
                obs,
                files,
            )

        analysis_error = _relative_error(result.control.initial_state, self.truth.initial_state)
        full = result.control.as_array()
        small = full.size <= SUMMARY_CONTROL_LIMIT
        outcome = SeedOutcome(
            seed=seed,
            converged=result.converged,
            iterations=result.iterations,
            analysis_error=analysis_error,
            background_error=self.background_error,
            estimate=full.tolist() if small else None,
            control_error=(full - self.truth.as_array()).tolist() if small else None,
        )
        record = result.to_record().model_dump(mode="python")
        record.update(seed=seed, analysis_error=analysis_error, background_error=self.background_error)
        files.append(write_json(seed_dir / "estimate.json", record))

        if self.config.outputs.forecast:
            try:
                analysis = integrate(self.model, result.control, self.grid)
            except NumericalError as e:
                logger.warning("analysis forecast for seed %d failed: %s", seed, e)
            else:
                rows = zip(
                    self.grid.times,
                    _trajectory_errors(self.background_trajectory.states, self.truth_trajectory.states),
                    _trajectory_errors(analysis.states, self.truth_trajectory.states),
                )
                files.append(
                    write_table(seed_dir / "forecast", ("t", "background_error", "analysis_error"), rows, self.fmt)
                )
        logger.info(
            "seed %d: analysis error %.4g (background %.4g), converged=%s",
            seed,
            analysis_error,
            self.background_error,
            result.converged,
        )
        return outcome, obs, files

    def run_scenario(
        self, label: str, plan: PlacementPlan, noise_pct: float, scenario_dir: Path
    ) -> Tuple[ScenarioSummary, Optional[ObservationSet]]:
        seeds = self.config.seeds if noise_pct > 0 else self.config.seeds[:1] or [0]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            results = list(
                executor.map(lambda s: self.run_seed(s, plan, noise_pct, scenario_dir / f"seed_{s}"), seeds)
            )
        outcomes = [r[0] for r in results]
        for _, _, files in results:
            self.files.extend(files)

        ok = [o for o in outcomes if o.failure is None]
        summary = ScenarioSummary(
            label=label,
            times=list(plan.times),
            noise_pct=noise_pct,
            gramian_det=plan.gramian_det,
            gramian_logdet=plan.gramian_logdet,
            background_error=self.background_error,
            converged_fraction=sum(o.converged for o in outcomes) / len(outcomes),
            seeds=outcomes,
        )
        if ok:
            errors = np.array([o.analysis_error for o in ok])
            q05, q50, q95 = np.quantile(errors, [0.05, 0.5, 0.95])
            update = dict(
                analysis_error_mean=float(errors.mean()),
                analysis_error_std=float(errors.std()),
                analysis_error_q05=float(q05),
                analysis_error_q50=float(q50),
                analysis_error_q95=float(q95),
            )
            if ok[0].estimate is not None:
                estimates = np.array([o.estimate for o in ok])
                update.update(estimate_mean=estimates.mean(axis=0).tolist(), estimate_std=estimates.std(axis=0).tolist())
            summary = summary.model_copy(update=update)
        first_obs = results[0][1]
        return summary, first_obs


def run(config: ExperimentConfig, out_dir: Path, workers: Optional[int] = None) -> RunArtifacts:
    """
    Execute the twin experiment once per seed, noise level and placement scenario.

    Writes trajectory, sensitivities, placement.json, per-seed observations.json,
    estimate.json and forecast tables, cost_surface for scalar models and summary.json.

    Raises:
        ConfigError, PlacementError, ModelError, OffGridError, DimensionError: invalid setup
        EstimationFailedError: if a scenario failed on every seed
    """
    out_dir = Path(out_dir)
    pipe = _Pipeline(config, out_dir, workers)
    outputs = config.outputs

    sens = _reference_sensitivities(config, pipe.model, pipe.reference)
    plan = _plan(config, pipe.model, pipe.operator, pipe.reference, sens)
    pipe.files.append(write_json(out_dir / "placement.json", plan.to_record().model_dump(mode="python")))
    compare_plans = [
        _plan(config, pipe.model, pipe.operator, pipe.reference, sens, times) for times in config.compare_times
    ]

    if outputs.trajectory:
        header = ["t"] + [f"x{j}" for j in range(pipe.model.state_dim)]
        rows = (
            [t, *state] for t, state in zip(pipe.grid.times, pipe.truth_trajectory.states)
        )
        pipe.files.append(write_table(out_dir / "trajectory", header, rows, pipe.fmt))
    if outputs.sensitivities:
        pipe.files.append(_write_sensitivities(out_dir / "sensitivities", sens, outputs.sensitivity_stride, pipe.fmt))

    scenarios: List[ScenarioSummary] = []
    levels = config.noise_levels
    first_obs = None
    for level in levels:
        level_dir = out_dir / f"noise_{level:g}" if len(levels) > 1 else out_dir
        logger.info("running noise level %g%% with %d placement scenarios", level, 1 + len(compare_plans))
        summary, obs = pipe.run_scenario("primary", plan, level, level_dir)
        scenarios.append(summary)
        if first_obs is None:
            first_obs = obs
        for i, alt in enumerate(compare_plans, start=1):
            summary, _ = pipe.run_scenario(f"compare_{i}", alt, level, level_dir / f"compare_{i}")
            scenarios.append(summary)

    scalar = pipe.model.state_dim == 1 and pipe.model.param_dim == 1
    if outputs.cost_surface and scalar and first_obs is not None:
        pipe.files.append(_write_cost_surface(out_dir / "cost_surface", pipe, first_obs))

    summary = {
        "name": config.name,
        "model": pipe.model.name,
        "estimator": config.estimator.method,
        "selection": config.estimator.selection.value,
        "placement": plan.to_record().model_dump(mode="python"),
        "scenarios": [s.model_dump(mode="python") for s in scenarios],
    }
    pipe.files.append(write_json(out_dir / "summary.json", summary))

    failed = [s.label for s in scenarios if all(o.failure is not None for o in s.seeds)]
    if failed:
        raise EstimationFailedError(f"estimation failed on every seed for {', '.join(failed)}")
    logger.info("run '%s' wrote %d files to %s", config.name, len(pipe.files), out_dir)
    return RunArtifacts(out_dir=out_dir, files=pipe.files, summary=_clean(summary))


def _write_sensitivities(stem: Path, sens: SensitivityTrajectory, stride: int, fmt: str) -> Path:
    if sens.state_dim == 1:
        header = ["t", "u"] + [f"v{j}" for j in range(sens.param_dim)]
        picks = range(0, sens.steps.size, stride)
        rows = ([sens.times[j], sens.u[j, 0, 0], *sens.v[j, 0, :]] for j in picks)
        return write_table(stem, header, rows, fmt)
    inv = invariants(sens)
    rows = zip(inv.times, inv.I1, inv.I2)
    return write_table(stem, ("t", "I1", "I2"), rows, fmt)


def _write_cost_surface(stem: Path, pipe: _Pipeline, obs: ObservationSet) -> Path:
    resolution = pipe.config.outputs.cost_surface_resolution
    x0 = float(pipe.truth.initial_state[0])
    alpha = float(pipe.truth.parameters[0])
    x_axis = np.linspace(x0 - 0.5 * abs(x0), x0 + 0.5 * abs(x0), resolution)
    a_axis = np.linspace(alpha - 0.5 * abs(alpha), alpha + 0.5 * abs(alpha), resolution)
    surface = cost_surface(pipe.model, obs, pipe.grid, x_axis, a_axis)
    return write_table(stem, ("x0", "alpha", "cost"), surface.rows(), pipe.fmt)


def sweep_cmd(
    config: ExperimentConfig,
    out_dir: Path,
    t1_axis: Optional[Sequence[float]] = None,
    t2_axis: Optional[Sequence[float]] = None,
    workers: Optional[int] = None,
) -> RunArtifacts:
    """
    Sweep the estimate sensitivities over (t1, t2) and write sweep.csv and sweep_summary.json.

    Raises:
        ConfigError: if the model is not scalar with a two-component control
    """
    model = config.build_model()
    if model.state_dim != 1 or model.param_dim != 1 or config.estimator.selection is not ControlSelection.FULL:
        raise ConfigError("sweeps need a scalar model with a two-component control (x0, alpha)")
    out_dir = Path(out_dir)
    grid = config.time_grid()
    truth = config.truth_control(model)
    operator = config.build_operator(model)

    t1 = np.asarray(t1_axis if t1_axis is not None else config.sweep.t1_axis or default_axis(grid, config.sweep.resolution))
    t2 = np.asarray(t2_axis if t2_axis is not None else config.sweep.t2_axis or default_axis(grid, config.sweep.resolution))
    result = sweep(model, truth, operator, t1, t2, grid, workers=workers)

    files = [
        write_table(
            out_dir / "sweep",
            ("t1", "t2", *SWEEP_FIELDS, "singular_flag"),
            result.rows(),
            config.outputs.format,
        )
    ]

    reference = integrate(model, truth, grid)
    plan = _plan(config, model, operator, reference, propagate(model, reference))
    planned = list(plan.times)

    def locate(finder, name, **where):
        try:
            return list(finder(name, **where))
        except SingularGramianError:
            return None

    fields = {}
    for name in SWEEP_FIELDS:
        finder = result.argmax if name == "detG" else result.argmin
        entry = {"global": locate(finder, name)}
        if len(planned) >= 2:
            entry["row"] = locate(finder, name, row=planned[0])
            entry["column"] = locate(finder, name, col=planned[1])
        fields[name] = entry

    summary = {
        "name": config.name,
        "model": model.name,
        "planned_times": planned,
        "shape": [int(t1.size), int(t2.size)],
        "singular_cells": int(result.singular.sum()),
        "fields": fields,
    }
    files.append(write_json(out_dir / "sweep_summary.json", summary))
    logger.info("sweep '%s' wrote %s", config.name, ", ".join(str(f) for f in files))
    return RunArtifacts(out_dir=out_dir, files=files, summary=_clean(summary))
