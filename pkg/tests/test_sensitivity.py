import numpy as np
import pytest

from fsm_placer.dynamics import (
    ControlSelection,
    ControlVector,
    TimeGrid,
    builtin_model,
    integrate,
    sine_ic,
)
from fsm_placer.errors import DimensionError, OffGridError, PlacementError
from fsm_placer.sensitivity import (
    argmax_squared_sensitivity,
    invariants,
    propagate,
    squared_series,
)


def test_linear_decay_sensitivities_match_closed_form(linear_run, grid):
    _, sens = linear_run
    t = grid.times
    np.testing.assert_allclose(sens.u[:, 0, 0], np.exp(-t), rtol=1e-6)
    np.testing.assert_allclose(sens.v[:, 0, 0], 2.0 * t * np.exp(-t), rtol=1e-6, atol=1e-12)
    u, v = sens.at_time(1.0)
    assert u[0, 0] == pytest.approx(0.36788, rel=1e-4)
    assert v[0, 0] == pytest.approx(0.73576, rel=1e-4)


def test_quadratic_decay_sensitivities_match_closed_form(quadratic_run, grid):
    _, sens = quadratic_run
    t = grid.times
    s = 1.0 + 2.0 * t
    np.testing.assert_allclose(sens.u[:, 0, 0], 1.0 / s**2, rtol=1e-6)
    np.testing.assert_allclose(sens.v[:, 0, 0], 4.0 * t / s**2, rtol=1e-6, atol=1e-12)
    u, v = sens.at_time(0.5)
    assert u[0, 0] == pytest.approx(0.25, rel=1e-8)
    assert v[0, 0] == pytest.approx(0.5, rel=1e-8)


def test_initial_sensitivities(linear_run):
    _, sens = linear_run
    np.testing.assert_array_equal(sens.u[0], [[1.0]])
    np.testing.assert_array_equal(sens.v[0], [[0.0]])


def _perturbed_final_state(model, control, grid, du0, dalpha):
    shifted = ControlVector(control.initial_state + du0, control.parameters + dalpha)
    return integrate(model, shifted, grid).states[-1]


@pytest.mark.parametrize("name,options", [
    ("burgers_1d", {"n": 16, "re": 50.0}),
    ("advdiff_2d", {"nx": 5, "ny": 5}),
])
def test_pde_sensitivities_match_finite_differences(name, options, rng):
    model = builtin_model(name, options)
    n, p = model.state_dim, model.param_dim
    dt = 1e-3 if name == "burgers_1d" else model.dt
    grid = TimeGrid(dt=dt, steps=40)
    control = ControlVector(0.5 * rng.standard_normal(n), model.default_parameters)
    sens = propagate(model, integrate(model, control, grid), keep=[grid.steps])

    d0 = rng.standard_normal(n)
    da = rng.standard_normal(p) * model.default_parameters * 0.1
    eps = 1e-6
    fd = (
        _perturbed_final_state(model, control, grid, eps * d0, eps * da)
        - _perturbed_final_state(model, control, grid, -eps * d0, -eps * da)
    ) / (2 * eps)
    u, v = sens.at_step(grid.steps)
    np.testing.assert_allclose(u @ d0 + v @ da, fd, rtol=1e-5, atol=1e-7)


def test_keep_retains_requested_steps(linear_model, truth, grid):
    trajectory = integrate(linear_model, truth, grid)
    sens = propagate(linear_model, trajectory, keep=[1000, 100, 100])
    assert sens.steps.tolist() == [100, 1000]
    assert sens.u.shape == (2, 1, 1)
    assert sens.at_step(1000)[0][0, 0] == pytest.approx(np.exp(-1.0), rel=1e-8)
    with pytest.raises(OffGridError):
        sens.at_step(500)
    with pytest.raises(OffGridError):
        propagate(linear_model, trajectory, keep=[5000])


def test_columns_follow_selection(linear_run):
    _, sens = linear_run
    assert sens.columns(1000).shape == (1, 2)
    assert sens.columns(1000, ControlSelection.PARAMETERS)[0, 0] == pytest.approx(2 * np.exp(-1.0), rel=1e-8)


def test_trajectory_dimensions_are_checked(linear_model, truth, grid):
    burgers = builtin_model("burgers_1d", n=8)
    trajectory = integrate(linear_model, truth, grid)
    with pytest.raises(DimensionError):
        propagate(burgers, trajectory)


def test_scalar_invariants(linear_run):
    _, sens = linear_run
    inv = invariants(sens)
    np.testing.assert_allclose(inv.I1, sens.u[:, 0, 0] ** 2)
    np.testing.assert_allclose(inv.I2, 0.0, atol=1e-15)


def test_tracked_invariants_cover_the_whole_grid(rng):
    model = builtin_model("advdiff_2d", nx=4, ny=4)
    grid = TimeGrid(dt=model.dt, steps=30)
    trajectory = integrate(model, ControlVector(rng.standard_normal(16), model.default_parameters), grid)
    sens = propagate(model, trajectory, keep=[0], invariant_stride=5)
    inv = invariants(sens)
    assert inv.steps.tolist() == [0, 5, 10, 15, 20, 25, 30]
    # u(0) = I
    assert inv.I1[0] == pytest.approx(16.0)
    assert inv.I2[0] == pytest.approx(0.5 * (16.0**2 - 16.0))

    full = propagate(model, trajectory, keep=[25])
    u = full.u[0]
    assert inv.I1[5] == pytest.approx(np.trace(u.T @ u), rel=1e-12)
    with pytest.raises(DimensionError):
        propagate(model, trajectory, invariant_stride=0)


def test_argmax_squared_sensitivity(linear_run, quadratic_run, grid):
    _, lin = linear_run
    _, quad = quadratic_run
    assert grid.time_at(argmax_squared_sensitivity(lin, ControlSelection.PARAMETERS)) == pytest.approx(1.0)
    assert grid.time_at(argmax_squared_sensitivity(quad, ControlSelection.PARAMETERS)) == pytest.approx(0.5)
    assert argmax_squared_sensitivity(lin, ControlSelection.INITIAL_STATE) == 0
    windowed = argmax_squared_sensitivity(lin, ControlSelection.INITIAL_STATE, window=(0.1, 2.0))
    assert grid.time_at(windowed) == pytest.approx(0.1)


def test_argmax_errors(linear_run):
    _, sens = linear_run
    with pytest.raises(PlacementError):
        argmax_squared_sensitivity(sens, ControlSelection.PARAMETERS, window=(3.0, 4.0))
    with pytest.raises(PlacementError):
        squared_series(sens, ControlSelection.FULL)
    with pytest.raises(DimensionError):
        squared_series(sens, ControlSelection.PARAMETERS, index=1)


@pytest.mark.slow
def test_burgers_invariant_bump_along_background():
    model = builtin_model("burgers_1d", n=128, re=500.0)
    background = ControlVector(sine_ic(model.space), model.default_parameters)
    grid = TimeGrid.from_horizon(1.0, 1e-3)
    sens = propagate(model, integrate(model, background, grid), keep=[0], invariant_stride=10)
    inv = invariants(sens)
    assert inv.I1[0] == pytest.approx(128.0)
    assert np.argmax(inv.I1) == 0
    inner = inv.I1[1:-1]
    bumps = inv.times[1:-1][(inner > inv.I1[:-2]) & (inner >= inv.I1[2:])]
    assert any(0.25 <= t <= 0.45 for t in bumps)
