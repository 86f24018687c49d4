import numpy as np
import pytest

from fsm_placer.dynamics import ControlSelection, ControlVector, TimeGrid, builtin_model, integrate
from fsm_placer.errors import ConfigError, DimensionError, NumericalError, OffGridError, PlacementError, SingularPlanError
from fsm_placer.metasens import sweep
from fsm_placer.observe import (
    Gramian,
    ObservationSet,
    PlacementConstraints,
    build_gramian,
    explicit_plan,
    gramian_det_closed_form,
    identity_operator,
    linear_operator,
    plan_placement,
    pointwise_operator,
    scalar_operator,
    synthesize_observations,
)
from fsm_placer.sensitivity import propagate

MIN_TIME = PlacementConstraints(min_time=0.1)
LINEAR_GRAMIAN = np.array(
    [
        [np.exp(-0.2) + np.exp(-2.0), 0.2 * np.exp(-0.2) + 2.0 * np.exp(-2.0)],
        [0.2 * np.exp(-0.2) + 2.0 * np.exp(-2.0), 0.04 * np.exp(-0.2) + 4.0 * np.exp(-2.0)],
    ]
)
LINEAR_DET = (1.8 * np.exp(-1.1)) ** 2


def test_pointwise_operator_samples_indices():
    op = pointwise_operator(6, [4, 1])
    np.testing.assert_array_equal(op(np.arange(6.0)), [1.0, 4.0])
    assert op.jacobian(np.zeros(6)).shape == (2, 6)
    with pytest.raises(DimensionError):
        pointwise_operator(6, [6])


def test_scalar_operator_is_nonlinear():
    op = scalar_operator(lambda x: x**2, lambda x: 2 * x)
    assert not op.is_linear
    np.testing.assert_array_equal(op(np.array([3.0])), [9.0])
    np.testing.assert_array_equal(op.jacobian(np.array([3.0])), [[6.0]])


def test_observation_set_validation(scalar_obs):
    with pytest.raises(DimensionError):
        ObservationSet(np.array([0.5, 0.5]), np.array([[1.0], [1.0]]), 1.0, scalar_obs)
    with pytest.raises(NumericalError):
        ObservationSet(np.array([0.1, 0.5]), np.array([[1.0], [1.0]]), 0.0, scalar_obs)
    with pytest.raises(NumericalError):
        ObservationSet(np.array([0.1]), np.array([[np.nan]]), 1.0, scalar_obs)
    with pytest.raises(DimensionError):
        ObservationSet(np.array([0.1]), np.array([[1.0, 2.0]]), 1.0, scalar_obs)


def test_noise_free_observations(linear_model, truth, scalar_obs, grid):
    obs = synthesize_observations(linear_model, truth, scalar_obs, [0.1, 1.0], 0.0, 0, grid)
    np.testing.assert_allclose(obs.values[:, 0], 2.0 * np.exp([-0.1, -1.0]), rtol=1e-10)
    np.testing.assert_array_equal(obs.noise_std, [1.0, 1.0])
    assert obs.steps(grid) == [100, 1000]


def test_noisy_observations_are_seeded(linear_model, truth, scalar_obs, grid):
    first = synthesize_observations(linear_model, truth, scalar_obs, [0.1, 1.0], 10.0, 7, grid)
    again = synthesize_observations(linear_model, truth, scalar_obs, [0.1, 1.0], 10.0, 7, grid)
    other = synthesize_observations(linear_model, truth, scalar_obs, [0.1, 1.0], 10.0, 8, grid)
    np.testing.assert_array_equal(first.values, again.values)
    assert not np.array_equal(first.values, other.values)
    # sigma is 10% of the observed magnitude
    np.testing.assert_allclose(first.noise_std, 0.1 * 2.0 * np.exp([-0.1, -1.0]), rtol=1e-10)


def test_vector_noise_uses_rms(rng):
    model = builtin_model("advdiff_2d", nx=4, ny=4)
    grid = TimeGrid(dt=model.dt, steps=10)
    control = ControlVector(rng.standard_normal(16), model.default_parameters)
    trajectory = integrate(model, control, grid)
    obs = synthesize_observations(model, control, identity_operator(16), [grid.time_at(10)], 5.0, 1, grid, trajectory)
    rms = np.sqrt(np.mean(trajectory.states[10] ** 2))
    assert obs.noise_std[0] == pytest.approx(0.05 * rms)


def test_synthesis_rejects_bad_input(linear_model, truth, scalar_obs, grid):
    with pytest.raises(ConfigError):
        synthesize_observations(linear_model, truth, scalar_obs, [0.1], -1.0, 0, grid)
    with pytest.raises(OffGridError):
        synthesize_observations(linear_model, truth, scalar_obs, [0.1005], 1.0, 0, grid)


def test_observation_record_roundtrip():
    op = pointwise_operator(5, [0, 3])
    obs = ObservationSet(np.array([0.1, 0.2]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, 0.25]), op)
    rebuilt = ObservationSet.from_record(obs.to_record())
    np.testing.assert_array_equal(rebuilt.values, obs.values)
    np.testing.assert_array_equal(rebuilt.operator.indices, [0, 3])

    dense = ObservationSet(np.array([0.1]), np.array([[1.0]]), 1.0, linear_operator([[1.0, 1.0]]))
    assert ObservationSet.from_record(dense.to_record()).operator.matrix.tolist() == [[1.0, 1.0]]


def test_linear_decay_gramian(linear_run, scalar_obs):
    trajectory, sens = linear_run
    gramian = build_gramian(sens, trajectory, scalar_obs, [0.1, 1.0])
    np.testing.assert_allclose(gramian.total, LINEAR_GRAMIAN, rtol=1e-8)
    assert gramian.det == pytest.approx(LINEAR_DET, rel=1e-8)
    assert len(gramian.parts) == 2
    assert gramian.is_nonsingular()
    np.testing.assert_allclose(gramian.total, gramian.total.T)


def test_repeated_time_gives_singular_gramian(linear_run, scalar_obs):
    trajectory, sens = linear_run
    gramian = build_gramian(sens, trajectory, scalar_obs, [0.5, 0.5])
    assert not gramian.is_nonsingular()


def test_gramian_is_scaled_by_noise(linear_run, scalar_obs):
    trajectory, sens = linear_run
    unit = build_gramian(sens, trajectory, scalar_obs, [0.1, 1.0])
    scaled = build_gramian(sens, trajectory, scalar_obs, [0.1, 1.0], noise_std=[0.5, 0.5])
    np.testing.assert_allclose(scaled.total, 4.0 * unit.total)


def test_gramian_parts_are_symmetric(rng):
    blocks = [rng.standard_normal((5, 4)) for _ in range(3)]
    gramian = Gramian.from_blocks(blocks, [0.1, 0.2, 0.3])
    for part, A in zip(gramian.parts, blocks):
        np.testing.assert_array_equal(part, part.T)
        np.testing.assert_allclose(part, A.T @ A, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(gramian.total, gramian.total.T)
    stacked = np.vstack(blocks)
    np.testing.assert_allclose(gramian.total, stacked.T @ stacked, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gramian.times, [0.1, 0.2, 0.3])


def test_field_sized_gramian_keeps_log_determinant():
    small = Gramian.from_blocks([np.sqrt(1e-3) * np.eye(1024)])
    assert small.det == 0.0
    assert small.logdet == pytest.approx(1024 * np.log(1e-3))
    large = Gramian.from_blocks([np.sqrt(1e3) * np.eye(1024)])
    assert np.isinf(large.det)
    assert large.logdet == pytest.approx(1024 * np.log(1e3))


def test_gramian_determinant_closed_form(rng):
    for _ in range(1000):
        u1, v1, u2, v2 = rng.uniform(-2, 2, 4)
        d1, d2 = rng.uniform(0.1, 2, 2)
        parts = (
            d1**2 * np.outer([u1, v1], [u1, v1]),
            d2**2 * np.outer([u2, v2], [u2, v2]),
        )
        gramian = Gramian(total=parts[0] + parts[1], parts=parts)
        expected = gramian_det_closed_form(u1, v1, u2, v2, d1, d2)
        scale = np.trace(gramian.total) ** 2
        assert gramian.det == pytest.approx(expected, rel=1e-10, abs=1e-14 * scale)


def test_quadratic_decay_sensitivities_are_never_collinear(quadratic_model, coarse_grid, rng):
    for _ in range(100):
        control = ControlVector([rng.uniform(0.5, 3.0)], [rng.uniform(-1.5, -0.2)])
        sens = propagate(quadratic_model, integrate(quadratic_model, control, coarse_grid))
        k1, k2 = rng.choice(np.arange(1, coarse_grid.steps + 1), size=2, replace=False)
        (u1, v1), (u2, v2) = (
            (sens.u[k, 0, 0], sens.v[k, 0, 0]) for k in (k1, k2)
        )
        scale = abs(u1 * v2) + abs(u2 * v1)
        assert abs(u1 * v2 - u2 * v1) > 1e-12 * scale


def test_plan_linear_decay(linear_run, scalar_obs):
    trajectory, sens = linear_run
    plan = plan_placement(sens, trajectory, scalar_obs, 2, MIN_TIME)
    assert plan.times == pytest.approx((0.1, 1.0))
    assert plan.steps == (100, 1000)
    assert [c.channel for c in plan.rationale] == ["u[0]", "v[0]"]
    assert plan.gramian_det == pytest.approx(LINEAR_DET, rel=1e-8)
    assert plan.to_record().times == list(plan.times)


def test_plan_quadratic_decay(quadratic_run, scalar_obs):
    trajectory, sens = quadratic_run
    plan = plan_placement(sens, trajectory, scalar_obs, 2, MIN_TIME)
    assert plan.times == pytest.approx((0.1, 0.5))


@pytest.mark.parametrize("run_name,model_name", [
    ("linear_run", "linear_model"),
    ("quadratic_run", "quadratic_model"),
])
def test_plan_determinant_is_near_grid_maximum(run_name, model_name, truth, grid, scalar_obs, request):
    trajectory, sens = request.getfixturevalue(run_name)
    model = request.getfixturevalue(model_name)
    plan = plan_placement(sens, trajectory, scalar_obs, 2, MIN_TIME)
    axis = np.round(np.arange(10, 201) * 0.01, 10)
    result = sweep(model, truth, scalar_obs, axis, axis, grid)
    assert plan.gramian_det >= 0.9 * np.nanmax(result.detG)


def test_plan_single_parameter(linear_run, scalar_obs):
    trajectory, sens = linear_run
    plan = plan_placement(sens, trajectory, scalar_obs, 1, MIN_TIME, selection=ControlSelection.PARAMETERS)
    assert plan.times == pytest.approx((1.0,))


def test_plan_needs_enough_observations(linear_run, scalar_obs):
    trajectory, sens = linear_run
    with pytest.raises(PlacementError):
        plan_placement(sens, trajectory, scalar_obs, 1, MIN_TIME)


def test_plan_infeasible_separation(linear_run, scalar_obs):
    trajectory, sens = linear_run
    constraints = PlacementConstraints(min_time=1.95, min_separation=0.5)
    with pytest.raises(PlacementError):
        plan_placement(sens, trajectory, scalar_obs, 2, constraints)


def test_plan_with_separation(linear_run, scalar_obs):
    trajectory, sens = linear_run
    plan = plan_placement(sens, trajectory, scalar_obs, 2, PlacementConstraints(min_time=0.8, min_separation=0.5))
    # u peaks at the earliest admissible time, v must keep its distance
    assert plan.times == pytest.approx((0.8, 1.3))


def test_explicit_plan(linear_run, scalar_obs):
    trajectory, sens = linear_run
    plan = explicit_plan(sens, trajectory, scalar_obs, [1.0, 0.1])
    assert plan.times == pytest.approx((0.1, 1.0))
    assert plan.gramian_det == pytest.approx(LINEAR_DET, rel=1e-8)
    with pytest.raises(SingularPlanError):
        explicit_plan(sens, trajectory, scalar_obs, [0.5, 0.5])
    with pytest.raises(OffGridError):
        explicit_plan(sens, trajectory, scalar_obs, [0.1, 1.0005])


def test_field_plan_uses_invariants(rng):
    model = builtin_model("advdiff_2d", nx=4, ny=4)
    grid = TimeGrid(dt=model.dt, steps=40)
    control = ControlVector(rng.standard_normal(16), model.default_parameters)
    trajectory = integrate(model, control, grid)
    sens = propagate(model, trajectory, keep=[0], invariant_stride=2)
    op = identity_operator(16)
    plan = plan_placement(
        sens, trajectory, op, 2, PlacementConstraints(min_time=0.01), ControlSelection.INITIAL_STATE, model=model
    )
    assert len(set(plan.steps)) == 2
    assert all(t >= 0.01 - 1e-12 for t in plan.times)
    assert all(c.channel == "I1" for c in plan.rationale)
    assert np.isfinite(plan.gramian_logdet)
    with pytest.raises(PlacementError):
        plan_placement(sens, trajectory, op, 2, selection=ControlSelection.INITIAL_STATE)
