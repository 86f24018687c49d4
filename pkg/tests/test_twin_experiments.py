import pytest

from fsm_placer.experiment import preset, with_overrides
from fsm_placer.runner import run


def _by_label(summary, noise):
    return {s["label"]: s for s in summary["scenarios"] if s["noise_pct"] == noise}


def _burgers(noise_levels, compare_times=((0.5, 1.0),)):
    config = preset("burgers").model_copy(update={"compare_times": [list(t) for t in compare_times]})
    if len(noise_levels) == 1:
        return with_overrides(config, noise_pct=noise_levels[0])
    return config.model_copy(update={"noise_sweep": list(noise_levels)})


def _assert_early_observations_win(summary, noise):
    scenarios = _by_label(summary, noise)
    primary, late = scenarios["primary"], scenarios["compare_1"]
    assert primary["times"] == pytest.approx([0.01, 0.05])
    assert late["times"] == pytest.approx([0.5, 1.0])
    assert primary["analysis_error_mean"] < primary["background_error"]
    assert primary["analysis_error_mean"] < late["analysis_error_mean"]


def test_burgers_noise_free_recovers_initial_state(tmp_path):
    artifacts = run(_burgers([0.0], compare_times=()), tmp_path)
    (primary,) = artifacts.summary["scenarios"]
    assert primary["seeds"][0]["converged"]
    assert primary["analysis_error_mean"] <= 1e-4
    assert (tmp_path / "seed_0" / "estimate.json").exists()


def test_burgers_early_observations_win(tmp_path):
    artifacts = run(_burgers([10.0]), tmp_path)
    _assert_early_observations_win(artifacts.summary, 10.0)
    assert (tmp_path / "sensitivities.csv").exists()


@pytest.mark.slow
def test_burgers_early_observations_win_at_every_noise_level(tmp_path):
    artifacts = run(_burgers([1.0, 5.0, 10.0]), tmp_path)
    for noise in (1.0, 5.0, 10.0):
        _assert_early_observations_win(artifacts.summary, noise)
    assert (tmp_path / "noise_5" / "seed_0" / "estimate.json").exists()


@pytest.mark.slow
def test_advdiff_early_observations_win(tmp_path):
    artifacts = run(preset("advdiff"), tmp_path)
    scenarios = _by_label(artifacts.summary, 10.0)
    primary, late = scenarios["primary"], scenarios["compare_2"]
    assert late["times"] == pytest.approx([0.5, 1.0])
    assert primary["gramian_logdet"] is not None
    assert primary["analysis_error_mean"] < primary["background_error"]
    assert primary["analysis_error_mean"] < late["analysis_error_mean"]
