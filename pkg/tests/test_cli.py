import csv
import json

import pytest

from fsm_placer import cli
from fsm_placer.errors import EstimationFailedError

FAST_RUN = ["run", "--preset", "linear-decay", "--seed", "0,1"]


def _read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_preset_prints_json(capsys):
    assert cli.main(["preset", "quadratic-decay"]) == 0
    config = json.loads(capsys.readouterr().out)
    assert config["name"] == "quadratic-decay"
    assert config["guess"]["initial_state"]["values"] == [1.75]


def test_preset_emit_then_validate(tmp_path, capsys):
    path = tmp_path / "configs" / "burgers.json"
    assert cli.main(["preset", "burgers", "--emit", str(path)]) == 0
    assert path.exists()
    assert cli.main(["validate", "--config", str(path)]) == 0
    assert "valid" in capsys.readouterr().out


def test_validate_rejects_bad_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"name": "linear_decay"}}), encoding="utf-8")
    assert cli.main(["validate", "--config", str(path)]) == 2
    assert cli.main(["validate", "--config", str(tmp_path / "missing.json")]) == 2


def test_run_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert cli.main([*FAST_RUN, "--out", str(out)]) == 0

    placement = _read_json(out / "placement.json")
    assert placement["times"] == pytest.approx([0.1, 1.0])
    for name in ("summary.json", "trajectory.csv", "sensitivities.csv", "cost_surface.csv"):
        assert (out / name).exists(), name
    for seed in (0, 1):
        seed_dir = out / f"seed_{seed}"
        assert (seed_dir / "observations.json").exists()
        estimate = _read_json(seed_dir / "estimate.json")
        assert estimate["seed"] == seed
        assert estimate["criterion"] == "gradient"
        with (seed_dir / "forecast.csv").open() as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["t", "background_error", "analysis_error"]
        assert len(rows) == 2002

    summary = _read_json(out / "summary.json")
    (scenario,) = summary["scenarios"]
    assert scenario["label"] == "primary"
    assert [s["seed"] for s in scenario["seeds"]] == [0, 1]
    assert scenario["background_error"] == pytest.approx(0.1)


def test_run_is_deterministic(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli.main([*FAST_RUN, "--out", str(first), "--threads", "1"]) == 0
    assert cli.main([*FAST_RUN, "--out", str(second), "--threads", "2"]) == 0
    for name in ("summary.json", "placement.json", "seed_1/estimate.json", "seed_1/observations.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_run_noise_free_json_tables(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--preset", "quadratic-decay", "--noise", "0", "--format", "json", "--out", str(out)]) == 0
    summary = _read_json(out / "summary.json")
    (scenario,) = summary["scenarios"]
    assert len(scenario["seeds"]) == 1
    assert scenario["estimate_mean"] == pytest.approx([2.0, -1.0], abs=1e-6)
    assert (out / "trajectory.json").exists()
    assert isinstance(_read_json(out / "cost_surface.json"), list)


@pytest.mark.parametrize("extra", [
    ["--times", "0.5,0.5"],
    ["--times", "0.1,1.0005"],
    ["--times", "0.1,5.0"],
    ["--seed", "1,1"],
])
def test_invalid_input_exits_with_2(extra, tmp_path):
    assert cli.main([*FAST_RUN, *extra, "--out", str(tmp_path)]) == 2


def test_missing_source_exits_with_2(tmp_path):
    assert cli.main(["run", "--out", str(tmp_path)]) == 2


def test_numerical_failure_exits_with_3(monkeypatch, tmp_path):
    def failing_run(*args, **kwargs):
        raise EstimationFailedError("estimation failed on every seed for primary")

    monkeypatch.setattr(cli, "run", failing_run)
    assert cli.main([*FAST_RUN, "--out", str(tmp_path)]) == 3


def test_sweep_single_cell(tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", "--preset", "linear-decay", "--t1-axis", "0.1", "--t2-axis", "1.0", "--out", str(out)]
    assert cli.main(args) == 0
    with (out / "sweep.csv").open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t1", "t2", "y1sq", "w1sq", "y2sq", "w2sq", "detG", "singular_flag"]
    assert len(rows) == 2
    assert float(rows[1][2]) == pytest.approx(1.227968 ** 2, rel=1e-5)
    assert rows[1][7] == "0"
    summary = _read_json(out / "sweep_summary.json")
    assert summary["shape"] == [1, 1]
    assert summary["planned_times"] == pytest.approx([0.1, 1.0])


def test_sweep_rejects_field_models(tmp_path):
    assert cli.main(["sweep", "--preset", "burgers", "--out", str(tmp_path)]) == 2
