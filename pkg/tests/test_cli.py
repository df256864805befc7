from __future__ import annotations

import csv
import json

import pytest

from pid_distill import cli
from pid_distill import trainer as trainer_module
from pid_distill.errors import ConfigError, NumericalError


TINY = {
    "teacher": {"type": "gaussian", "dim": 2, "sigma0": 1.0},
    "grid": {"n": 8},
    "student": {"hidden_dims": [6, 6]},
    "train": {"steps": 3, "batch": 4, "log_every": 1},
    "eval": {"n_samples": 32, "reference_n": 40, "trajectory_seeds": 2},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def _rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def test_missing_required_argument_is_a_validation_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["sample"])
    assert info.value.code == cli.EXIT_INVALID


def test_train_sample_eval_round(tmp_path, config_path):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(config_path), "--out", str(run)]) == cli.EXIT_OK
    ckpt = run / "ckpt_3.json"
    assert ckpt.exists() and (run / "log.csv").exists()

    samples = tmp_path / "samples.csv"
    assert cli.main(["sample", "--ckpt", str(ckpt), "--n", "10", "--out", str(samples)]) == cli.EXIT_OK
    rows = _rows(samples)
    assert rows[0] == ["x_0", "x_1"] and len(rows) == 11

    report = tmp_path / "report"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--out", str(report)]) == cli.EXIT_OK
    assert _rows(report / "eval.csv")[1][0] == "3"

    traj = tmp_path / "student.csv"
    args = ["traj", "--source", "student", "--ckpt", str(ckpt), "--seeds", "2", "--out", str(traj)]
    assert cli.main(args) == cli.EXIT_OK
    assert len(_rows(traj)) == 1 + 2 * 8


def test_train_steps_override(tmp_path, config_path):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(config_path), "--out", str(run), "--steps", "2"]) == cli.EXIT_OK
    assert (run / "ckpt_2.json").exists()


def test_traj_writes_one_row_per_seed_and_time(tmp_path, config_path):
    out = tmp_path / "traj.csv"
    assert cli.main(["traj", "--config", str(config_path), "--seeds", "4", "--out", str(out)]) == cli.EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["seed", "i", "t", "x_0", "x_1"]
    assert len(rows) == 1 + 4 * 8
    assert rows[1][:2] == ["0", "0"] and float(rows[1][2]) == 80.0
    assert rows[-1][:2] == ["3", "7"] and float(rows[-1][2]) == 0.002


def test_student_traj_needs_a_checkpoint(tmp_path):
    assert cli.main(["traj", "--source", "student", "--out", str(tmp_path / "x.csv")]) == cli.EXIT_INVALID


def test_invalid_config_exits_with_validation_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grid": {"n": 1}}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "run")]) == cli.EXIT_INVALID


def test_numerical_failure_exits_with_its_own_code(tmp_path, config_path, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalError("Train: non-finite gradient", step=0)

    monkeypatch.setattr(trainer_module, "train", explode)
    assert cli.main(["train", "--config", str(config_path), "--out", str(tmp_path / "run")]) == cli.EXIT_NUMERICAL


def test_exit_code_follows_the_cause_chain():
    try:
        try:
            raise ConfigError("inner")
        except ConfigError as exc:
            raise RuntimeError("outer") from exc
    except RuntimeError as outer:
        assert cli._exit_code(outer) == cli.EXIT_INVALID
    assert cli._exit_code(RuntimeError("plain")) is None


def test_verify_subset(tmp_path):
    args = ["verify", "--only", "boundary", "energy-distance", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_OK
    results = json.loads((tmp_path / "verify.json").read_text())
    assert [r["name"] for r in results] == ["boundary", "energy-distance"]
    assert all(r["ok"] for r in results)


def test_ablate_writes_one_row_per_arm(tmp_path, config_path):
    out = tmp_path / "ablate"
    args = ["ablate", "--config", str(config_path), "--arms", "upwind,central3:l1", "--out", str(out)]
    assert cli.main(args) == cli.EXIT_OK
    rows = _rows(out / "ablation.csv")
    assert [r[0] for r in rows[1:]] == ["upwind", "central3:l1"]


def test_ablate_exits_invalid_when_an_arm_fails(tmp_path):
    relu = tmp_path / "relu.json"
    relu.write_text(json.dumps({**TINY, "student": {"hidden_dims": [6, 6], "activation": "relu"}}))
    out = tmp_path / "ablate"
    args = ["ablate", "--config", str(relu), "--arms", "upwind,exact", "--out", str(out)]
    assert cli.main(args) == cli.EXIT_INVALID
    header, *rows = _rows(out / "ablation.csv")
    assert [r[0] for r in rows] == ["upwind", "exact"]
    error = header.index("error")
    assert rows[0][error] == ""
    assert rows[1][error].startswith("ConfigError")


def test_train_records_scheduled_evaluations(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({**TINY, "train": {**TINY["train"], "eval_every": 2}}))
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(path), "--out", str(run)]) == cli.EXIT_OK
    header, *rows = _rows(run / "log.csv")
    ed = header.index("energy_distance")
    assert [r[0] for r in rows] == ["0", "1", "2"]
    assert [r[ed] != "" for r in rows] == [False, True, True]
    assert float(rows[1][ed]) >= 0.0
