import csv
import json
from pathlib import Path

import numpy as np
import pytest

from varislip.budget import EnergyBudget
from varislip.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, main
from varislip.config import load_config, parse_config, serialize_config
from varislip.errors import ParseError, ValidationError
from varislip.geometry import SOLID
from varislip.forcing import ForceField, compile_expression
from varislip.io import SnapshotRecord, check_integrity, read_budgets, read_metadata, read_snapshots, sha256_file, write_outputs
from varislip.scenarios import scenario_config


def _toy_run(tmp_path, name, steps=10):
    out = tmp_path / name
    code = main(["run", "--scenario", "toy_oracle", "--steps", str(steps), "--output", str(out)])
    return code, out


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "toy"
    assert main(["run", "--scenario", "toy_oracle", "--steps", "10", "--output", str(out)]) == EXIT_OK
    return out


# -- configuration ---------------------------------------------------------------------
def test_minimal_document_uses_scenario_defaults():
    cfg = parse_config("[run]\nscenario = falling_disc\n")
    assert cfg == scenario_config("falling_disc")


def test_empty_document_is_falling_disc():
    assert parse_config("") == scenario_config("falling_disc")


def test_h_not_multiple_of_tau():
    with pytest.raises(ValidationError) as exc:
        parse_config("[step]\ndt_tau = 0.001\nh_delay = 0.0025\n")
    assert exc.value.key == "step.h_delay"
    assert "integer multiple" in str(exc.value)


def test_round_trip():
    doc = "[run]\nscenario = sheared_block\nseed = 7\n[fluid]\nslip_coefficient = 3.5\n[step]\nkappa = 2e-4\n"
    cfg = parse_config(doc)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


@pytest.mark.parametrize("name", ["falling_disc", "sheared_block", "rest_block", "colliding_disc", "toy_oracle"])
def test_scenario_round_trip(name):
    cfg = scenario_config(name)
    assert parse_config(serialize_config(cfg)) == cfg


def test_parse_error_reports_line_and_key():
    with pytest.raises(ParseError) as exc:
        parse_config("[run]\nscenario = toy_oracle\n\n[fluid]\nmx = twelve\n")
    assert exc.value.line == 5
    assert exc.value.key == "mx"


def test_unknown_key_and_section():
    with pytest.raises(ParseError):
        parse_config("[fluid]\nviscosity = 1\n")
    with pytest.raises(ParseError):
        parse_config("[plasma]\nx = 1\n")


def test_unknown_scenario():
    with pytest.raises(ValidationError):
        parse_config("[run]\nscenario = nope\n")


@pytest.mark.parametrize("text", ["__import__('os')", "x.real", "open", "lambda: 1", "[1, 2]"])
def test_force_expression_whitelist(text):
    with pytest.raises((ValueError, SyntaxError)):
        compile_expression(text)


def test_force_expression_values():
    f = ForceField("sin(pi * x)", "-9.81 + 0 * y")
    vals = f(0.0, np.array([[0.5, 0.1], [0.0, 0.2]]))
    assert np.allclose(vals, [[1.0, -9.81], [0.0, -9.81]])
    assert ForceField.zero().is_zero


# -- outputs ------------------------------------------------------------------------------
def test_empty_trajectory_outputs(tmp_path):
    paths = write_outputs(tmp_path / "empty", scenario_config("toy_oracle"))
    assert paths["metadata.json"].exists()
    lines = paths["budgets.csv"].read_text().splitlines()
    assert lines == [",".join(["time"] + EnergyBudget.field_names())]
    assert read_budgets(paths["budgets.csv"]) == []


def test_ten_step_budget_rows(toy_dir):
    with open(toy_dir / "budgets.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 11
    assert all(len(r) == len(EnergyBudget.field_names()) + 1 for r in rows)
    assert rows[0][0] == "time"
    assert [int(r[1]) for r in rows[1:]] == list(range(1, 11))


def test_snapshots_zero_extension(toy_dir):
    snaps = read_snapshots(toy_dir / "snapshots.jsonl")
    assert len(snaps) == 11
    for s in snaps:
        v = s.velocity_values()
        assert np.all(v[~s.active] == 0)
        assert np.all(v[s.labels == SOLID] == 0)


def test_snapshot_json_round_trip(toy_dir):
    s = read_snapshots(toy_dir / "snapshots.jsonl")[3]
    again = SnapshotRecord.from_json(s.to_json())
    assert again.to_json() == s.to_json()
    assert np.array_equal(again.eta, s.eta)


def test_run_directory_self_describing(toy_dir):
    meta = read_metadata(toy_dir)
    assert meta["budget_columns"] == ["time"] + EnergyBudget.field_names()
    assert meta["steps_completed"] == 10
    assert check_integrity(toy_dir) == []
    assert load_config(toy_dir / "config.ini").run.steps == 10


def test_byte_identical_reruns(tmp_path):
    a = _toy_run(tmp_path, "a", 3)[1]
    b = _toy_run(tmp_path, "b", 3)[1]
    for name in ("config.ini", "budgets.csv", "snapshots.jsonl", "report.json", "metadata.json"):
        assert sha256_file(a / name) == sha256_file(b / name), name


def test_unwritable_output_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as exc:
        write_outputs(blocker / "sub", scenario_config("toy_oracle"))
    assert str(blocker / "sub") in str(exc.value)


# -- command line ----------------------------------------------------------------------------
def test_cli_scenarios(capsys):
    assert main(["scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("falling_disc", "sheared_block", "shrinking_disc_transport"):
        assert name in out


def test_cli_missing_config(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "missing.cfg")])
    assert code == EXIT_RUNTIME
    assert "file not found" in capsys.readouterr().err


def test_cli_invalid_config(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[step]\ndt_tau = 0.001\nh_delay = 0.0015\n")
    assert main(["run", "--config", str(p)]) == EXIT_RUNTIME
    assert "h_delay" in capsys.readouterr().err


def test_cli_verify_intact(toy_dir):
    assert main(["verify", str(toy_dir)]) == EXIT_OK


def test_cli_verify_tampered_digit(toy_dir, tmp_path, capsys):
    import shutil

    d = tmp_path / "tampered"
    shutil.copytree(toy_dir, d)
    text = (d / "budgets.csv").read_text()
    lines = text.splitlines(keepends=True)
    row = lines[5]
    i = next(j for j in range(len(row) - 1, 0, -1) if row[j].isdigit() and row[j] != "0")
    lines[5] = row[:i] + ("1" if row[i] != "1" else "2") + row[i + 1 :]
    (d / "budgets.csv").write_text("".join(lines))
    capsys.readouterr()
    assert main(["verify", str(d)]) == EXIT_VERIFY
    captured = capsys.readouterr()
    assert "file_integrity" in captured.out + captured.err


def test_cli_verify_tampered_with_rehash(toy_dir, tmp_path, capsys):
    # a forged hash does not hide the change: the budgets are re-assembled
    import shutil

    d = tmp_path / "forged"
    shutil.copytree(toy_dir, d)
    budgets = read_budgets(d / "budgets.csv")
    b = budgets[4]
    rows = (d / "budgets.csv").read_text().splitlines(keepends=True)
    cells = rows[5].rstrip("\n").split(",")
    col = 1 + EnergyBudget.field_names().index("viscous_dissipation")
    cells[col] = repr(b.viscous_dissipation * (1 + 1e-6) + 1e-12)
    rows[5] = ",".join(cells) + "\n"
    (d / "budgets.csv").write_text("".join(rows))
    meta = json.loads((d / "metadata.json").read_text())
    meta["sha256"]["budgets.csv"] = sha256_file(d / "budgets.csv")
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    capsys.readouterr()
    assert main(["verify", str(d)]) == EXIT_VERIFY
    assert "budget_reassembly" in capsys.readouterr().err


def test_cli_verify_not_a_run_directory(tmp_path):
    assert main(["verify", str(tmp_path)]) == EXIT_RUNTIME


def test_cli_check_selection(tmp_path):
    out = tmp_path / "energy_only"
    assert main(["run", "--scenario", "toy_oracle", "--steps", "2", "--check", "energy", "--output", str(out)]) == EXIT_OK
    names = [c["name"] for c in json.loads((out / "report.json").read_text())["checks"]]
    assert "budget_reassembly" in names and "coupling_normal_residual" not in names


def test_cli_sweep(tmp_path):
    root = tmp_path / "sweep"
    code = main(["sweep", "--scenario", "toy_oracle", "--steps", "2", "--vary", "slip_coefficient=0.5,2", "--output", str(root)])
    assert code == EXIT_OK
    with open(root / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["slip_coefficient", "directory", "verification", "tangential_jump_mean"]
    assert [r[1] for r in rows[1:]] == ["run_000", "run_001"]
    assert all((root / r[1] / "metadata.json").exists() for r in rows[1:])


def test_cli_sweep_bad_axis(tmp_path):
    assert main(["sweep", "--scenario", "toy_oracle", "--vary", "color=1,2", "--output", str(tmp_path)]) == EXIT_RUNTIME


def test_cli_kinematic_scenario(tmp_path):
    out = tmp_path / "transport"
    assert main(["run", "--scenario", "shrinking_disc_transport", "--output", str(out)]) == EXIT_OK
    assert read_budgets(out / "budgets.csv") == []
    assert Path(out / "snapshots.jsonl").read_text() == ""


def test_output_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("VARISLIP_OUTPUT_DIR", str(tmp_path / "root"))
    assert main(["run", "--scenario", "toy_oracle", "--steps", "1"]) == EXIT_OK
    assert (tmp_path / "root" / "toy_oracle" / "metadata.json").exists()
