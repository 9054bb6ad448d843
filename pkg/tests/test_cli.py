import json
import math
import pathlib

import numpy as np
import pytest

from volterra_control.cli import emit_csv, load_config, run, scenario_hash
from volterra_control.model import ValidationError

CONFIG = pathlib.Path(__file__).resolve().parent.parent / "configs" / "s0.json"


def write_config(tmp_path, **overrides):
    raw = json.loads(CONFIG.read_text())
    raw.update(overrides)
    p = tmp_path / "scenario.json"
    p.write_text(json.dumps(raw))
    return str(p)


# --------------------------------------------------------------------------- #
# CSV writer
# --------------------------------------------------------------------------- #

def test_emit_csv_rows_and_header(tmp_path):
    path = tmp_path / "x.csv"
    emit_csv([{"t": 0.0, "c": 1.0}, {"t": 0.5, "c": 2.0}], str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "t,c"
    assert len(lines) == 3
    assert lines[2].split(",")[1] == "2"


def test_emit_csv_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    emit_csv([], str(path))
    assert path.read_text().strip() == ""


def test_emit_csv_17_digit_reals(tmp_path):
    path = tmp_path / "x.csv"
    emit_csv([{"v": 1.0 / 3.0}], str(path))
    assert "0.33333333333333331" in path.read_text()


def test_emit_csv_flags_nan(tmp_path):
    path = tmp_path / "x.csv"
    nan_cells = emit_csv([{"v": float("nan")}], str(path))
    assert "nan" in path.read_text()
    assert nan_cells == [(0, "v")]


def test_emit_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(ValidationError):
        emit_csv([{"a": 1}, {"b": 2}], str(tmp_path / "x.csv"))


# --------------------------------------------------------------------------- #
# config loading
# --------------------------------------------------------------------------- #

def test_load_config_defaults(tmp_path):
    raw = json.loads(CONFIG.read_text())
    del raw["gamma_sign_convention"]
    del raw["regression"]
    p = tmp_path / "min.json"
    p.write_text(json.dumps(raw))
    spec = load_config(str(p))
    assert spec.convention == "discounting"
    assert spec.regression.degree == 2
    assert spec.mc.n_blocks == 8


def test_load_config_missing_grid_names_field(tmp_path):
    raw = json.loads(CONFIG.read_text())
    del raw["grid"]
    p = tmp_path / "broken.json"
    p.write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="grid"):
        load_config(str(p))


def test_load_config_ambiguous_kernel(tmp_path):
    path = write_config(tmp_path,
                        alpha_kernel={"kind": "constant", "value": 1.0, "table": [0.0]})
    with pytest.raises(ValidationError, match="ambiguous"):
        load_config(path)


def test_scenario_hash_tracks_semantic_changes(tmp_path):
    base = load_config(str(CONFIG))
    assert scenario_hash(base) == scenario_hash(load_config(str(CONFIG)))
    changed = load_config(write_config(tmp_path, initial=2.0))
    assert scenario_hash(changed) != scenario_hash(base)
    reseeded = base.with_mc(seed=43)
    assert scenario_hash(reseeded) != scenario_hash(base)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def test_optimal_consumption_outputs(tmp_path):
    out = tmp_path / "out"
    code = run(["optimal-consumption", "--config", str(CONFIG), "--out", str(out)])
    assert code == 0
    rows = (out / "c_star.csv").read_text().splitlines()
    header = rows[0].split(",")
    first = dict(zip(header, rows[1].split(",")))
    middle = dict(zip(header, rows[51].split(",")))
    assert math.isclose(float(first["c_star"]), 1.0, rel_tol=1e-12)
    assert math.isclose(float(middle["c_star"]), 2.0, rel_tol=1e-12)
    report = json.loads((out / "report.json").read_text())
    assert report["checks"] and all(c["passed"] for c in report["checks"])


def test_corrupted_config_exits_2(tmp_path):
    path = write_config(
        tmp_path,
        levy={"atoms": [[-2.0, 0.5]]},
        pi_kernels=[{"kind": "constant", "value": -2.0}],
    )
    code = run(["run-acceptance", "--config", path, "--out", str(tmp_path / "out")])
    assert code == 2
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["error"]


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["optimal-consumption", "--config", str(CONFIG), "--frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_verify_duality_small(tmp_path):
    out = tmp_path / "out"
    code = run(["verify-duality", "--paths", "40000", "--seed", "7", "--out", str(out)])
    assert code == 0
    rows = (out / "duality.csv").read_text().splitlines()
    assert rows[0].startswith("identity,lhs,rhs")
    assert len(rows) == 5


def test_evaluate_utility_reproducible_bytes(tmp_path):
    cfg = write_config(tmp_path, mc={"n_paths": 4000, "seed": 42, "n_blocks": 8})
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run(["evaluate-utility", "--config", cfg, "--out", str(out_a)]) == 0
    assert run(["evaluate-utility", "--config", cfg, "--out", str(out_b)]) == 0
    assert (out_a / "utility.csv").read_bytes() == (out_b / "utility.csv").read_bytes()


def test_simulate_forward_writes_curve(tmp_path):
    cfg = write_config(tmp_path, mc={"n_paths": 4000, "seed": 42, "n_blocks": 8})
    out = tmp_path / "out"
    code = run(["simulate-forward", "--config", cfg, "--out", str(out)])
    assert code == 0
    header = (out / "forward_curve.csv").read_text().splitlines()[0]
    assert header == "t,mean,se,q05,q50,q95"


def test_solve_bsvie_subcommand(tmp_path):
    cfg = write_config(tmp_path, grid={"horizon": 1.0, "n_steps": 50},
                       mc={"n_paths": 256, "seed": 5, "n_blocks": 8})
    out = tmp_path / "out"
    code = run(["solve-bsvie", "--config", cfg, "--out", str(out)])
    assert code == 0
    assert (out / "iteration_log.csv").exists()
    assert (out / "bsvie_diagonal.csv").exists()


def test_report_written_on_check_failure(tmp_path, monkeypatch):
    # force a failing check through an impossible tolerance
    import volterra_control.cli as cli

    def broken_handler(spec, args, report, out_dir):
        report.add_check("always_fails", 1.0, 0.0, 0.5, False)
        return cli.EXIT_CHECK_FAILED if not report.all_passed else cli.EXIT_OK

    monkeypatch.setitem(cli.__dict__, "_cmd_optimal_consumption", broken_handler)
    out = tmp_path / "out"
    code = run(["optimal-consumption", "--config", str(CONFIG), "--out", str(out)])
    assert code == 3
    report = json.loads((out / "report.json").read_text())
    assert report["checks"][0]["passed"] is False


def test_simulate_forward_singular_control_exits_3(tmp_path):
    cfg = write_config(tmp_path, mc={"n_paths": 512, "seed": 42, "n_blocks": 8})
    out = tmp_path / "out"
    code = run(["simulate-forward", "--config", cfg, "--control", "theta_cstar:1.1",
                "--out", str(out)])
    assert code == 3
    report = json.loads((out / "report.json").read_text())
    assert "positivity" in report["error"]
