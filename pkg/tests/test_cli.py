import json
import logging

import numpy as np
import pytest

from app.main import main
from app.services.panel_io import write_panel
from tests.conftest import DATA_DIR, make_panel


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def test_bias_correct_prints_adjusted_effect(capsys):
    assert main(["bias-correct", "--tau", "0.102", "--bias", "0.02404"]) == 0
    assert capsys.readouterr().out == "0.078\n"


def test_bias_correct_json_with_se(capsys):
    assert main(["bias-correct", "--tau", "1.5", "--bias", "0.65", "--se", "0.2", "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["corrected"] == pytest.approx(0.85)
    assert payload["significant_at_2se"] is True


def test_estimate_on_golden_panel(capsys, golden_panel_path):
    assert main(["-q", "estimate", "--panel", str(golden_panel_path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["estimates"]["classic_did"]["tau_hat"] == pytest.approx(1.5)
    assert payload["estimates"]["matched_x"] is not None
    assert payload["plugin"] is None
    assert "p + 2" in payload["errors"]["plugin"]


def test_estimate_writes_assignments(tmp_path, golden_panel_path):
    out = tmp_path / "est"
    assert main(["-q", "estimate", "--panel", str(golden_panel_path), "--assignments", "--out", str(out)]) == 0
    assert (out / "estimate.json").exists()
    header = (out / "assignment_matched_x.csv").read_text().splitlines()[0]
    assert header == "treated_id,control_id,distance"


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--bogus"])
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_panel_file_exits_1(capsys):
    assert main(["-q", "estimate", "--panel", str(DATA_DIR / "absent.csv")]) == 1
    assert "panel file not found" in capsys.readouterr().err


def test_invalid_panel_exits_1(capsys):
    assert main(["-q", "estimate", "--panel", str(DATA_DIR / "unbalanced.csv")]) == 1
    assert "unbalanced panel" in capsys.readouterr().err


def test_numerical_failure_exits_2(tmp_path, rng, capsys):
    x1 = rng.normal(size=12)
    panel = make_panel(y=rng.normal(size=(12, 2)), z=[1] * 4 + [0] * 8, x=np.column_stack([x1, 2 * x1]))
    path = write_panel(panel, tmp_path / "collinear.csv")
    assert main(["-q", "decide", "--panel", str(path), "--no-bootstrap"]) == 2
    assert "rank-deficient" in capsys.readouterr().err


def test_simulate_is_reproducible(tmp_path):
    params = str(DATA_DIR / "canonical_params.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["-q", "simulate", "--params", params, "--seed", "3", "--out", str(a)]) == 0
    assert main(["-q", "simulate", "--params", params, "--seed", "3", "--threads", "4", "--out", str(b)]) == 0
    assert (a / "panel.csv").read_bytes() == (b / "panel.csv").read_bytes()
    assert (a / "panel.csv").read_text().splitlines()[0] == "unit_id,time,z,y,x1"


def test_decide_end_to_end(tmp_path):
    params = str(DATA_DIR / "canonical_params.json")
    sim = tmp_path / "sim"
    assert main(["-q", "simulate", "--params", params, "--seed", "1", "--out", str(sim)]) == 0
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        argv = ["-q", "decide", "--panel", str(sim / "panel.csv"), "--reps", "100", "--seed", "2", "--out", str(out)]
        assert main(argv) == 0
        runs.append(((out / "decision.json").read_bytes(), (out / "table.txt").read_bytes()))
    assert runs[0] == runs[1]
    decision = json.loads(runs[0][0])
    table = runs[0][1].decode("utf-8").splitlines()
    assert table[-1].startswith("Suggested Final Decision")
    assert table[-1].count("✓") == 1
    assert decision["bootstrap_reps"] == 100
    assert decision["criteria_path"][-1]["outcome"] == decision["chosen"]


def test_decide_writes_figure_rows(tmp_path):
    params = str(DATA_DIR / "canonical_params.json")
    sim = tmp_path / "sim"
    assert main(["-q", "simulate", "--params", params, "--seed", "1", "--out", str(sim)]) == 0
    out = tmp_path / "out"
    argv = ["-q", "decide", "--panel", str(sim / "panel.csv"), "--no-bootstrap", "--figure", "--out", str(out)]
    assert main(argv) == 0
    lines = (out / "figure.csv").read_text().splitlines()
    assert lines[0] == "estimator,label,sv,bias,h_x,h_y,radius,chosen"
    assert [line.split(",")[0] for line in lines[1:]] == ["classic_did", "matched_x", "matched_x_y"]
    chosen = json.loads((out / "decision.json").read_text())["chosen"]
    assert [line.split(",")[0] for line in lines[1:] if line.endswith("True")] == [chosen]
    assert all(line.split(",")[6] == "" for line in lines[1:])


def test_decide_pt_asserted(tmp_path, capsys):
    params = str(DATA_DIR / "canonical_params.json")
    sim = tmp_path / "sim"
    assert main(["-q", "simulate", "--params", params, "--out", str(sim)]) == 0
    argv = ["-q", "decide", "--panel", str(sim / "panel.csv"), "--pt-asserted", "--no-bootstrap", "--format", "json"]
    assert main(argv) == 0
    assert json.loads(capsys.readouterr().out)["chosen"] == "classic_did"


def test_decide_rejects_bad_tolerance(golden_panel_path, capsys):
    assert main(["-q", "decide", "--panel", str(golden_panel_path), "--mse-tol", "0"]) == 1
    assert "invalid guideline options" in capsys.readouterr().err


def test_verify_writes_report(tmp_path):
    out = tmp_path / "verify"
    argv = ["-q", "verify", "--params", str(DATA_DIR / "canonical_params.json"), "--reps", "20", "--out", str(out)]
    assert main(argv) == 0
    assert len((out / "verify.txt").read_text().splitlines()) == 6
    assert len(json.loads((out / "verify.json").read_text())["rows"]) == 6


def test_tradeoff_csv(capsys):
    assert main(["tradeoff", "--rho-steps", "3", "--ratios", "1,2", "--n1", "50"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "rho,n0_over_n1,lhs,rhs,match_x_better,v_did,v_didx,v_didxy"
    assert len(lines) == 7


def test_tradeoff_rejects_bad_ratios(capsys):
    assert main(["-q", "tradeoff", "--ratios", "a,b"]) == 1
    assert "bad --ratios" in capsys.readouterr().err
