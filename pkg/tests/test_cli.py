import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from mfturnpike.cli import load_config, main

ROOT = Path(__file__).resolve().parents[1]
DEFAULT = ROOT / "configs" / "default.json"


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def small(**over):
    cfg = {
        "dimension": 2, "particles": 4, "horizon": 2.0, "dt": 0.1,
        "kernel": {"kind": "zero"},
        "cost": {"cd": 1.0, "cpsi": 1.0, "cl": 1.0, "target": [0.0, 0.0]},
        "support_radius": 1.0,
        "initial": {"kind": "uniform_ball", "seed": 0},
    }
    cfg.update(over)
    return cfg


def scalar_lq_cfg():
    return {
        "dimension": 1, "horizon": 5.0, "dt": 1e-3,
        "kernel": {"kind": "zero"}, "cost": {"cd": 1.0, "cpsi": 1.0, "cl": 1.0, "target": [0.0]},
        "support_radius": 1.0, "initial": {"kind": "explicit", "positions": [[1.0]]},
    }


def test_shipped_configs_validate():
    assert load_config(DEFAULT)["particles"] == 8
    packaged = ROOT / "src" / "mfturnpike" / "data"
    assert json.loads((packaged / "default.json").read_text()) == json.loads(DEFAULT.read_text())
    assert (packaged / "config.schema.json").read_text() == (ROOT / "docs" / "config.schema.json").read_text()


def test_schema_rejects_unknown_key(tmp_path, capsys):
    assert main(["constants", str(write(tmp_path, small(bogus=1)))]) == 2
    assert "bogus" in capsys.readouterr().err


# ---- constants


def test_constants_quadratic(tmp_path, capsys):
    cfg = small(ledger={"beta": 1.0, "tau": "optimal"})
    assert main(["constants", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    rows = {line.split()[0]: line.split()[1] for line in out.splitlines()[1:] if line.split()}
    assert float(rows["c0"]) == 1.5 and float(rows["c1"]) == 4.0 and float(rows["m"]) == 2.0
    assert "alpha = 1/(e C0 C1)" in out
    assert float(out.split("alpha = 1/(e C0 C1) = ")[1]) == pytest.approx(1 / (6 * math.e), rel=1e-14)
    ledger = json.loads((tmp_path / "o" / "constants.json").read_text())
    assert ledger["c0"] == 1.5


def test_constants_zero_cd(tmp_path, capsys):
    cfg = small(cost={"cd": 0.0, "cpsi": 1.0, "cl": 1.0, "target": [0.0, 0.0]})
    assert main(["constants", str(write(tmp_path, cfg))]) == 2
    err = capsys.readouterr().err
    assert "item i" in err and "dissipativity" in err


def test_constants_small_tau(tmp_path):
    cfg = small(ledger={"beta": 1.0, "tau": 5.0})
    assert main(["constants", str(write(tmp_path, cfg))]) == 2


# ---- solve


def test_solve_scalar_lq(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", str(write(tmp_path, scalar_lq_cfg())), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert abs(summary["cost"] - math.tanh(5.0)) <= 1e-3 * math.tanh(5.0)
    assert set(summary) >= {"cost", "iters", "grad_norm", "lipschitz_proxy_max"}
    rows = list(csv.reader(open(out / "trajectory.csv")))
    assert rows[0] == ["t", "particle", "x_1", "u_1", "m2"] and len(rows) == 5002


def test_solve_at_target(tmp_path):
    cfg = small(initial={"kind": "explicit", "positions": [[0.0, 0.0]] * 3})
    out = tmp_path / "o"
    assert main(["solve", str(write(tmp_path, cfg)), "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["cost"] == 0.0


def test_solve_tiny_bound_clips(tmp_path):
    cfg = small(control_bound=1e-3, solver={"enforce_bound": True, "max_iters": 20})
    out = tmp_path / "o"
    assert main(["solve", str(write(tmp_path, cfg)), "--out", str(out)]) in (0, 3)
    assert json.loads((out / "summary.json").read_text())["clipped"] > 0


def test_solve_not_converged(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", str(write(tmp_path, small(solver={"max_iters": 1}))), "--out", str(out)]) == 3
    assert (out / "trajectory.csv").exists()


def test_solve_divergence(tmp_path):
    cfg = small(kernel={"kind": "linear", "kappa": -1000.0}, horizon=20.0)
    assert main(["solve", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 4


def test_solve_invalid_assumptions(tmp_path, capsys):
    cfg = small(kernel={"kind": "linear", "kappa": 1.0, "cp": 0.5})
    assert main(["solve", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 2
    assert "[iii]" in capsys.readouterr().err


# ---- verify


def test_verify_adversarial(tmp_path, capsys):
    cfg = small(initial={"kind": "explicit", "positions": [[0.0, 0.0]] * 2},
                trajectory={"source": "constant", "value": 1.0},
                checks=["moment_growth", "cheap_control", "exponential_turnpike"])
    out = tmp_path / "o"
    assert main(["verify", str(write(tmp_path, cfg)), "--out", str(out)]) == 5
    assert "first failing check: check_moment_growth" in capsys.readouterr().err
    assert json.loads((out / "check_cheap_control.json").read_text())["pass"] is False
    report = json.loads((out / "check_moment_growth.json").read_text())
    assert report["pass"] is False
    assert json.loads((out / "check_exponential_turnpike.json").read_text())["pass"] is False


def test_verify_empty(tmp_path):
    out = tmp_path / "o"
    assert main(["verify", str(write(tmp_path, small(checks=[]))), "--out", str(out)]) == 0
    assert not out.exists() or not any(out.iterdir())


def test_verify_feedback_suite(tmp_path):
    cfg = small(trajectory={"source": "cheap_feedback"}, control_bound=10.0,
                checks=["cheap_control", "moment_growth", "exponential_turnpike", "control_decay",
                        "cost_decay", "w2_stability", "flow_map_stability"])
    out = tmp_path / "o"
    assert main(["verify", str(write(tmp_path, cfg)), "--out", str(out)]) == 0
    rep = json.loads((out / "check_cheap_control.json").read_text())
    assert set(rep) >= {"name", "pass", "worst_margin", "worst_t", "samples"}


def test_verify_dpp_needs_solve(tmp_path):
    cfg = small(trajectory={"source": "zero"}, checks=["dpp"])
    assert main(["verify", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 2


# ---- study


def test_study_row_count(tmp_path, capsys):
    cfg = small(study={"n_list": [8, 16], "seeds": [0, 1], "time_stride": 5})
    out = tmp_path / "o"
    assert main(["study", str(write(tmp_path, cfg)), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "study.csv")))
    assert len(rows) == 2 * 2 * 5
    assert "monotone fraction" in capsys.readouterr().out


def test_study_decoupled_gaps(tmp_path):
    cfg = small(study={"n_list": [4, 8], "seeds": [0], "time_stride": 4}, ledger={"beta": 1.0})
    out = tmp_path / "o"
    assert main(["study", str(write(tmp_path, cfg)), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "study.csv")))
    z = 0.1  # beta * dt; RK4 multiplies x - target by R(z) per step
    r4 = 1 - z + z**2 / 2 - z**3 / 6 + z**4 / 24
    for n in ("4", "8"):
        sub = [r for r in rows if r["N"] == n]
        g0 = float(sub[0]["w2_gap"])
        for r in sub:
            t = float(r["t"])
            assert float(r["w2_gap"]) == pytest.approx(r4 ** round(t / 0.1) * g0, rel=1e-12)
            assert float(r["w2_gap"]) == pytest.approx(math.exp(-t) * g0, rel=1e-5)


def test_study_solved(tmp_path, capsys):
    cfg = small(kernel={"kind": "linear", "kappa": 0.5}, study={"n_list": [8], "seeds": [0], "mode": "solve"})
    assert main(["study", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 0
    assert "|V_N - V_2N| / V_N" in capsys.readouterr().out


# ---- binary


def test_binary_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "mfturnpike.cli", "constants", str(write(tmp_path, small()))],
                        capture_output=True, text=True)
    assert ok.returncode == 0 and "c0" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "mfturnpike.cli", "constants", str(tmp_path / "missing.json")],
                         capture_output=True, text=True)
    assert bad.returncode == 2


def test_seed_override_changes_sample(tmp_path):
    cfg = write(tmp_path, small(trajectory={"source": "zero"}, checks=["moment_growth"]))
    main(["verify", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["verify", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
    a = (tmp_path / "a" / "check_moment_growth.json").read_text()
    b = (tmp_path / "b" / "check_moment_growth.json").read_text()
    assert a != b
