import hashlib
import json
import os
import subprocess
from fractions import Fraction

import numpy as np
import pytest
import yaml

from dampexp import cli, solver
from dampexp.cli import ExperimentConfig, main


def write_config(path, **overrides):
    data = ExperimentConfig().to_dict()
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    path.write_text(yaml.safe_dump(data))
    return str(path)


def manifest(out):
    with open(os.path.join(out, "manifest.json")) as fh:
        return json.load(fh)


def error_payload(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


# --- configuration ---------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(lam=Fraction(5, 11), seed=7)
    cfg.solver.perturbation.center = "random"
    text = cfg.dump()
    back = ExperimentConfig.from_dict(yaml.safe_load(text))
    assert back == cfg and back.dump() == text
    assert back.lam == Fraction(5, 11)


def test_unknown_key_is_rejected(tmp_path, capsys):
    path = write_config(tmp_path / "c.yaml")
    data = yaml.safe_load(open(path))
    data["solver"]["cell"] = 10
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(data))
    assert main(["profile", "--config", path, "--out", str(tmp_path / "o")]) == 2
    err = error_payload(capsys)
    assert set(err) == {"stage", "code", "message", "context"}
    assert err["stage"] == "config" and "solver: cell" in err["message"]


def test_invalid_yaml(tmp_path):
    (tmp_path / "bad.yaml").write_text("lambda: [0.5\n")
    assert main(["profile", "--config", str(tmp_path / "bad.yaml")]) == 2


def test_random_center_is_seeded():
    a = ExperimentConfig(seed=3)
    a.solver.perturbation.center = "random"
    b = ExperimentConfig(seed=3)
    b.solver.perturbation.center = "random"
    c = ExperimentConfig(seed=4)
    c.solver.perturbation.center = "random"
    assert a.perturbation().center == b.perturbation().center != c.perturbation().center
    assert -1 <= a.perturbation().center <= 1


def test_fixed_frame_width_is_automatic():
    cfg = ExperimentConfig()
    cfg.solver.frame = "fixed"
    cfg.solver.T = 100.0
    sc = cfg.sim_config()
    assert sc.half_width >= solver.required_half_width(sc)


def test_dry_run(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["verify", "--dry-run", "--lambda", "5/11", "--out", str(out)]) == 0
    assert not out.exists()
    assert "lambda: 5/11" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["--lambda", "1.2"], ["--lambda", "0"], ["--lambda", "x"],
                                  ["--k", "5"]])
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert main(["profile", *argv, "--out", str(tmp_path / "o")]) == 2
    assert error_payload(capsys)["code"] == 2


# --- profile and expand ----------------------------------------------------


def test_profile_command(tmp_path):
    out = str(tmp_path / "run")
    assert main(["profile", "--out", out]) == 0
    m = manifest(out)
    assert sorted(e["path"] for e in m["files"]) == ["gaussian_bounds.json", "profile.csv"]
    for e in m["files"]:
        data = open(os.path.join(out, e["path"]), "rb").read()
        assert hashlib.sha256(data).hexdigest() == e["sha256"]
    assert m["status"] == "ok" and m["all_passed"]
    assert "profile" in m["timings"]


def test_output_directory_rules(tmp_path, capsys):
    assert main(["profile", "--out", str(tmp_path / "new")]) == 0
    assert main(["profile", "--out", str(tmp_path / "a" / "b")]) == 2
    assert "does not exist" in error_payload(capsys)["message"]


def test_expand_default(tmp_path):
    out = str(tmp_path / "run")
    assert main(["expand", "--out", out]) == 0
    assert sorted(os.listdir(os.path.join(out, "corrections"))) == [
        "correction_1.csv", "correction_2.csv", "corrections.json"]
    scan = json.load(open(os.path.join(out, "residual_scan.json")))
    assert "slope_linf" in scan and scan["passed"]
    assert scan["predicted_linf"] == pytest.approx(-2.25)


def test_expand_k1(tmp_path):
    out = str(tmp_path / "run")
    assert main(["expand", "--k", "1", "--out", out]) == 0
    assert sorted(os.listdir(os.path.join(out, "corrections"))) == ["correction_1.csv",
                                                                   "corrections.json"]
    scan = json.load(open(os.path.join(out, "residual_scan.json")))
    assert scan["predicted_linf"] == pytest.approx(-1.75) and scan["passed"]


def test_expand_both_methods(tmp_path):
    out = str(tmp_path / "run")
    assert main(["expand", "--method", "both", "--out", out]) == 0
    report = json.load(open(os.path.join(out, "cross_validation.json")))
    assert set(report["cross_check"]) == {"1", "2"}
    for chk in report["cross_check"].values():
        assert chk["l2_distance"] <= 1e-6 * max(0.05, chk["l2_norm"])


def test_hierarchy_divergence_exit_3(tmp_path, capsys):
    path = write_config(tmp_path / "c.yaml", rho_minus=8.0, rho_plus=1.0,
                        **{"xi_grid.L": 30.0, "xi_grid.N": 2048, "hierarchy.k": 1,
                           "hierarchy.method": "fourier"})
    assert main(["expand", "--config", path, "--out", str(tmp_path / "o")]) == 3
    err = error_payload(capsys)
    assert err["stage"] == "hierarchy" and "DivergenceError" in err["message"]
    assert os.path.exists(tmp_path / "o" / "error.json")


# --- simulate --------------------------------------------------------------


def test_simulate_fixed_frame(tmp_path):
    out = str(tmp_path / "run")
    assert main(["simulate", "--frame", "fixed", "--T", "100", "--out", out]) == 0
    files = sorted(os.listdir(os.path.join(out, "simulation")))
    assert len([f for f in files if f.startswith("snapshot_")]) == 25
    run = json.load(open(os.path.join(out, "simulation", "run.json")))
    assert run["frame"] == "fixed" and run["T"] == 100.0
    assert manifest(out)["checks"]["mass_ledger"]


def test_simulate_default_self_similar(tmp_path):
    path = write_config(tmp_path / "c.yaml", **{"solver.cells": 256})
    out = str(tmp_path / "run")
    assert main(["simulate", "--config", path, "--out", out]) == 0
    run = json.load(open(os.path.join(out, "simulation", "run.json")))
    assert run["frame"] == "selfsim" and run["T"] == 1000.0 and len(run["snapshots"]) >= 12
    assert open(os.path.join(out, "simulation", "snapshot_000.csv")).readline().strip() == "xi,rho,m"


def test_budget_exit_and_resume(tmp_path, capsys):
    out = str(tmp_path / "run")
    args = ["simulate", "--frame", "fixed", "--T", "100", "--out", out]
    assert main(args + ["--budget", "0.2"]) == 5
    err = error_payload(capsys)
    partial = err["context"]["completed_snapshots"]
    assert 1 <= len(partial) < 25 and manifest(out)["status"] == "budget"
    assert len(os.listdir(os.path.join(out, "simulation"))) == len(partial) + 1
    assert main(args) == 0
    ref = str(tmp_path / "ref")
    assert main(args[:-1] + [ref]) == 0
    for k in range(25):
        name = f"simulation/snapshot_{k:03d}.csv"
        a = np.loadtxt(os.path.join(out, name), delimiter=",", skiprows=1)
        b = np.loadtxt(os.path.join(ref, name), delimiter=",", skiprows=1)
        assert np.max(np.abs(a - b)) < 1e-12


def test_completed_simulation_is_reused(tmp_path, monkeypatch):
    out = str(tmp_path / "run")
    args = ["simulate", "--frame", "fixed", "--T", "20", "--out", out]
    assert main(args) == 0
    before = {e["path"]: e["sha256"] for e in manifest(out)["files"]}

    def refuse(*a, **k):
        raise AssertionError("simulation should have been reused")

    monkeypatch.setattr(solver, "run", refuse)
    assert main(args) == 0
    assert {e["path"]: e["sha256"] for e in manifest(out)["files"]} == before
    # a tampered artifact forces a recomputation
    with open(os.path.join(out, "simulation", "snapshot_003.csv"), "a") as fh:
        fh.write("0,0,0\n")
    with pytest.raises(AssertionError, match="reused"):
        main(args)


def test_solver_failure_exit_4(tmp_path, monkeypatch, capsys):
    def failing(config, ev=None, **kw):
        st = solver.init_state(config, ev)
        exc = solver.PositivityError("density lost positivity", t=1.0)
        exc.context["snapshots"] = []
        exc.context["last_good"] = solver._snapshot(st, float(config.params.lam))
        raise exc

    monkeypatch.setattr(solver, "run", failing)
    out = tmp_path / "run"
    assert main(["simulate", "--frame", "fixed", "--T", "10", "--out", str(out)]) == 4
    err = error_payload(capsys)
    assert err["stage"] == "simulate" and err["context"]["last_good"]["t"] == 0.0
    assert (out / "simulation" / "last_good.csv").exists()
    assert manifest(str(out))["status"] == "error"


def test_outputs_are_deterministic(tmp_path):
    hashes = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["simulate", "--frame", "fixed", "--T", "20", "--out", out]) == 0
        hashes.append({e["path"]: e["sha256"] for e in manifest(out)["files"]})
    assert hashes[0] == hashes[1]
    assert any(p.endswith(".csv") for p in hashes[0])


# --- verify and sweep ------------------------------------------------------


def test_verify_small_run(tmp_path):
    path = write_config(tmp_path / "c.yaml", **{
        "solver.cells": 512, "solver.T": 100.0, "analysis.t_min": 1.0,
        "solver.snapshots": [float(t) for t in np.geomspace(1, 100, 9)]})
    out = str(tmp_path / "run")
    code = main(["verify", "--config", path, "--out", out])
    m = manifest(out)
    assert code == (0 if m["all_passed"] else 1)
    assert m["status"] == ("ok" if code == 0 else "acceptance-failure")
    table = json.load(open(os.path.join(out, "decay_table.json")))
    assert [r["k"] for r in table] == [0, 2]
    assert table[1]["target"] == pytest.approx(-1.125)
    assert {"energy_bounded", "baseline_rate", "corrected_rate", "sobolev_k2"} <= set(m["checks"])
    for name in ("norms_k0.csv", "norms_k1.csv", "norms_k2.csv", "plot_data.csv", "decay.svg"):
        assert os.path.exists(os.path.join(out, "analysis", name))


def test_verify_checks_logic():
    from dampexp.analysis import DecaySeries, remainder_from_fields

    ts = np.geomspace(10, 1e3, 9)
    edges = np.linspace(-5, 5, 41)
    x = 0.5 * (edges[1:] + edges[:-1])
    shape = np.exp(-x**2)

    def series(k, rate, log=False):
        recs = [remainder_from_fields(t, k, edges, (1 + t) ** rate * (np.log1p(t) if log else 1)
                                      * shape, 0.1 * (1 + t) ** rate * shape) for t in ts]
        return DecaySeries(recs, 0.5, k)

    rows, checks = cli.verify_checks(0.5, {0: series(0, -0.5), 2: series(2, -1.125)})
    assert checks["baseline_rate"] and checks["corrected_rate"] and checks["corrected_gain"]
    rows, checks = cli.verify_checks(0.5, {0: series(0, -0.7), 2: series(2, -0.9)})
    assert not checks["baseline_rate"] and not checks["corrected_rate"]
    lam = Fraction(5, 11)
    s = {0: series(0, -6 / 11), 1: series(1, -1.0, log=True)}
    for v in s.values():
        v.lam = lam
    rows, checks = cli.verify_checks(lam, s)
    assert checks["log_branch_r2"] and rows[1]["log_flag"]


def test_sweep_command(tmp_path):
    path = write_config(tmp_path / "c.yaml", **{
        "sweep.lambdas": ["0.3", "1/2"], "solver.cells": 256, "solver.T": 100.0,
        "analysis.t_min": 1.0})
    out = str(tmp_path / "run")
    code = main(["sweep", "--config", path, "--out", out])
    rows = json.load(open(os.path.join(out, "threshold_table.json")))
    assert [r["lambda"] for r in rows] == [0.3, 0.5]
    assert all(r["error"] is None for r in rows)
    assert code == (0 if all(r["baseline_pass"] for r in rows) else 1)


def test_console_script(tmp_path):
    res = subprocess.run(["dampexp", "profile", "--dry-run", "--lambda", "0.3"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "lambda: '0.3'" in res.stdout
    res = subprocess.run(["dampexp", "profile", "--lambda", "2", "--out", str(tmp_path / "x")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and json.loads(res.stderr)["code"] == 2
