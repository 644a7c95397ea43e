import csv
import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dampexp.analysis import (DecaySeries, baseline_rate, energy_functional, fit_decay,
                              fit_power_law, log_branch, rate_study, remainder,
                              remainder_from_fields, remainder_rate, threshold_sweep,
                              write_plot_data, write_svg)
from dampexp.core import DomainError, Params
from dampexp.expansion import ExpansionEvaluator
from dampexp.solver import Perturbation, SimConfig, run

LAM = 0.5


@pytest.fixture(scope="module")
def ev(corrections_05):
    return ExpansionEvaluator(corrections_05.profile, corrections_05, k=2)


@pytest.fixture(scope="module")
def short_run(ev):
    cfg = SimConfig(Params(LAM), cells=1024, T=100.0,
                    snapshots=tuple(np.geomspace(1.0, 100.0, 9)),
                    perturbation=Perturbation(amplitude=1.0, m_amplitude=0.5))
    return run(cfg, ev)


# --- theoretical exponents -------------------------------------------------


def test_baseline_rate_branches():
    assert baseline_rate(0.1) == pytest.approx(-0.825)
    assert baseline_rate(Fraction(1, 7)) == pytest.approx(-6 / 7)
    assert baseline_rate(0.2) == pytest.approx(-0.8)
    assert baseline_rate(0.5) == pytest.approx(-0.5)


@settings(max_examples=200)
@given(st.floats(0.01, 0.99))
def test_k0_density_rate_is_baseline(lam):
    assert remainder_rate(lam, 0, "P", "linf") == pytest.approx(baseline_rate(lam), abs=1e-12)


def test_baseline_rate_continuous_at_threshold():
    for eps in (1e-6, 1e-9):
        assert baseline_rate(1 / 7 - eps) == pytest.approx(-6 / 7, abs=1e-5)
        assert baseline_rate(1 / 7 + eps) == pytest.approx(-6 / 7, abs=1e-5)


@pytest.mark.parametrize("lam,k0", [(0.2, 1), (0.5, 2), (0.8, 6)])
def test_corrected_rate_at_k0(lam, k0):
    a = (1 + lam) / 2
    assert remainder_rate(lam, k0, "P", "linf") == pytest.approx(-1.5 * a)
    assert remainder_rate(lam, k0, "P_x", "linf") == pytest.approx(-2.5 * a)
    assert remainder_rate(lam, k0, "Q", "linf") == pytest.approx(-1 - 0.5 * a)
    for s, name in enumerate(("P", "P_x", "P_xx")):
        assert remainder_rate(lam, k0, name, "l2") == pytest.approx(-(s + 1) * a)
    for s, name in enumerate(("Q", "Q_x", "Q_xx")):
        assert remainder_rate(lam, k0, name, "l2") == pytest.approx(-1 - s * a)


def test_log_branch():
    assert log_branch(Fraction(5, 11)) and not log_branch(0.5)


# --- fits ------------------------------------------------------------------


T_SYN = np.geomspace(10, 1e4, 13)


def test_fit_exact_power_law():
    fit = fit_power_law(T_SYN, (1 + T_SYN) ** -1.125)
    assert abs(fit.exponent + 1.125) <= 1e-12
    assert fit.r2 == pytest.approx(1.0) and not fit.low_confidence


def test_fit_log_corrected_law():
    vals = (1 + T_SYN) ** -1.125 * np.log1p(T_SYN)
    assert abs(fit_power_law(T_SYN, vals, log_flag=True).exponent + 1.125) <= 1e-10
    assert abs(fit_power_law(T_SYN, vals).exponent + 1.125) > 0.05


@settings(max_examples=50)
@given(st.floats(-4.0, 0.5), st.floats(1e-8, 1e3))
def test_fit_recovers_any_exponent(p, c):
    fit = fit_power_law(T_SYN, c * (1 + T_SYN) ** p)
    assert abs(fit.exponent - p) <= 1e-10


def test_fit_window_and_preconditions():
    t = np.geomspace(1, 1e3, 16)
    fit = fit_power_law(t, (1 + t) ** -0.7, t_min=10)
    assert fit.n_points == 11
    with pytest.raises(DomainError, match="times"):
        fit_power_law(T_SYN[:6], T_SYN[:6] ** -1.0)
    with pytest.raises(DomainError, match="decades"):
        fit_power_law(np.geomspace(10, 500, 10), np.ones(10))
    with pytest.raises(DomainError, match="positive"):
        fit_power_law(T_SYN, np.zeros(13))


def test_low_confidence_is_not_fatal(caplog):
    rng = np.random.default_rng(4)
    vals = (1 + T_SYN) ** -1.0 * np.exp(rng.normal(0, 1.5, T_SYN.size))
    fit = fit_power_law(T_SYN, vals)
    assert fit.low_confidence and "low-confidence" in caplog.text
    assert fit.as_dict()["low_confidence"]


def test_fit_decay_defaults_to_log_branch():
    recs = [remainder_from_fields(t, 1, np.linspace(-1, 1, 11), np.full(10, (1 + t) ** -0.9),
                                  np.full(10, (1 + t) ** -1.2)) for t in T_SYN]
    s11 = DecaySeries(recs, Fraction(5, 11), 1)
    s05 = DecaySeries(recs, 0.5, 1)
    assert fit_decay(s11, "linf:P").log_flag and not fit_decay(s05, "linf:P").log_flag
    assert fit_decay(s05, "l2:Q").exponent == pytest.approx(-1.2, abs=1e-12)
    assert fit_decay(s05, "linf:P").theoretical == remainder_rate(0.5, 1)
    assert s05.monotone() and s05.monotone("l2:Q")


def test_monotone_ripple():
    vals = [1.0, 0.8, 0.83, 0.7, 0.6, 0.66]
    recs = [remainder_from_fields(t, 0, np.linspace(-1, 1, 21), np.full(20, v), np.zeros(20))
            for t, v in zip(np.geomspace(10, 1e3, 6), vals)]
    series = DecaySeries(recs, 0.5, 0)
    assert series.monotone(ripple=0.05) is False
    assert series.monotone(ripple=0.11) is True


# --- remainders ------------------------------------------------------------


def test_zero_remainder(ev):
    cfg = SimConfig(Params(LAM), cells=512, T=10.0, snapshots=(0.0,),
                    perturbation=Perturbation(shape="none"))
    snap = run(cfg, ev).snapshots[0]
    rec = remainder(snap, ev)
    assert max(rec.l2.values()) < 1e-12 and max(rec.linf.values()) < 1e-12
    energy = energy_functional([rec], LAM)
    assert energy.values[0] == 0.0 and not energy.mass_warning


def test_remainder_norms_and_sobolev(short_run, ev):
    recs = [remainder(s, ev) for s in short_run.snapshots]
    for r in recs:
        assert all(v >= 0 for v in r.l2.values()) and all(v >= 0 for v in r.linf.values())
        assert r.sobolev_ok()
        assert r.linf["P"] == pytest.approx(np.max(np.abs(r.P)))
        assert not r.resampled


def test_first_correction_reduces_remainder(short_run, ev):
    snap = short_run.snapshots[-1]
    assert snap.t == pytest.approx(100.0)
    p0 = remainder(snap, ev, k=0).linf["P"]
    p1 = remainder(snap, ev, k=1).linf["P"]
    assert p0 > p1


def test_remainder_resamples_nonuniform_grid(short_run, ev):
    snap = short_run.snapshots[-1]
    edges = snap.edges.copy()
    edges[1:-1] += 1e-4 * np.sin(np.arange(1, edges.size - 1))
    bent = dataclasses.replace(snap, edges=edges)
    rec = remainder(bent, ev)
    assert rec.resampled
    ref = remainder(snap, ev)
    assert rec.linf["P"] == pytest.approx(ref.linf["P"], rel=0.05)


def test_remainder_rejects_other_lambda(short_run, ev):
    snap = dataclasses.replace(short_run.snapshots[-1], lam=0.4)
    with pytest.raises(DomainError):
        remainder(snap, ev)


def test_remainder_derivatives_match_oracle():
    edges = np.linspace(-20, 20, 2049)
    x = 0.5 * (edges[1:] + edges[:-1])
    rec = remainder_from_fields(5.0, 0, edges, np.exp(-x**2), np.sin(x) * np.exp(-x**2 / 4))
    assert np.max(np.abs(rec.fields["P_x"] + 2 * x * np.exp(-x**2))) < 1e-6
    assert np.max(np.abs(rec.fields["P_xx"] - (4 * x**2 - 2) * np.exp(-x**2))) < 1e-5
    assert rec.l2["P"] == pytest.approx((math.pi / 2) ** 0.25, rel=1e-10)
    assert rec.sobolev_ok()


def test_sobolev_detects_inconsistent_norms():
    edges = np.linspace(-5, 5, 101)
    x = 0.5 * (edges[1:] + edges[:-1])
    rec = remainder_from_fields(1.0, 0, edges, np.exp(-x**2), np.exp(-x**2))
    rec.l2["P_x"] = 1e-6
    assert not rec.sobolev_ok()


# --- energy functional -----------------------------------------------------


def test_energy_ftc_and_left_end(short_run, ev):
    recs = [remainder(s, ev) for s in short_run.snapshots]
    energy = energy_functional(recs, LAM)
    for e in energy.records:
        assert e.y[0] == 0.0
        assert e.ftc_residual < 1e-8
    assert not energy.mass_warning
    assert np.all(energy.values > 0)


def test_energy_formula_on_synthetic_record():
    edges = np.linspace(-10, 10, 4001)
    x = 0.5 * (edges[1:] + edges[:-1])
    P = 2 * x * np.exp(-x**2)  # y = exp(-x^2) since y_x = -P
    rec = remainder_from_fields(3.0, 0, edges, P, np.zeros_like(x))
    e = energy_functional([rec], 0.5).records[0]
    assert np.max(np.abs(e.y - np.exp(-edges**2))) < 1e-5
    expect = math.sqrt(math.pi / 2) + sum(
        4.0 ** ((i + 1) * 1.5) * rec.l2[n] ** 2 for i, n in enumerate(("P", "P_x", "P_xx")))
    assert e.functional == pytest.approx(expect, rel=1e-5)
    assert abs(e.y_far) < 1e-12


def test_energy_mass_warning(caplog):
    edges = np.linspace(-10, 10, 401)
    x = 0.5 * (edges[1:] + edges[:-1])
    rec = remainder_from_fields(3.0, 0, edges, np.exp(-x**2), np.zeros_like(x))
    energy = energy_functional([rec], 0.5)
    assert energy.mass_warning and "shift_x0" in caplog.text
    assert energy.records[0].y_far == pytest.approx(-math.sqrt(math.pi), rel=1e-6)


def test_energy_bounded_flags():
    edges = np.linspace(-10, 10, 401)
    x = 0.5 * (edges[1:] + edges[:-1])
    ts = np.geomspace(10, 1e3, 9)
    decaying = [remainder_from_fields(t, 0, edges, (1 + t) ** -3 * np.exp(-x**2), 0 * x) for t in ts]
    growing = [remainder_from_fields(t, 0, edges, (1 + t) ** 0.0 * np.exp(-x**2), 0 * x) for t in ts]
    assert energy_functional(decaying, 0.5, far_tol=np.inf).bounded
    assert not energy_functional(growing, 0.5, far_tol=np.inf).bounded


# --- pipeline, sweep and outputs -------------------------------------------


def test_small_rate_study():
    study = rate_study(0.5, T=100.0, t_min=1.0, snapshots=tuple(np.geomspace(1, 100, 9)),
                       solver_options={"cells": 512})
    assert study.k0 == 2 and sorted(study.series) == [0, 1, 2]
    base = study.baseline()
    assert base.n_points == 9 and base.theoretical == pytest.approx(-0.5)
    assert study.corrected().exponent < base.exponent
    assert study.run_manifest["cells"] == 512


@pytest.mark.parametrize("workers", [1, 2])
def test_sweep_captures_errors(workers, tmp_path):
    table = threshold_sweep([0.3, 0.5], workers=workers, T=2e5)
    assert [r.lam for r in table.rows] == [0.3, 0.5]
    for row in table.rows:
        assert "ConfigError" in row.error and not row.baseline_pass and not row.corrected_pass
    table.to_csv(tmp_path / "sweep.csv")
    table.to_json(tmp_path / "sweep.json")
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert rows[0]["k0"] == "1" and rows[1]["baseline_target"] == "-0.5"


def test_plot_outputs(tmp_path):
    series = {"P_0": (T_SYN, (1 + T_SYN) ** -0.5), "P_2": (T_SYN, (1 + T_SYN) ** -1.1)}
    write_plot_data(tmp_path / "plot.csv", series)
    write_svg(tmp_path / "plot.svg", series, title="decay")
    rows = list(csv.reader(open(tmp_path / "plot.csv")))
    assert rows[0] == ["label", "log1p_t", "log_norm"] and len(rows) == 27
    svg = (tmp_path / "plot.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 2


def test_series_csv(tmp_path):
    recs = [remainder_from_fields(t, 0, np.linspace(-1, 1, 11), np.full(10, 1 / (1 + t)),
                                  np.zeros(10) + 1e-3) for t in T_SYN]
    DecaySeries(recs, 0.5, 0).to_csv(tmp_path / "n.csv")
    head = (tmp_path / "n.csv").read_text().splitlines()[0]
    assert head == "t,linf_P,linf_P_x,linf_Q,l2_P,l2_P_x,l2_P_xx,l2_Q,l2_Q_x,l2_Q_xx"
