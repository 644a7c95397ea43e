"""Remainders of simulated solutions against the expansion, and their decay rates.

The remainder of order k is P_k = rho - rho~_k, Q_k = m - m~_k.  Norms are
taken in physical x.  Decay exponents are least-squares slopes of
log(norm) against log(1+t), optionally after dividing by ln(1+t).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.stats import linregress

from .core import DampexpError, DomainError, k_thresholds
from .fd import diff

logger = logging.getLogger(__name__)

FIELDS = ("P", "P_x", "P_xx", "Q", "Q_x", "Q_xx")
LINF_FIELDS = ("P", "P_x", "Q")


# ---------------------------------------------------------------------------
# theoretical exponents


def baseline_rate(lam):
    """Exponent of ||rho - rho_bar||_inf for the diffusion wave alone."""
    lam = float(lam)
    if abs(lam - 1 / 7) < 1e-12:
        return -6 / 7
    return -0.75 * (1 + lam) if lam < 1 / 7 else lam - 1


def remainder_rate(lam, k, name="P", norm="linf"):
    """Expected decay exponent of a remainder norm at expansion order k.

    Two mechanisms compete: the first omitted expansion term, which carries
    (1+t)^(-(k+1) sigma) (an extra half sigma for the momentum), and the
    remainder bound at order k0.  The slower of the two is returned.  For
    k = 0 and the density in L-infinity this reproduces the three-branch
    baseline rate; for k = k0 it is the remainder bound itself.
    """
    lam = float(lam)
    a = 0.5 * (1 + lam)
    sigma = 1 - lam
    base, s = (name.split("_") + [""])[:2]
    s = len(s)
    if base == "P":
        omitted = -(k + 1) * sigma - s * a
        bound = -(s + 1) * a
    else:
        omitted = -(k + 1.5) * sigma - s * a
        bound = -1.0 - s * a
    if norm == "linf":
        bound -= 0.5 * a
    else:
        omitted += 0.5 * a
    return max(omitted, bound)


def log_branch(lam):
    """True when k(lambda) is an integer (the ln(1+t) branch)."""
    return k_thresholds(lam)[2]


# ---------------------------------------------------------------------------
# records


@dataclass
class RemainderRecord:
    """Remainder fields and norms at one time."""

    t: float
    k: int
    x: np.ndarray
    fields: dict
    l2: dict
    linf: dict
    resampled: bool = False
    dx: float = 0.0

    @property
    def P(self):
        return self.fields["P"]

    @property
    def Q(self):
        return self.fields["Q"]

    def sobolev_ok(self, rtol=1e-6):
        """Check ||f||_inf^2 <= ||f|| ||f_x|| for P, P_x and Q.

        The grid values are cell averages, so the bound is compared with a
        quadrature allowance of one cell.
        """
        pairs = (("P", "P_x"), ("P_x", "P_xx"), ("Q", "Q_x"))
        for f, df in pairs:
            lhs = np.max(np.abs(self.fields[f])) ** 2
            rhs = self.l2[f] * self.l2[df]
            slack = rtol * lhs + 2 * self.dx * np.max(np.abs(self.fields[f] * self.fields[df]))
            if lhs > rhs + slack:
                return False
        return True

    def norm(self, selector):
        """``selector`` is ``"linf:P"``, ``"l2:Q_x"`` and so on."""
        kind, name = selector.split(":")
        table = self.linf if kind == "linf" else self.l2
        return table[name]


def _uniform(x, rtol=1e-9):
    d = np.diff(x)
    return np.allclose(d, d[0], rtol=rtol, atol=0.0)


def remainder(snapshot, ev, k=None, shift=True):
    """Remainder of order ``k`` of a solver snapshot against an evaluator.

    The reference uses three-point Gauss cell averages of the expansion so
    that it matches the finite-volume unknowns.  A non-uniform snapshot grid
    is resampled with cubic interpolation and flagged.
    """
    import dataclasses

    from .solver import _gauss_average, frame_scale

    p = ev.params
    lam = float(p.lam)
    if not math.isnan(getattr(snapshot, "lam", math.nan)) and abs(snapshot.lam - lam) > 1e-14:
        raise DomainError(f"snapshot lambda {snapshot.lam} differs from evaluator lambda {lam}")
    if k is not None and k != ev.k:
        ev = dataclasses.replace(ev, k=k)
    if shift and getattr(snapshot, "x0", 0.0):
        ev = ev.with_shift(snapshot.x0)
    s = frame_scale(snapshot.frame, snapshot.t, lam)
    edges = np.asarray(snapshot.edges, dtype=float)
    rho = np.asarray(snapshot.rho, dtype=float)
    m = np.asarray(snapshot.m, dtype=float)
    resampled = False
    if not _uniform(edges):
        centers = 0.5 * (edges[1:] + edges[:-1])
        edges = np.linspace(edges[0], edges[-1], edges.size)
        new = 0.5 * (edges[1:] + edges[:-1])
        rho = CubicSpline(centers, rho)(new)
        m = CubicSpline(centers, m)(new)
        resampled = True
    xe = s * edges
    ref_rho = _gauss_average(lambda x: ev.evaluate(x, snapshot.t)[0], xe)
    ref_m = _gauss_average(lambda x: ev.evaluate(x, snapshot.t)[1], xe)
    return remainder_from_fields(snapshot.t, ev.k, xe, rho - ref_rho, m - ref_m, resampled)


def remainder_from_fields(t, k, edges, P, Q, resampled=False):
    """Build a record from remainder cell values on cells with the given edges."""
    edges = np.asarray(edges, dtype=float)
    x = 0.5 * (edges[1:] + edges[:-1])
    h = float(edges[1] - edges[0])
    fields = {"P": np.asarray(P, dtype=float), "Q": np.asarray(Q, dtype=float)}
    for base in ("P", "Q"):
        fields[base + "_x"] = diff(fields[base], h, 1)
        fields[base + "_xx"] = diff(fields[base], h, 2)
    l2 = {name: float(math.sqrt(h * np.sum(fields[name] ** 2))) for name in FIELDS}
    linf = {name: float(np.max(np.abs(fields[name]))) for name in LINF_FIELDS}
    return RemainderRecord(float(t), int(k), x, fields, l2, linf, resampled, h)


# ---------------------------------------------------------------------------
# decay fits


@dataclass(frozen=True)
class FitResult:
    exponent: float
    intercept: float
    r2: float
    log_flag: bool
    n_points: int
    theoretical: float | None = None
    min_r2: float = 0.98

    @property
    def low_confidence(self):
        return not (self.r2 >= self.min_r2)

    def as_dict(self):
        return {"exponent": self.exponent, "intercept": self.intercept, "r2": self.r2,
                "log_flag": self.log_flag, "n_points": self.n_points,
                "theoretical": self.theoretical, "low_confidence": self.low_confidence}


def fit_power_law(t, values, log_flag=False, t_min=10.0, t_max=None, min_points=8,
                  min_decades=2.0, theoretical=None, min_r2=0.98):
    """Least-squares slope of log(values) against log(1+t).

    With ``log_flag`` the values are divided by ln(1+t) first.  Only times
    with ``t_min <= t <= t_max`` enter the fit.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = t >= t_min
    if t_max is not None:
        keep &= t <= t_max
    t, v = t[keep], v[keep]
    if t.size < min_points:
        raise DomainError(f"decay fit needs >= {min_points} times in the window, got {t.size}")
    # windows like [10, 1e3] are "two decades"; count them in t unless t starts at 0
    lo = t.min() if t.min() > 0 else 1 + t.min()
    hi = t.max() if t.min() > 0 else 1 + t.max()
    if np.log10(hi / lo) < min_decades - 1e-9:
        raise DomainError(f"decay fit needs >= {min_decades} decades of time")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DomainError("norms must be positive and finite to fit a power law")
    lt = np.log1p(t)
    y = np.log(v)
    if log_flag:
        y = y - np.log(lt)
    fit = linregress(lt, y)
    r2 = float(fit.rvalue**2) if np.ptp(y) > 0 else 1.0
    if r2 < min_r2:
        logger.warning("low-confidence decay fit: R^2 = %.4f", r2)
    return FitResult(float(fit.slope), float(fit.intercept), r2, bool(log_flag), int(t.size),
                     theoretical, min_r2)


@dataclass
class DecaySeries:
    """Remainder records of one run at one expansion order."""

    records: list
    lam: float
    k: int
    t_min: float = 10.0

    @property
    def times(self):
        return np.array([r.t for r in self.records])

    def values(self, selector):
        return np.array([r.norm(selector) for r in self.records])

    @property
    def log_flag(self):
        return log_branch(self.lam)

    def theoretical(self, selector):
        kind, name = selector.split(":")
        return remainder_rate(self.lam, self.k, name, kind)

    def fit(self, selector="linf:P", log_flag=None, **kw):
        return fit_decay(self, selector, log_flag, **kw)

    def fits(self, log_flag=None):
        sels = [f"linf:{n}" for n in LINF_FIELDS] + [f"l2:{n}" for n in FIELDS]
        return {sel: self.fit(sel, log_flag) for sel in sels}

    def monotone(self, selector="linf:P", ripple=0.05):
        """Non-increasing after t_min up to the given relative ripple."""
        t = self.times
        v = self.values(selector)[t >= self.t_min]
        running = np.minimum.accumulate(v)
        return bool(np.all(v <= running * (1 + ripple)))

    def to_csv(self, path):
        sels = [f"linf:{n}" for n in LINF_FIELDS] + [f"l2:{n}" for n in FIELDS]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [s.replace(":", "_") for s in sels])
            for r in self.records:
                w.writerow([repr(r.t)] + [repr(r.norm(s)) for s in sels])


def fit_decay(series: DecaySeries, selector="linf:P", log_flag=None, t_min=None, **kw):
    """Fit the decay exponent of one norm of a series.

    ``log_flag=None`` enables the ln(1+t) division exactly when k(lambda)
    is an integer.  Returns a :class:`FitResult` carrying the theoretical
    exponent.
    """
    flag = series.log_flag if log_flag is None else bool(log_flag)
    return fit_power_law(series.times, series.values(selector), flag,
                         t_min=series.t_min if t_min is None else t_min,
                         theoretical=series.theoretical(selector), **kw)


# ---------------------------------------------------------------------------
# energy functional


@dataclass
class EnergyRecord:
    t: float
    y: np.ndarray  # potential at cell edges, y(left edge) = 0
    functional: float
    ftc_residual: float  # max |y_x + P|
    y_far: float  # y at the right edge (minus the remainder's mass)


@dataclass
class EnergySeries:
    records: list
    lam: float
    sup_at_tmin: bool
    late_slope: float | None
    mass_warning: bool

    @property
    def times(self):
        return np.array([r.t for r in self.records])

    @property
    def values(self):
        return np.array([r.functional for r in self.records])

    @property
    def bounded(self):
        return self.late_slope is None or self.late_slope <= 0.05


def energy_functional(records, lam, far_tol=1e-6):
    """Weighted energy of the remainder potential y on each record.

    y = -int_{-inf}^x P dr (exact on cell averages, evaluated at edges),
    y_x = -P and y_t = Q, and

        N(t) = ||y||^2 + sum_{i=0}^{2} (1+t)^{(i+1)(1+lam)} (||d^i Q||^2 + ||d^i P||^2).
    """
    lam = float(lam)
    out = []
    mass_warning = False
    for r in records:
        h = r.dx
        y = np.concatenate([[0.0], -np.cumsum(r.P) * h])
        ftc = float(np.max(np.abs(np.diff(y) / h + r.P))) if r.P.size else 0.0
        y_mid = 0.5 * (y[1:] + y[:-1])
        total = h * float(np.sum(y_mid**2))
        for i, (pn, qn) in enumerate((("P", "Q"), ("P_x", "Q_x"), ("P_xx", "Q_xx"))):
            total += (1 + r.t) ** ((i + 1) * (1 + lam)) * (r.l2[pn] ** 2 + r.l2[qn] ** 2)
        scale = max(float(np.max(np.abs(y))), 1e-300)
        if abs(y[-1]) > far_tol * max(scale, 1.0):
            mass_warning = True
        out.append(EnergyRecord(r.t, y, total, ftc, float(y[-1])))
    if mass_warning:
        logger.warning("remainder potential does not vanish at +inf; "
                       "the data carry extra mass, consider shift_x0")
    vals = np.array([e.functional for e in out])
    ts = np.array([e.t for e in out])
    sup_at_tmin = bool(vals.size and np.argmax(vals) == 0)
    late = None
    sel = ts >= ts.max() / 10 if ts.size else ts
    if ts.size and np.count_nonzero(sel) >= 3 and np.all(vals[sel] > 0):
        late = float(linregress(np.log1p(ts[sel]), np.log(vals[sel])).slope)
    return EnergySeries(out, lam, sup_at_tmin, late, mass_warning)


# ---------------------------------------------------------------------------
# rate study pipeline and threshold sweep


@dataclass
class RateStudy:
    """Remainder series at every order k = 0..k0 for one simulated run."""

    lam: float
    series: dict  # k -> DecaySeries
    run_manifest: dict
    k0: int

    def baseline(self, log_flag=False):
        return self.series[0].fit("linf:P", log_flag=log_flag)

    def corrected(self, log_flag=False):
        return self.series[self.k0].fit("linf:P", log_flag=log_flag)


def rate_study(lam, T=1000.0, snapshots=None, t_min=10.0, solver_options=None,
               profile_grid=None, law=None, rho_minus=1.0, rho_plus=1.05, orders=None):
    """Profile, hierarchy, simulation from the order-k0 expansion, and remainders."""
    from .core import Params, PressureLaw, recommended_grid
    from .expansion import ExpansionEvaluator
    from .hierarchy import build_corrections
    from .profiles import solve_wave
    from .solver import SimConfig, run

    law = law or PressureLaw.gamma_law()
    params = Params(lam, rho_minus, rho_plus)
    grid = profile_grid or recommended_grid(lam)
    prof = solve_wave(params, law, grid)
    k0 = k_thresholds(lam)[1]
    cs = build_corrections(prof, k0) if k0 > 0 else None
    if snapshots is None:
        snapshots = tuple(np.geomspace(t_min, T, 13))
    opts = dict(solver_options or {})
    cfg = SimConfig(params, law, T=T, snapshots=tuple(snapshots), **opts)
    ev_top = ExpansionEvaluator(prof, cs, k=k0)
    result = run(cfg, ev_top)
    series = {}
    for k in (orders if orders is not None else range(k0 + 1)):
        ev = ExpansionEvaluator(prof, cs, k=k)
        recs = [remainder(sn, ev) for sn in result.snapshots]
        series[k] = DecaySeries(recs, float(lam), k, t_min)
    return RateStudy(float(lam), series, result.manifest(), k0)


@dataclass
class SweepRow:
    lam: float
    k: float
    k0: int
    baseline: FitResult | None = None
    corrected: FitResult | None = None
    baseline_target: float = math.nan
    corrected_target: float = math.nan
    tol: float = 0.08
    error: str | None = None

    @property
    def baseline_pass(self):
        return self.baseline is not None and abs(self.baseline.exponent - self.baseline_target) <= self.tol

    @property
    def corrected_pass(self):
        # the corrected rate is a bound: it must be at least as fast as the target, within tol
        return self.corrected is not None and self.corrected.exponent <= self.corrected_target + self.tol

    def as_dict(self):
        return {
            "lambda": self.lam, "k": self.k, "k0": self.k0,
            "baseline_exponent": None if self.baseline is None else self.baseline.exponent,
            "baseline_r2": None if self.baseline is None else self.baseline.r2,
            "baseline_target": self.baseline_target,
            "baseline_pass": self.baseline_pass,
            "corrected_exponent": None if self.corrected is None else self.corrected.exponent,
            "corrected_r2": None if self.corrected is None else self.corrected.r2,
            "corrected_target": self.corrected_target,
            "corrected_pass": self.corrected_pass,
            "error": self.error,
        }


def _sweep_one(lam, kwargs):
    k, k0, _ = k_thresholds(lam)
    row = SweepRow(float(lam), float(k), k0, baseline_target=baseline_rate(lam),
                   corrected_target=remainder_rate(lam, k0, "P", "linf"),
                   tol=kwargs.pop("tol", 0.08))
    try:
        study = rate_study(lam, **kwargs)
        row.baseline = study.baseline()
        row.corrected = study.corrected(log_flag=log_branch(lam))
    except DampexpError as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    return row


@dataclass
class SweepTable:
    rows: list

    def as_records(self):
        return [r.as_dict() for r in self.rows]

    def to_csv(self, path):
        recs = self.as_records()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(recs[0]))
            w.writeheader()
            w.writerows(recs)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_records(), fh, indent=2)


def threshold_sweep(lams, workers=1, **pipeline):
    """Baseline and corrected exponents for each lambda; per-lambda failures are recorded.

    ``pipeline`` is passed to :func:`rate_study`.  With ``workers > 1`` the
    lambdas run in separate processes.
    """
    lams = [Fraction(l) if isinstance(l, Fraction) else float(l) for l in lams]
    jobs = [(lam, dict(pipeline)) for lam in lams]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, *zip(*jobs)))
    else:
        rows = [_sweep_one(lam, kw) for lam, kw in jobs]
    return SweepTable(rows)


# ---------------------------------------------------------------------------
# plot data


def write_plot_data(path, series: dict):
    """CSV of (label, log(1+t), log(norm)) rows for any plotting tool."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "log1p_t", "log_norm"])
        for label, (t, v) in series.items():
            for ti, vi in zip(t, v):
                w.writerow([label, repr(math.log1p(ti)), repr(math.log(vi))])


def write_svg(path, series: dict, width=640, height=420, title=""):
    """Self-contained log-log line plot of ``{label: (t, values)}``."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    pts = {lab: (np.log10(1 + np.asarray(t, float)), np.log10(np.asarray(v, float)))
           for lab, (t, v) in series.items()}
    xs = np.concatenate([p[0] for p in pts.values()])
    ys = np.concatenate([p[1] for p in pts.values()])
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = ys.min(), ys.max() if ys.max() > ys.min() else ys.min() + 1
    pad = 50

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad),
                height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">log10(1+t)</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">log10(norm)</text>']
    for j, (lab, (lx, ly)) in enumerate(pts.items()):
        c = colors[j % len(colors)]
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in (px(x, y) for x, y in zip(lx, ly)))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 16 * j}" fill="{c}" font-size="12">{lab}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
