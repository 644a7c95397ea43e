"""Truncated time-asymptotic expansion and its source residual.

With tau = 1 + t and xi = (x + x0) / tau**a,

    rho~_k = rho_bar(xi) + sum_i tau**(-i sigma) rho_i(xi)
    m~_k   = tau**(-sigma/2) M(xi) + sum_i tau**(-(i + 1/2) sigma) m_i(xi)

and the source residual is what is left after substituting (rho~_k, m~_k)
into the damped momentum equation.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.stats import linregress

from .core import DampexpError, DomainError
from .fd import diff, trapezoid_weights
from .hierarchy import CorrectionSet
from .profiles import FD_ORDER, WaveProfile

logger = logging.getLogger(__name__)


class PositivityError(DomainError):
    """The truncated expansion drops below the admissible density floor."""


class ResolutionError(DampexpError):
    """The x-grid does not resolve the wave at the requested time."""

    code = 2


class FitQualityError(DampexpError):
    """A decay fit has R^2 below the acceptance threshold."""


@dataclass(frozen=True)
class _Term:
    rho: np.ndarray
    m: np.ndarray
    drho: np.ndarray  # xi-derivative of rho
    dm: np.ndarray  # xi-derivative of m
    rho_power: float  # rho term carries tau**(-rho_power)
    m_power: float


@dataclass(frozen=True)
class ExpansionEvaluator:
    """Immutable evaluator of the order-``k`` expansion.

    ``x0`` shifts the similarity variable, xi = (x + x0) / (1+t)**a.
    """

    profile: WaveProfile
    corrections: CorrectionSet | None = None
    k: int = 0
    x0: float = 0.0
    positivity_floor: float = 0.5
    _terms: tuple = field(default=(), compare=False, repr=False)
    _splines: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        avail = 0 if self.corrections is None else self.corrections.order
        if self.k < 0 or self.k > avail:
            raise DomainError(f"order k={self.k} needs {self.k} corrections, {avail} available")
        prof = self.profile
        sigma = prof.params.sigma
        terms = [_Term(prof.rho, prof.M, prof.drho, prof.dM, 0.0, 0.5 * sigma)]
        for i in range(1, self.k + 1):
            lv = self.corrections[i]
            terms.append(_Term(lv.rho, lv.m, lv.drho, lv.dm, i * sigma, (i + 0.5) * sigma))
        xi = prof.xi
        splines = []
        for j, term in enumerate(terms):
            # clamped ends: every table is flat at the window edges
            r = CubicSpline(xi, term.rho, bc_type=((1, term.drho[0]), (1, term.drho[-1])))
            m = CubicSpline(xi, term.m, bc_type=((1, term.dm[0]), (1, term.dm[-1])))
            splines.append((r, m))
        object.__setattr__(self, "_terms", tuple(terms))
        object.__setattr__(self, "_splines", tuple(splines))

    @property
    def params(self):
        return self.profile.params

    def with_shift(self, x0):
        return dataclasses.replace(self, x0=float(x0))

    # -- evaluation -------------------------------------------------------

    def _guard(self, rho):
        p = self.params
        floor = self.positivity_floor * min(p.rho_minus, p.rho_plus)
        if np.any(rho < floor):
            raise PositivityError(
                f"expansion density {np.min(rho):.4g} below floor {floor:.4g}; "
                "reduce delta or the expansion order")
        return rho

    def evaluate(self, x, t):
        """Return ``(rho~_k, m~_k)`` at positions ``x`` and time ``t >= 0``."""
        if t < 0:
            raise DomainError("time must be non-negative")
        x = np.asarray(x, dtype=float)
        p = self.params
        tau = 1.0 + t
        xi = (x + self.x0) / tau**p.a
        L = self.profile.grid.L
        inside = np.abs(xi) <= L
        xin = xi[inside]
        rho = np.where(xi > 0, p.rho_plus, p.rho_minus).astype(float)
        m = np.zeros_like(xi)
        for term, (rs, ms) in zip(self._terms, self._splines):
            if term.rho_power == 0.0:
                rho[inside] = rs(xin)
            else:
                rho[inside] += tau ** (-term.rho_power) * rs(xin)
            m[inside] += tau ** (-term.m_power) * ms(xin)
        return self._guard(rho), m

    def on_nodes(self, t):
        """Expansion sampled at x = tau**a xi_j - x0 (no interpolation).

        Returns ``(x, rho, m, rho_t, m_t, m_xi)`` where the time derivatives
        are exact in t and ``m_xi`` is the xi-derivative of m~.
        """
        p = self.params
        a = p.a
        tau = 1.0 + t
        xi = self.profile.xi
        rho = np.zeros_like(xi)
        m = np.zeros_like(xi)
        rho_t = np.zeros_like(xi)
        m_t = np.zeros_like(xi)
        m_xi = np.zeros_like(xi)
        for term in self._terms:
            wr = tau ** (-term.rho_power)
            wm = tau ** (-term.m_power)
            rho += wr * term.rho
            m += wm * term.m
            m_xi += wm * term.dm
            # d/dt [tau^-q f(x / tau^a)] = tau^(-q-1) (-q f - a xi f')
            rho_t += wr / tau * (-term.rho_power * term.rho - a * xi * term.drho)
            m_t += wm / tau * (-term.m_power * term.m - a * xi * term.dm)
        x = tau**a * xi - self.x0
        return x, self._guard(rho), m, rho_t, m_t, m_xi


def source_direct(ev: ExpansionEvaluator, t, x=None, strict=False):
    """Momentum-equation residual of the expansion at time ``t``.

    Without ``x`` the residual is tabulated on the node-aligned grid
    x = (1+t)**a xi_j - x0, where x-differences are xi-differences scaled by
    (1+t)**(-a).  A user grid is sampled through the cubic interpolant and
    must resolve the narrowest profile feature by 10 points.

    Returns ``(x, S)``.
    """
    p = ev.params
    law = ev.profile.law
    tau = 1.0 + t
    if x is None:
        xg, rho, m, _, m_t, _ = ev.on_nodes(t)
        dx = tau**p.a * ev.profile.grid.h
    else:
        xg = np.asarray(x, dtype=float)
        dxs = np.diff(xg)
        dx = float(dxs[0])
        if not np.allclose(dxs, dx, rtol=1e-10, atol=0):
            raise DomainError("source_direct needs a uniform x-grid")
        width = feature_width(ev.profile)
        if dx > 0.1 * tau**p.a * width:
            msg = (f"dx={dx:.3g} under-resolves the wave (needs <= "
                   f"{0.1 * tau**p.a * width:.3g} at t={t})")
            if strict:
                raise ResolutionError(msg)
            logger.warning(msg)
        rho, m = ev.evaluate(xg, t)
        m_t = _m_t_interp(ev, xg, t)
    flux = m**2 / rho + law(rho)
    S = m_t + diff(flux, dx, 1, FD_ORDER) + tau ** (-float(p.lam)) * m
    return xg, S


def _m_t_interp(ev, x, t):
    p = ev.params
    tau = 1.0 + t
    xi = (x + ev.x0) / tau**p.a
    inside = np.abs(xi) <= ev.profile.grid.L
    out = np.zeros_like(xi)
    for term, (_, ms) in zip(ev._terms, ev._splines):
        f = ms(xi[inside])
        df = ms(xi[inside], 1)
        out[inside] += tau ** (-term.m_power - 1) * (-term.m_power * f - p.a * xi[inside] * df)
    return out


def feature_width(profile: WaveProfile):
    """Narrowest length scale of the profile, delta / max|rho'| (infinite when flat)."""
    s = float(np.max(np.abs(profile.drho)))
    return math.inf if s == 0 else profile.params.delta / s


def mass_defect(ev: ExpansionEvaluator, t):
    """rho~_t + m~_x on the node-aligned grid (vanishes up to differencing error)."""
    p = ev.params
    _, _, m, rho_t, _, _ = ev.on_nodes(t)
    dx = (1.0 + t) ** p.a * ev.profile.grid.h
    return rho_t + diff(m, dx, 1, FD_ORDER)


def predicted_source_rates(lam, k):
    """(L-infinity, L2) exponents of the source residual for expansion order k."""
    sigma = 1.0 - float(lam)
    a = 0.5 * (1.0 + float(lam))
    return -a - (k + 1) * sigma, -0.5 * a - (k + 1) * sigma


@dataclass
class ResidualScan:
    k: int
    times: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    slope_linf: float
    intercept_linf: float
    r2_linf: float
    slope_l2: float
    intercept_l2: float
    r2_l2: float
    predicted_linf: float
    predicted_l2: float
    tol: float = 0.05

    @property
    def passed(self):
        return (abs(self.slope_linf - self.predicted_linf) <= self.tol
                and abs(self.slope_l2 - self.predicted_l2) <= self.tol)

    def as_dict(self):
        return {
            "k": self.k,
            "slope_linf": self.slope_linf, "intercept_linf": self.intercept_linf,
            "r2_linf": self.r2_linf, "predicted_linf": self.predicted_linf,
            "slope_l2": self.slope_l2, "intercept_l2": self.intercept_l2,
            "r2_l2": self.r2_l2, "predicted_l2": self.predicted_l2,
            "tol": self.tol, "passed": self.passed,
        }

    def to_files(self, stem):
        with open(f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "L2_norm", "Linf_norm"])
            for row in zip(self.times, self.l2, self.linf):
                w.writerow([repr(float(v)) for v in row])
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
        return [f"{stem}.csv", f"{stem}.json"]


def log_times(t_min=10.0, t_max=1e4, n=13):
    return np.geomspace(t_min, t_max, n)


def residual_decay_scan(ev: ExpansionEvaluator, times=None, min_r2=0.99, tol=0.05):
    """Measure the decay of ||S||_inf and ||S||_2 over log-spaced times."""
    times = log_times() if times is None else np.asarray(times, dtype=float)
    if times.size < 8 or np.any(np.diff(times) <= 0):
        raise DomainError("residual scan needs >= 8 strictly increasing times")
    if (1 + times[-1]) / (1 + times[0]) < 100 * (1 - 1e-12):
        raise DomainError("residual scan times must span at least two decades of 1+t")
    p = ev.params
    h = ev.profile.grid.h
    n = ev.profile.xi.size
    l2, linf = [], []
    for t in times:
        _, S = source_direct(ev, t)
        dx = (1 + t) ** p.a * h
        l2.append(math.sqrt(float(trapezoid_weights(n, dx) @ S**2)))
        linf.append(float(np.max(np.abs(S))))
    l2, linf = np.array(l2), np.array(linf)
    if not (np.all(l2 > 0) and np.all(np.isfinite(l2)) and np.all(linf > 0)):
        raise FitQualityError("source residual vanished or is not finite; nothing to fit")
    lt = np.log1p(times)
    f_inf = linregress(lt, np.log(linf))
    f_2 = linregress(lt, np.log(l2))
    pred_inf, pred_2 = predicted_source_rates(p.lam, ev.k)
    scan = ResidualScan(ev.k, times, l2, linf, float(f_inf.slope), float(f_inf.intercept),
                        float(f_inf.rvalue**2), float(f_2.slope), float(f_2.intercept),
                        float(f_2.rvalue**2), pred_inf, pred_2, tol)
    if min(scan.r2_linf, scan.r2_l2) < min_r2:
        raise FitQualityError(
            f"residual decay fit has R^2={min(scan.r2_linf, scan.r2_l2):.4f} < {min_r2}")
    return scan


def shift_x0(x, rho0, ev: ExpansionEvaluator, decay_tol=1e-8):
    """Shift x0 that removes the mass difference between ``rho0`` and the expansion at t=0.

    ``x`` must be a uniform grid wide enough that rho0 has reached the
    far-field states at both ends.
    """
    p = ev.params
    if p.rho_plus == p.rho_minus:
        raise DomainError("shift is undefined when rho_+ == rho_-")
    x = np.asarray(x, dtype=float)
    rho0 = np.asarray(rho0, dtype=float)
    base = ev.with_shift(0.0) if ev.x0 else ev
    rt, _ = base.evaluate(x, 0.0)
    diffr = rho0 - rt
    if max(abs(diffr[0]), abs(diffr[-1])) > decay_tol:
        raise DomainError("rho0 does not match the far-field states at the grid ends")
    w = trapezoid_weights(x.size, x[1] - x[0])
    return float(w @ diffr) / (p.rho_plus - p.rho_minus)
