"""Self-similar diffusion-wave profile of the generalized porous media equation.

In xi = x / (1+t)**a, a = (1+lam)/2, the profile solves the two-point problem

    (p(rho))'' + a * xi * rho' = 0,    rho(-L) = rho_minus,  rho(L) = rho_plus,

and the associated momentum is m(x, t) = (1+t)**(-sigma/2) * M(xi) with
M = -(p(rho))'.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import cumulative_simpson
from scipy.special import erf

from .core import DampexpError, Params, PressureLaw, SolverError, XiGrid
from .fd import diff, diff_matrix, trapezoid_weights

logger = logging.getLogger(__name__)

FD_ORDER = 4


class TruncationError(DampexpError):
    """The xi-window is too narrow: the profile is not flat at its ends."""

    code = 3


@dataclass(frozen=True)
class WaveProfile:
    params: Params
    law: PressureLaw
    grid: XiGrid
    rho: np.ndarray
    drho: np.ndarray
    d2rho: np.ndarray
    d3rho: np.ndarray
    M: np.ndarray
    residual: np.ndarray
    newton_iterations: int = 0
    monotone: bool = True

    @property
    def xi(self):
        return self.grid.nodes

    @property
    def P(self):
        """Pressure along the profile."""
        return self.law(self.rho)

    @property
    def dP(self):
        """xi-derivative of the pressure by the chain rule.

        Equals -M up to differencing error but keeps relative precision in
        the tails, where M carries an absolute round-off floor.
        """
        return self.law.derivative(self.rho, 1) * self.drho

    @property
    def dM(self):
        # M' = -(p(rho))'' = a xi rho' by the profile equation
        return self.params.a * self.xi * self.drho

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["xi", "rho_bar", "drho", "d2rho", "M_bar"])
            for row in zip(self.xi, self.rho, self.drho, self.d2rho, self.M):
                w.writerow([repr(float(v)) for v in row])


def erf_profile(params: Params, c2, xi):
    """Exact profile for the linear law p = c2 * rho."""
    d = params.rho_plus - params.rho_minus
    return params.rho_minus + 0.5 * d * (1.0 + erf(np.sqrt(params.a / (2.0 * c2)) * xi))


def _residual(rho, law, xi, h, a):
    return diff(law(rho), h, 2, FD_ORDER) + a * xi * diff(rho, h, 1, FD_ORDER)


def solve_wave(params: Params, law: PressureLaw, grid: XiGrid, tol=1e-9, max_iter=50,
               flat_tol=1e-10, initial=None):
    """Solve the profile equation by damped Newton iteration on 4th-order differences.

    ``initial`` overrides the default erf-shaped starting ramp.
    """
    xi = grid.nodes
    h = grid.h
    a = params.a
    rm, rp = params.rho_minus, params.rho_plus
    n = xi.size

    if rm == rp:
        z = np.zeros(n)
        rho = np.full(n, rm)
        return WaveProfile(params, law, grid, rho, z, z.copy(), z.copy(), z.copy(), z.copy(), 0)

    if initial is None:
        c2_mid = float(law.derivative(0.5 * (rm + rp), 1))
        rho = erf_profile(params, c2_mid, xi)
    else:
        rho = np.array(initial, dtype=float)
    rho[0], rho[-1] = rm, rp

    D1 = diff_matrix(n, h, 1, FD_ORDER)
    D2 = diff_matrix(n, h, 2, FD_ORDER)
    adv = sp.diags(a * xi) @ D1
    inner = slice(1, n - 1)

    res = _residual(rho, law, xi, h, a)
    rnorm = np.max(np.abs(res[inner]))
    it = 0
    while rnorm > 0.1 * tol:
        if it >= max_iter:
            raise SolverError(f"profile Newton did not converge in {max_iter} iterations",
                              residual=rnorm)
        J = (D2 @ sp.diags(law.derivative(rho, 1)) + adv).tocsr()[inner, :][:, inner]
        step = spla.spsolve(J.tocsc(), -res[inner])
        theta = 1.0
        while True:
            trial = rho.copy()
            trial[inner] += theta * step
            try:
                tres = _residual(trial, law, xi, h, a)
                tnorm = np.max(np.abs(tres[inner]))
            except DampexpError:
                tnorm = np.inf
            if tnorm < rnorm or theta < 1e-4:
                break
            theta *= 0.5
        if not np.isfinite(tnorm):
            raise SolverError("profile Newton left the admissible density range",
                              residual=rnorm)
        rho, res, it = trial, tres, it + 1
        if tnorm >= rnorm and rnorm <= tol:
            break  # stalled at round-off below the tolerance
        rnorm = tnorm
        logger.debug("profile newton it=%d residual=%.3e", it, rnorm)

    if rnorm > tol:
        raise SolverError("profile residual above tolerance", residual=rnorm)

    drho_fd = diff(rho, h, 1, FD_ORDER)
    slope_ends = max(abs(drho_fd[0]), abs(drho_fd[-1]))
    if slope_ends > flat_tol:
        raise TruncationError(
            f"profile slope {slope_ends:.2e} at xi=+-{grid.L} exceeds {flat_tol:.0e}; enlarge L")

    p1 = law.derivative(rho, 1)
    p2 = law.derivative(rho, 2)
    p3 = law.derivative(rho, 3)
    drho = _relative_slope(drho_fd, p1, p2, xi, h, a)
    # higher derivatives from the equation instead of repeated differencing
    d2rho = -(p2 * drho**2 + a * xi * drho) / p1
    d3rho = -(3 * p2 * drho * d2rho + p3 * drho**3 + a * drho + a * xi * d2rho) / p1
    M = -diff(law(rho), h, 1, FD_ORDER)

    residual = res.copy()
    residual[0] = rho[0] - rm
    residual[-1] = rho[-1] - rp
    monotone = bool(np.all(np.sign(rp - rm) * np.diff(rho) >= -1e-14))
    if not monotone:
        logger.warning("diffusion-wave profile is not monotone")
    return WaveProfile(params, law, grid, rho, drho, d2rho, d3rho, M, residual, it, monotone)


def _relative_slope(drho_fd, p1, p2, xi, h, a):
    """Profile slope with small relative error in the Gaussian tails.

    Differencing rho leaves an absolute round-off floor in rho'.  Instead
    integrate (log rho')' = -(p'' rho' + a xi) / p' outward from xi = 0; the
    right side only needs absolute accuracy, so the tails keep full relative
    precision.  Falls back to the differenced slope if it changes sign.
    """
    c = xi.size // 2
    q0 = drho_fd[c]
    big = np.abs(drho_fd) > 1e-8 * np.max(np.abs(drho_fd))
    if q0 == 0 or np.any(np.sign(drho_fd[big]) != np.sign(q0)) or xi[c] != 0:
        return drho_fd
    f = (p2 * drho_fd + a * xi) / p1
    integral = np.empty_like(xi)
    integral[c:] = cumulative_simpson(f[c:], dx=h, initial=0.0)
    integral[: c + 1] = cumulative_simpson(f[: c + 1][::-1], dx=-h, initial=0.0)[::-1]
    return np.sign(q0) * np.exp(np.log(abs(q0)) - integral)


def momentum_factor(profile: WaveProfile, law: PressureLaw | None = None):
    """Tabulated M(xi) = -(p(rho))'."""
    if law is None or law == profile.law:
        return profile.M
    return -diff(law(profile.rho), profile.grid.h, 1, FD_ORDER)


def truncation_residual(profile: WaveProfile, order=6):
    """Residual of the continuous profile equation, estimated with a finer stencil.

    Unlike ``profile.residual`` (which vanishes to solver tolerance by
    construction) this measures how far the tabulated profile is from the
    exact solution.
    """
    h = profile.grid.h
    r = diff(profile.law(profile.rho), h, 2, order) + \
        profile.params.a * profile.xi * diff(profile.rho, h, 1, order)
    return r


@dataclass
class GaussianBoundReport:
    passed: bool
    C: float
    c: float
    per_quantity: dict
    note: str = ""

    def as_dict(self):
        return {"passed": self.passed, "C": self.C, "c": self.c,
                "per_quantity": self.per_quantity, "note": self.note}


def _tail_rate(xi, f, floor):
    """Gaussian rate fitted to the outer envelope of |f| on one side of 0."""
    order = np.argsort(-np.abs(xi))
    env = np.maximum.accumulate(np.abs(f[order]))[np.argsort(order)]
    mask = (np.abs(xi) >= 1.0) & (env > floor) & (env < 1e-2 * env.max())
    if mask.sum() < 8:
        return None
    slope = np.polyfit(xi[mask] ** 2, np.log(env[mask]), 1)[0]
    return -slope


def check_gaussian_bounds(profile: WaveProfile, C_max=10.0, floor_rel=1e-9):
    """Fit ``(C, c)`` with ``|f| <= C delta exp(-c xi^2)`` for the profile quantities."""
    params = profile.params
    delta = params.delta
    xi = profile.xi
    if delta == 0:
        return GaussianBoundReport(True, 0.0, np.inf, {}, "constant profile")
    dev = np.where(xi > 0, profile.rho - params.rho_plus, profile.rho - params.rho_minus)
    quantities = {"deviation": dev, "d1": profile.drho, "d2": profile.d2rho, "d3": profile.d3rho}
    per = {}
    passed = True
    Cs, cs = [], []
    for name, f in quantities.items():
        floor = floor_rel * max(delta, np.max(np.abs(f)))
        rates = []
        for side in (xi < 0, xi > 0):
            r = _tail_rate(xi[side], f[side], floor)
            if r is not None:
                rates.append(r)
        if not rates or min(rates) <= 0:
            per[name] = {"C": np.inf, "c": min(rates) if rates else float("nan"), "passed": False}
            passed = False
            continue
        c = min(rates)
        use = np.abs(f) > floor
        C = float(np.max(np.abs(f[use]) * np.exp(c * xi[use] ** 2)) / delta)
        ok = C <= C_max
        per[name] = {"C": C, "c": float(c), "passed": bool(ok)}
        passed &= ok
        Cs.append(C)
        cs.append(c)
    return GaussianBoundReport(bool(passed), max(Cs) if Cs else np.inf,
                               min(cs) if cs else float("nan"), per)


def mass_of_derivative(profile: WaveProfile):
    """Trapezoid quadrature of rho' over the window (should equal rho_+ - rho_-)."""
    return float(trapezoid_weights(profile.xi.size, profile.grid.h) @ profile.drho)
