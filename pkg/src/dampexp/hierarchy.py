"""Correction hierarchy: source assembly and two independent linear solvers.

Each correction G_i (the antiderivative of the density correction rho_i)
solves

    (p'(rho_bar) G_i')' + a (xi G_i)' + c1_i G_i = c2_i G_{i-1} - h_i'

with a = (1+lam)/2, decaying at both ends.  The source h_i collects the
Taylor coefficients of p(rho~) and m~^2/rho~ at order (1+t)^(-i sigma) plus
the terms coming from the time derivative of the previous momentum
correction.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import roots_jacobi

from .core import DampexpError, DomainError, HierarchyConstants, SolverError, \
    hierarchy_constants, k_thresholds
from .fd import diff, diff_matrix, trapezoid_weights
from .profiles import FD_ORDER, WaveProfile

logger = logging.getLogger(__name__)


class DivergenceError(SolverError):
    """The Fourier fixed-point map failed to contract."""


class DegenerateConstantError(SolverError):
    """c1_i vanishes, so the mass constraint cannot fix the correction."""


@dataclass(frozen=True)
class GaussianWeight:
    """Weight exp(-rate * xi**2) factored out of every correction.

    Tabulating G_i / weight instead of G_i keeps relative precision in the
    Gaussian tails, where the polynomial growth of the deeper sources would
    otherwise amplify round-off from one level to the next.
    """

    rate: float

    def __call__(self, xi):
        return np.exp(-self.rate * np.asarray(xi) ** 2)


def default_weight(profile: WaveProfile, fraction=0.5, law=None):
    """Half of the slowest Gaussian tail rate a / (2 p'(rho_+-)) of the profile."""
    law = law or profile.law
    p = profile.params
    c2_max = max(float(law.derivative(p.rho_minus, 1)), float(law.derivative(p.rho_plus, 1)))
    return GaussianWeight(fraction * p.a / (2.0 * c2_max))


@dataclass
class CorrectionLevel:
    i: int
    G: np.ndarray
    rho: np.ndarray
    drho: np.ndarray
    m: np.ndarray
    dm: np.ndarray
    residual: float
    mass: float
    mass_target: float
    free_mass: float = float("nan")
    multiplier: float = 0.0
    far_field: float = 0.0
    method: str = "colloc"
    # weighted tables: G = w g, rho = w r, rho' = w dr, m = w mu
    weight: GaussianWeight = field(default=None, repr=False)
    g: np.ndarray = field(default=None, repr=False)
    r: np.ndarray = field(default=None, repr=False)
    mu: np.ndarray = field(default=None, repr=False)

    @property
    def chain_error(self):
        """Mismatch of the unconstrained mass against the chained target."""
        mass = self.mass if math.isnan(self.free_mass) else self.free_mass
        return abs(mass - self.mass_target)


@dataclass
class RhsBundle:
    i: int
    h: np.ndarray
    h_tilde: np.ndarray
    h1: dict
    h2: dict
    h3: dict
    G_prev: np.ndarray
    mass_prev: float
    rhs: np.ndarray
    weight: GaussianWeight = field(default=None, repr=False)
    rhs_scaled: np.ndarray = field(default=None, repr=False)


@dataclass
class FourierReport:
    sweeps: int
    distances: list
    contraction: list
    converged: bool


@dataclass
class CorrectionSet:
    profile: WaveProfile
    constants: HierarchyConstants
    levels: list = field(default_factory=list)
    method: str = "colloc"
    fourier: dict = field(default_factory=dict)
    cross_check: dict = field(default_factory=dict)

    @property
    def order(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i - 1]

    def masses(self):
        return [lv.mass for lv in self.levels]

    def mass_chain_errors(self):
        return [lv.chain_error for lv in self.levels]

    def to_csv(self, directory):
        paths = []
        xi = self.profile.xi
        for lv in self.levels:
            path = f"{directory}/correction_{lv.i}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["xi", f"G_{lv.i}", f"rho_{lv.i}", f"m_{lv.i}"])
                for row in zip(xi, lv.G, lv.rho, lv.m):
                    w.writerow([repr(float(v)) for v in row])
            paths.append(path)
        side = f"{directory}/corrections.json"
        with open(side, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        paths.append(side)
        return paths

    def summary(self):
        return {
            "order": self.order,
            "method": self.method,
            "levels": [
                {"i": lv.i, "residual": lv.residual, "mass": lv.mass,
                 "free_mass": None if math.isnan(lv.free_mass) else lv.free_mass,
                 "mass_target": lv.mass_target, "multiplier": lv.multiplier,
                 "far_field": lv.far_field}
                for lv in self.levels
            ],
            "fourier": {str(i): {"sweeps": r.sweeps, "distances": r.distances,
                                 "contraction": r.contraction, "converged": r.converged}
                        for i, r in self.fourier.items()},
            "cross_check": {str(i): v for i, v in self.cross_check.items()},
        }


# ---------------------------------------------------------------------------
# Taylor sums


def compositions(n, j):
    """Ordered tuples (l_1, ..., l_j) of positive integers summing to n."""
    if j <= 0 or n < j:
        return
    for cuts in combinations(range(1, n), j - 1):
        bounds = (0,) + cuts + (n,)
        yield tuple(bounds[r + 1] - bounds[r] for r in range(j))


def _comp_sum(n, j, rho, m=None, n_m=0):
    """Sum over compositions of n into j parts of m_{l1}..m_{l n_m} rho_{..}..."""
    total = 0.0
    for parts in compositions(n, j):
        term = 1.0
        for r, l in enumerate(parts):
            term = term * (m[l] if r < n_m else rho[l])
        total = total + term
    return total


def momentum_from_G(i, G, lam, xi, G_xi=None):
    """m_i = (i sigma - (1+lam)) G_i + a (xi G_i)', i.e. (i sigma - a) G_i + a xi G_i'."""
    sigma = 1.0 - float(lam)
    a = 0.5 * (1.0 + float(lam))
    if G_xi is None:
        G_xi = diff(G, xi[1] - xi[0], 1, FD_ORDER)
    return (i * sigma - a) * G + a * xi * G_xi


def _scaled_tables(levels, weight, xi):
    """Weighted rho_l and m_l tables, rebuilt if a level used another weight."""
    r, mu = {}, {}
    w = weight(xi)
    for lv in levels:
        if lv.weight == weight and lv.r is not None:
            r[lv.i], mu[lv.i] = lv.r, lv.mu
        else:
            r[lv.i], mu[lv.i] = lv.rho / w, lv.m / w
    return r, mu


def assemble_rhs(i, profile: WaveProfile, levels, law=None, constants=None,
                 xi_momentum_sign=-1, weight=None):
    """Source terms for correction ``i`` from the profile and ``levels[:i-1]``.

    Every product is formed from weighted tables (see :class:`GaussianWeight`)
    and the returned arrays are multiplied back.  ``xi_momentum_sign`` is the
    sign of the a xi m_{i-1} term in the i >= 2 source; the default -1 is the
    sign under which the expansion residual drops by one order per correction,
    +1 is kept for comparison.
    """
    if i < 1:
        raise DomainError("correction index starts at 1")
    if len(levels) < i - 1:
        raise DampexpError(f"correction {i} needs {i - 1} previous levels, got {len(levels)}")
    law = law or profile.law
    params = profile.params
    lam = float(params.lam)
    a = params.a
    sigma = params.sigma
    if constants is None or constants.order < i:
        constants = hierarchy_constants(lam, i)
    weight = weight or default_weight(profile, law=law)
    kappa = weight.rate
    xi = profile.xi
    h = profile.grid.h
    W = weight(xi)
    rho_bar = profile.rho
    Pi = law.derivative(rho_bar, 1) * profile.drho / W  # weighted pressure slope

    h1, h2, h3 = {}, {}, {}
    if i == 1:
        g_prev = Pi / (1.0 + lam)
        mass_prev = (float(law(params.rho_plus)) - float(law(params.rho_minus))) / (1.0 + lam)
        eta_t = a * xi * Pi + W * Pi**2 / rho_bar
        eta = eta_t
    else:
        r, mu = _scaled_tables(levels[: i - 1], weight, xi)
        prev = levels[i - 2]
        g_prev = prev.G / W if prev.g is None or prev.weight != weight else prev.g
        mass_prev = prev.mass
        for j in range(2, i + 1):
            coef = law.derivative(rho_bar, j) / math.factorial(j)
            h1[j] = coef * W ** (j - 1) * _comp_sum(i, j, r)
        for j in range(1, i):
            s_rho = _comp_sum(i - 1, j, r)
            s_m = _comp_sum(i - 1, j, r, mu, 1)
            h2[j] = (-1) ** j * (W ** (j + 1) * Pi**2 / rho_bar ** (j + 1) * s_rho
                                 + 2 * W**j * Pi / rho_bar**j * s_m)
        for j in range(2, i):
            h3[j] = (-1) ** j * W ** (j - 1) / rho_bar ** (j - 1) * _comp_sum(i - 1, j, r, mu, 2)
        eta_t = np.zeros_like(xi)
        for part in (h1, h2, h3):
            for v in part.values():
                eta_t = eta_t + v
        eta_t = eta_t + xi_momentum_sign * a * xi * mu[i - 1]
        eta = eta_t - a * (i * sigma - 1) * xi * g_prev
    # (w eta)' = w (eta' - 2 kappa xi eta)
    rhs_s = constants.c2_(i) * g_prev - (diff(eta, h, 1, FD_ORDER) - 2 * kappa * xi * eta)
    return RhsBundle(i, W * eta, W * eta_t,
                     {j: W * v for j, v in h1.items()},
                     {j: W * v for j, v in h2.items()},
                     {j: W * v for j, v in h3.items()},
                     W * g_prev, mass_prev, W * rhs_s, weight, rhs_s)


def _operator(profile: WaveProfile, c1, law=None):
    """Discretized left side of the correction equation acting on G."""
    law = law or profile.law
    xi = profile.xi
    h = profile.grid.h
    n = xi.size
    a = profile.params.a
    p1 = law.derivative(profile.rho, 1)
    p2 = law.derivative(profile.rho, 2)
    D1 = diff_matrix(n, h, 1, FD_ORDER)
    D2 = diff_matrix(n, h, 2, FD_ORDER)
    return (sp.diags(p1) @ D2 + sp.diags(p2 * profile.drho + a * xi) @ D1
            + sp.identity(n) * (a + c1)).tocsr()


def _scaled_operator(profile: WaveProfile, c1, kappa, law=None):
    """The same operator conjugated by the weight: (L (w g)) / w."""
    law = law or profile.law
    xi = profile.xi
    h = profile.grid.h
    n = xi.size
    a = profile.params.a
    p1 = law.derivative(profile.rho, 1)
    B = law.derivative(profile.rho, 2) * profile.drho + a * xi
    D1 = diff_matrix(n, h, 1, FD_ORDER)
    D2 = diff_matrix(n, h, 2, FD_ORDER)
    c0 = p1 * (4 * kappa**2 * xi**2 - 2 * kappa) - 2 * kappa * xi * B + a + c1
    return (sp.diags(p1) @ D2 + sp.diags(B - 4 * kappa * xi * p1) @ D1 + sp.diags(c0)).tocsr()


def _level_from_scaled(i, g, weight, profile, mass_target, method, **extra):
    params = profile.params
    h = profile.grid.h
    xi = profile.xi
    kappa = weight.rate
    W = weight(xi)
    dg = diff(g, h, 1, FD_ORDER)
    d2g = diff(g, h, 2, FD_ORDER)
    r = dg - 2 * kappa * xi * g
    # (w r)' / w with r' = g'' - 2 kappa g - 2 kappa xi g'
    dr = d2g - 2 * kappa * g - 2 * kappa * xi * dg - 2 * kappa * xi * r
    mu = (i * params.sigma - params.a) * g + params.a * xi * r
    dmu = i * params.sigma * r + params.a * xi * dr
    G = W * g
    mass = float(trapezoid_weights(xi.size, h) @ G)
    far = float(np.max(np.abs(G[np.abs(xi) >= 0.95 * profile.grid.L])))
    return CorrectionLevel(i, G, W * r, W * dr, W * mu, W * dmu, extra.pop("residual", float("nan")),
                           mass, mass_target, far_field=far, method=method, weight=weight,
                           g=g, r=r, mu=mu, **extra)


def _dirichlet(A):
    A = A.tolil()
    n = A.shape[0]
    for row in (0, n - 1):
        A[row, :] = 0
        A[row, row] = 1.0
    return A.tocsr()


def _lu(K, i):
    try:
        return spla.splu(K.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"collocation system for G_{i} is singular: {exc}") from exc


def _condition_estimate(K, lu):
    inv = spla.LinearOperator(K.shape, matvec=lu.solve, rmatvec=lambda v: lu.solve(v, "T"),
                              dtype=float)
    return float(spla.onenormest(K) * spla.onenormest(inv))


def solve_correction_collocation(i, rhs: RhsBundle, profile: WaveProfile, constants,
                                 law=None, hier_tol=1e-8):
    """Bordered finite-difference solve with Dirichlet ends and the mass constraint.

    The unknown is the weighted table g = G / w.  The multiplier column is a
    localized Gaussian; because the mass relation already follows from the
    equation when c1_i < 0, the multiplier measures discrete inconsistency
    only.  The unbordered Dirichlet solution is also computed and its mass is
    reported as ``free_mass``, an independent check of the mass chain.
    """
    c1 = constants.c1_(i)
    c2 = constants.c2_(i)
    if c1 == 0:
        raise DegenerateConstantError(f"c1_{i} = 0 for lam={constants.lam}")
    weight = rhs.weight or default_weight(profile, law=law)
    xi = profile.xi
    h = profile.grid.h
    n = xi.size
    W = weight(xi)
    f = rhs.rhs_scaled if rhs.rhs_scaled is not None else rhs.rhs / W
    f = f.copy()
    f[0] = f[-1] = 0.0
    A = _dirichlet(_scaled_operator(profile, c1, weight.rate, law))
    b = np.exp(-0.5 * xi**2)
    b[0] = b[-1] = 0.0
    q = trapezoid_weights(n, h) * W
    mass_target = c2 / c1 * rhs.mass_prev
    K = sp.bmat([[A, sp.csr_matrix(b[:, None])], [sp.csr_matrix(q[None, :]), None]]).tocsc()
    lu = _lu(K, i)
    sol = lu.solve(np.append(f, mass_target))
    if not np.all(np.isfinite(sol)):
        raise SolverError(f"collocation system for G_{i} is ill-conditioned",
                          condition=_condition_estimate(K, lu))
    g, mult = sol[:n], float(sol[n])
    free = _lu(A, i).solve(f)
    res_g = W * (A @ g - f)
    res = float(np.sqrt(h * np.sum(res_g[1:-1] ** 2)))
    rhs_norm = float(np.sqrt(h * np.sum(rhs.rhs**2)))
    if res > hier_tol * max(1.0, rhs_norm):
        raise SolverError(f"collocation residual {res:.2e} for G_{i} above tolerance",
                          residual=res, condition=_condition_estimate(K, lu))
    return _level_from_scaled(i, g, weight, profile, mass_target, "colloc", residual=res,
                              free_mass=float(q @ free), multiplier=mult)


# ---------------------------------------------------------------------------
# Fourier fixed-point solver


class _KernelQuadrature:
    """Quadrature for F(eta) = -(i/a) int_0^eta (s/eta)^beta e^{-c2(eta^2-s^2)/(2a)} g^(s) ds.

    Panels end at the FFT frequencies; the first panel carries the s^beta
    weight exactly via Gauss-Jacobi nodes (which cluster at s = 0).
    """

    def __init__(self, eta, beta, a, c2, nodes_per_panel=16):
        self.eta = eta
        K = eta.size
        xg, wg = np.polynomial.legendre.leggauss(nodes_per_panel)
        xj, wj = roots_jacobi(nodes_per_panel, 0.0, beta)
        s_list, w_list, panel = [], [], []
        for k in range(1, K):
            lo, hi = eta[k - 1], eta[k]
            half = 0.5 * (hi - lo)
            if k == 1:
                s = lo + half * (1 + xj)
                # weight absorbs s^beta, the rest of the integrand is regular
                w = wj * half ** (beta + 1)
            else:
                s = lo + half * (1 + xg)
                w = wg * half * s**beta
            s_list.append(s)
            w_list.append(w)
            panel.append(np.full(s.size, k))
        self.s = np.concatenate(s_list) if s_list else np.zeros(0)
        self.w = np.concatenate(w_list) if w_list else np.zeros(0)
        self.panel = np.concatenate(panel) if panel else np.zeros(0, int)
        # kernel matrix (target k, node q) including eta^-beta and the Gaussian factor
        E = eta[:, None]
        S = self.s[None, :]
        active = self.panel[None, :] <= np.arange(K)[:, None]
        expo = np.where(active, -c2 * (E**2 - S**2) / (2 * a), -np.inf)
        ker = np.exp(expo) / np.where(E > 0, E, 1.0) ** beta
        ker[0, :] = 0.0
        self.matrix = -(1j / a) * ker * self.w[None, :]

    def apply(self, g_hat_nodes):
        return self.matrix @ g_hat_nodes


def _dft_matrix(s, xi, weights):
    """Rows give the direct transform sum_j w_j f_j exp(-i s xi_j) at each s."""
    return np.exp(-1j * np.outer(s, xi)) * weights[None, :]


def solve_correction_fourier(i, rhs: RhsBundle, profile: WaveProfile, constants, law=None,
                             n_max=60, tol=1e-13, nodes_per_panel=12, cutoff=1e-10):
    """Fixed-point iteration in Fourier space with the variable coefficient lagged.

    Returns ``(level, report)``.  The transformed unknown has zero mean:
    G~_1 = G_1 + P'/2, and G~_i = G_i - (c2_i/c1_i) G_{i-1} for i >= 2.
    """
    law = law or profile.law
    c1 = constants.c1_(i)
    c2 = constants.c2_(i)
    if c1 == 0:
        raise DegenerateConstantError(f"c1_{i} = 0 for lam={constants.lam}")
    if c1 > 0:
        raise DomainError(f"Fourier kernel needs c1_{i} < 0, got {c1}")
    params = profile.params
    a = params.a
    xi = profile.xi
    h = profile.grid.h
    n_per = xi.size - 1  # periodic sample count (drop the duplicate right end)
    xs = xi[:n_per]
    wq = np.full(n_per, h)
    c2_far = float(law.derivative(params.rho_plus, 1))
    p1 = law.derivative(profile.rho, 1)
    coef = (c2_far - p1)[:n_per]
    Pxi = profile.dP

    if i == 1:
        shift = 0.5 * Pxi
        h_tilde = 0.5 * p1 * diff(Pxi, h, 1, FD_ORDER) + 0.5 * a * xi * Pxi - rhs.h
    else:
        r = c2 / c1
        Gp = rhs.G_prev
        shift = -r * Gp
        h_tilde = -r * (p1 * diff(Gp, h, 1, FD_ORDER) + a * xi * Gp) - rhs.h
    h_tilde = h_tilde[:n_per]

    beta = -c1 / a
    eta_all = 2 * np.pi * np.fft.rfftfreq(n_per, d=h)
    # frequencies beyond which the forcing spectrum is negligible
    spec = np.abs(np.fft.rfft(h_tilde))
    keep = np.nonzero(spec > cutoff * max(spec.max(), 1e-300))[0]
    K = min(eta_all.size - 1, (keep.max() + 8) if keep.size else 2)
    K = max(K, 2)
    eta = eta_all[: K + 1]
    quad = _KernelQuadrature(eta, beta, a, c2_far, nodes_per_panel)
    phase_L = np.exp(-1j * eta * xs[0])
    dft = _dft_matrix(quad.s, xs, wq)
    dft_h = dft @ h_tilde

    def synth(F, deriv=0):
        # F is the continuous transform about xi = 0; shift to DFT indexing
        X = np.zeros(eta_all.size, dtype=complex)
        X[: K + 1] = F * (1j * eta) ** deriv * np.conj(phase_L)
        return np.fft.irfft(X, n=n_per) / h

    Gt = np.zeros(n_per)
    dGt = np.zeros(n_per)
    distances, factors = [], []
    converged = False
    for sweep in range(1, n_max + 1):
        g_nodes = dft_h + dft @ (coef * dGt)
        F = quad.apply(g_nodes)
        F[0] = 0.0
        Gn = synth(F)
        dGn = synth(F, 1)
        d = float(np.sqrt(h * np.sum((Gn - Gt) ** 2)))
        distances.append(d)
        if len(distances) >= 2 and distances[-2] > 0:
            factors.append(d / distances[-2])
        Gt, dGt = Gn, dGn
        if len(factors) >= 2 and factors[-1] >= 1 and factors[-2] >= 1:
            raise DivergenceError(f"Fourier iteration for G_{i} diverges "
                                  f"(contraction {factors[-2]:.3f}, {factors[-1]:.3f})")
        if d < tol * max(1.0, float(np.sqrt(h * np.sum(Gn**2)))):
            converged = True
            break
    G = np.append(Gt, Gt[0]) - shift
    G[-1] = Gt[0] - shift[-1]
    mass_target = c2 / c1 * rhs.mass_prev
    # residual of the same discrete operator the collocation solver uses
    res = (_operator(profile, c1, law) @ G - rhs.rhs)[1:-1]
    weight = rhs.weight or default_weight(profile, law=law)
    level = _level_from_scaled(i, G / weight(xi), weight, profile, mass_target, "fourier",
                               residual=float(np.sqrt(h * np.sum(res**2))))
    return level, FourierReport(sweep, distances, factors, converged)


# ---------------------------------------------------------------------------


def chi_norm(f, l, h, xi=None):
    """Weighted norm sqrt(sum_{0<=s,r<=l} ||xi^s d^r f||^2) by trapezoid quadrature."""
    f = np.asarray(f, dtype=float)
    if l < 0 or l > 4:
        raise DomainError("chi_norm supports 0 <= l <= 4 discrete derivatives")
    n = f.size
    if xi is None:
        xi = h * (np.arange(n) - (n - 1) / 2.0)
    w = trapezoid_weights(n, h)
    total = 0.0
    for r in range(l + 1):
        dr = f if r == 0 else diff(f, h, r, FD_ORDER)
        for s in range(l + 1):
            total += float(w @ (xi**s * dr) ** 2)
    return math.sqrt(total)


def build_corrections(profile: WaveProfile, k=None, method="colloc", law=None,
                      xi_momentum_sign=-1, fourier_kwargs=None):
    """Build corrections 1..k (default k0(lam)) with the chosen solver.

    ``method="both"`` chains the collocation results and cross-checks each
    level with the Fourier iteration on the same source bundle.
    """
    lam = float(profile.params.lam)
    weight = default_weight(profile, law=law)
    if k is None:
        k = k_thresholds(profile.params.lam)[1]
    if method not in ("colloc", "fourier", "both"):
        raise DomainError(f"unknown hierarchy method {method!r}")
    cs = CorrectionSet(profile, hierarchy_constants(lam, max(k, 1)), [], method)
    if k == 0:
        return cs
    fourier_kwargs = fourier_kwargs or {}
    for i in range(1, k + 1):
        bundle = assemble_rhs(i, profile, cs.levels, law, cs.constants, xi_momentum_sign, weight)
        if method == "fourier":
            level, rep = solve_correction_fourier(i, bundle, profile, cs.constants, law,
                                                  **fourier_kwargs)
            cs.fourier[i] = rep
        else:
            level = solve_correction_collocation(i, bundle, profile, cs.constants, law)
            if method == "both":
                flevel, rep = solve_correction_fourier(i, bundle, profile, cs.constants, law,
                                                       **fourier_kwargs)
                cs.fourier[i] = rep
                w = trapezoid_weights(profile.xi.size, profile.grid.h)
                dist = float(np.sqrt(w @ (level.G - flevel.G) ** 2))
                cs.cross_check[i] = {"l2_distance": dist,
                                     "l2_norm": float(np.sqrt(w @ level.G**2))}
        cs.levels.append(level)
    return cs
