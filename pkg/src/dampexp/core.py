"""Parameters, pressure laws, exponent arithmetic and the self-similar grid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.interpolate import make_interp_spline


class DampexpError(Exception):
    """Base class for all errors raised by this package."""

    code = 1


class DomainError(DampexpError, ValueError):
    """An argument lies outside its admissible interval."""

    code = 2


class SolverError(DampexpError):
    """An iterative or linear solve did not produce an acceptable answer."""

    code = 3

    def __init__(self, message, residual=None, **context):
        super().__init__(message)
        self.residual = residual
        self.context = context


# ---------------------------------------------------------------------------
# pressure laws


def _falling_factorial(x, j):
    out = 1.0
    for r in range(j):
        out *= x - r
    return out


@dataclass(frozen=True)
class PressureLaw:
    """Smooth, strictly increasing pressure p(rho).

    ``kind`` is ``"gamma"`` (p = scale * rho**gamma), ``"linear"``
    (p = c2 * rho) or ``"tabulated"`` (degree-7 spline through user samples).
    """

    kind: str = "gamma"
    gamma: float = 1.4
    scale: float = 1.0
    c2: float = 1.0
    table_rho: tuple = ()
    table_p: tuple = ()
    _spline: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == "gamma":
            if self.gamma <= 0 or self.scale <= 0:
                raise DomainError("gamma-law needs gamma > 0 and scale > 0")
        elif self.kind == "linear":
            if self.c2 <= 0:
                raise DomainError("linear law needs c2 > 0")
        elif self.kind == "tabulated":
            r = np.asarray(self.table_rho, dtype=float)
            p = np.asarray(self.table_p, dtype=float)
            if r.size < 8 or r.shape != p.shape or np.any(np.diff(r) <= 0):
                raise DomainError("tabulated law needs >= 8 increasing samples")
            spl = make_interp_spline(r, p, k=7)
            dp = spl.derivative()(np.linspace(r[0], r[-1], 20 * r.size))
            if np.any(dp <= 0):
                raise DomainError("tabulated pressure is not strictly increasing")
            object.__setattr__(self, "_spline", spl)
        else:
            raise DomainError(f"unknown pressure law kind {self.kind!r}")

    @classmethod
    def gamma_law(cls, gamma=1.4, scale=1.0):
        return cls(kind="gamma", gamma=gamma, scale=scale)

    @classmethod
    def linear(cls, c2=1.0):
        return cls(kind="linear", c2=c2)

    @classmethod
    def tabulated(cls, rho: Sequence[float], p: Sequence[float]):
        return cls(kind="tabulated", table_rho=tuple(rho), table_p=tuple(p))

    @property
    def interval(self):
        """Admissible density interval (closed for tables, open at 0 otherwise)."""
        if self.kind == "tabulated":
            return (self.table_rho[0], self.table_rho[-1])
        return (0.0, math.inf)

    def check(self, rho):
        rho = np.asarray(rho, dtype=float)
        lo, hi = self.interval
        if self.kind == "tabulated":
            bad = (rho < lo) | (rho > hi)
            desc = f"[{lo}, {hi}]"
        else:
            bad = ~(rho > lo) | (rho > hi)
            desc = f"({lo}, inf)"
        if np.any(bad) or not np.all(np.isfinite(rho)):
            raise DomainError(f"density outside admissible interval {desc} for {self.kind} law")
        return rho

    def derivative(self, rho, n=0):
        """n-th derivative of p at ``rho`` (n = 0 gives p itself)."""
        rho = self.check(rho)
        if self.kind == "gamma":
            return self.scale * _falling_factorial(self.gamma, n) * rho ** (self.gamma - n)
        if self.kind == "linear":
            if n == 0:
                return self.c2 * rho
            if n == 1:
                return self.c2 * np.ones_like(rho)
            return np.zeros_like(rho)
        if n > 7:
            raise DomainError("tabulated law supports derivatives up to order 7")
        return self._spline.derivative(n)(rho) if n else self._spline(rho)

    def __call__(self, rho):
        return self.derivative(rho, 0)


def pressure_eval(law: PressureLaw, rho):
    """Return ``(p, p', p'')`` at ``rho``; raises :class:`DomainError` out of range."""
    return law.derivative(rho, 0), law.derivative(rho, 1), law.derivative(rho, 2)


# ---------------------------------------------------------------------------
# parameters and exponents


@dataclass(frozen=True)
class Params:
    lam: float
    rho_minus: float = 1.0
    rho_plus: float = 1.05

    def __post_init__(self):
        lam = self.lam
        if not (0 < lam < 1):
            raise DomainError(f"damping exponent must lie in (0, 1), got {lam}")
        if not (self.rho_minus > 0 and self.rho_plus > 0):
            raise DomainError("far-field densities must be positive")

    @property
    def sigma(self):
        return 1.0 - float(self.lam)

    @property
    def delta(self):
        return abs(self.rho_plus - self.rho_minus)

    @property
    def a(self):
        """Similarity exponent (1 + lambda) / 2, so xi = x / (1+t)**a."""
        return 0.5 * (1.0 + float(self.lam))


def k_thresholds(lam):
    """Return ``(k, k0, k_is_integer)`` for the damping exponent ``lam``.

    ``lam`` may be a :class:`fractions.Fraction`, in which case integrality of
    k = 3(1+lam) / (4(1-lam)) is decided exactly.
    """
    if isinstance(lam, (Fraction, int)):
        lam_q = Fraction(lam)
        if not (0 < lam_q < 1):
            raise DomainError(f"damping exponent must lie in (0, 1), got {lam}")
        kq = 3 * (1 + lam_q) / (4 * (1 - lam_q))
        is_int = kq.denominator == 1
        k = float(kq)
        k0 = int(kq) - 1 if is_int else math.floor(kq)
        return k, k0, is_int
    lam = float(lam)
    if not (0 < lam < 1):
        raise DomainError(f"damping exponent must lie in (0, 1), got {lam}")
    k = 3 * (1 + lam) / (4 * (1 - lam))
    nearest = round(k)
    is_int = nearest >= 1 and abs(k - nearest) <= 1e-12 * max(1.0, k)
    k0 = nearest - 1 if is_int else math.floor(k)
    return k, k0, is_int


@dataclass(frozen=True)
class HierarchyConstants:
    """Coefficients c1_i = i*sigma - (1+lam) and c2_i of the correction ODEs."""

    lam: float
    c1: tuple
    c2: tuple

    @property
    def order(self):
        return len(self.c1)

    def c1_(self, i):
        return self.c1[i - 1]

    def c2_(self, i):
        return self.c2[i - 1]


def hierarchy_constants(lam, k):
    lam = float(lam)
    if not (0 < lam < 1):
        raise DomainError(f"damping exponent must lie in (0, 1), got {lam}")
    if k < 1:
        raise DomainError("hierarchy depth must be at least 1")
    sigma = 1.0 - lam
    c1 = tuple(i * sigma - (1 + lam) for i in range(1, k + 1))
    c2 = tuple((i * sigma - 1) * ((i - 1) * sigma - (1 + lam)) for i in range(1, k + 1))
    _, k0, _ = k_thresholds(lam)
    for i in range(1, min(k, k0) + 1):
        if not c1[i - 1] < 0:
            raise DomainError(f"c1_{i} = {c1[i - 1]} is not negative for lam={lam}")
    return HierarchyConstants(lam, c1, c2)


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class XiGrid:
    """Uniform nodes on [-L, L] with N intervals (N + 1 nodes)."""

    L: float = 12.0
    N: int = 2048

    def __post_init__(self):
        if self.L <= 0 or self.N < 16:
            raise DomainError("XiGrid needs L > 0 and N >= 16")

    @property
    def nodes(self):
        # built from integers so that xi_j == -xi_{N-j} exactly
        j = np.arange(self.N + 1)
        return self.L * ((2.0 * j - self.N) / self.N)

    @property
    def h(self):
        return 2.0 * self.L / self.N

    def refined(self, factor=2):
        return XiGrid(self.L, self.N * factor)


def recommended_grid(lam):
    """Default xi-window for the expansion depth k0(lam).

    Deep hierarchies (k0 >= 3) carry polynomially fattened Gaussian tails
    and need a wider, finer window.
    """
    k0 = k_thresholds(lam)[1]
    return XiGrid(12.0, 2048) if k0 <= 2 else XiGrid(16.0, 4096)
