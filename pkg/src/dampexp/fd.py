"""Finite-difference stencils on uniform grids.

Interior rows use centered stencils; the first and last few rows fall back to
one-sided stencils of the same formal order.
"""
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


def fornberg_weights(z, x, m):
    """Weights for the m-th derivative at ``z`` from nodes ``x`` (Fornberg 1988)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    c = np.zeros((n, m + 1))
    c1 = 1.0
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


@lru_cache(maxsize=None)
def _stencils(deriv, order):
    """Return (centered, edge) integer-offset stencils with weights for h=1."""
    half = (deriv + order - 1) // 2
    offs = np.arange(-half, half + 1)
    centered = (tuple(offs), tuple(fornberg_weights(0.0, offs, deriv)))
    width = deriv + order
    edge = []
    for row in range(half):
        offs_e = np.arange(width) - row
        edge.append((tuple(offs_e), tuple(fornberg_weights(0.0, offs_e, deriv))))
    return centered, tuple(edge)


def diff_matrix(n, h, deriv=1, order=4):
    """Sparse (n, n) matrix approximating d^deriv/dx^deriv on n uniform nodes."""
    (offs, w), edge = _stencils(deriv, order)
    half = len(edge)
    need = max(len(offs), len(edge[0][0]) if edge else 0)
    if n < need:
        raise ValueError(f"grid with {n} nodes too small for order-{order} stencil")
    rows, cols, vals = [], [], []
    interior = np.arange(half, n - half)
    for o, wk in zip(offs, w):
        rows.append(interior)
        cols.append(interior + o)
        vals.append(np.full(interior.size, wk))
    for r, (eo, ew) in enumerate(edge):
        eo = np.asarray(eo)
        ew = np.asarray(ew)
        rows.append(np.full(eo.size, r))
        cols.append(r + eo)
        vals.append(ew)
        # mirror image at the right end
        rows.append(np.full(eo.size, n - 1 - r))
        cols.append(n - 1 - r - eo)
        vals.append(ew * (-1) ** deriv)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return mat / h**deriv


def diff(f, h, deriv=1, order=4):
    """Apply :func:`diff_matrix` to a 1-D array of samples."""
    f = np.asarray(f, dtype=float)
    return _cached_matrix(f.shape[-1], float(h), deriv, order) @ f


@lru_cache(maxsize=32)
def _cached_matrix(n, h, deriv, order):
    return diff_matrix(n, h, deriv, order)


def trapezoid_weights(n, h):
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w
