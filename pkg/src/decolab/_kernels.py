"""Compiled right-hand side of the master equation in band storage.

Layout: ``P[i + 2, d + W + 2] = f(x_i, x_i - d)`` with two cells of zero
padding on every side, so 4th-order stencils never need bounds checks.
Entries whose column index falls outside the grid are kept at zero, which
doubles as the Dirichlet condition for the bra coordinate.
"""

from __future__ import annotations

import numba
import numpy as np

PAD = 2


@numba.njit(cache=True, nogil=True)
def band_rhs(P, out, n, W, dx, x0, kin, v_ket, v_bra, half_gamma, kappa, theta, u_ket, u_bra):
    """Write the time derivative of the padded band ``P`` into ``out``.

    Parameters (all real except ``kin``)::

        out = kin (d2_x - d2_x') f + v_ket d_x f + v_bra d_x' f
              - half_gamma r (d_x - d_x') f - kappa r^2 f
              - i (theta + u_ket x - u_bra x') f

    with ``r = x - x'`` and ``x_i = x0 + i dx``.
    """
    c2 = kin / (12.0 * dx * dx)
    c1 = 1.0 / (12.0 * dx)
    for i in range(n):
        ii = i + PAD
        x = x0 + i * dx
        # columns with 0 <= j = i - d < n
        k_lo = max(0, W + i - n + 1)
        k_hi = min(2 * W, W + i)
        for k in range(k_lo, k_hi + 1):
            kk = k + PAD
            d = k - W
            f0 = P[ii, kk]
            # ket neighbours move along the row and keep x' fixed: (i+s, d+s)
            a1 = P[ii + 1, kk + 1]
            a2 = P[ii + 2, kk + 2]
            b1 = P[ii - 1, kk - 1]
            b2 = P[ii - 2, kk - 2]
            # bra neighbours keep x fixed: x' + s dx is offset d - s
            e1 = P[ii, kk - 1]
            e2 = P[ii, kk - 2]
            g1 = P[ii, kk + 1]
            g2 = P[ii, kk + 2]
            lap = (-a2 + 16.0 * a1 + 16.0 * b1 - b2) - (-e2 + 16.0 * e1 + 16.0 * g1 - g2)
            dket = (-a2 + 8.0 * a1 - 8.0 * b1 + b2) * c1
            dbra = (-e2 + 8.0 * e1 - 8.0 * g1 + g2) * c1
            r = d * dx
            xp = x - r
            out[ii, kk] = (c2 * lap
                           + (v_ket - half_gamma * r) * dket
                           + (v_bra + half_gamma * r) * dbra
                           - kappa * r * r * f0
                           - 1j * (theta + u_ket * x - u_bra * xp) * f0)
    return out


@numba.njit(cache=True, nogil=True)
def axpy_into(dst, src, scale, inc):
    """``dst = src + scale * inc`` elementwise."""
    a, b = src.shape
    for i in range(a):
        for j in range(b):
            dst[i, j] = src[i, j] + scale * inc[i, j]


@numba.njit(cache=True, nogil=True)
def rk4_combine(state, k1, k2, k3, k4, dt):
    a, b = state.shape
    w = dt / 6.0
    for i in range(a):
        for j in range(b):
            state[i, j] += w * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])


def pad_band(band: np.ndarray) -> np.ndarray:
    n, width = band.shape
    out = np.zeros((n + 2 * PAD, width + 2 * PAD), dtype=complex)
    out[PAD:-PAD, PAD:-PAD] = band
    return out


def unpad_band(padded: np.ndarray) -> np.ndarray:
    return padded[PAD:-PAD, PAD:-PAD].copy()
