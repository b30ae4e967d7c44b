"""Relaxation factors that stay accurate down to zero damping.

Each helper returns a dimensionless ratio that tends to a finite constant as
the dimensionless time goes to zero, so callers can write the damped
formulas as ``t**k * phi_k(gamma * t)`` and recover the undamped limit
without dividing by ``gamma``.
"""

from __future__ import annotations

import math

import numpy as np

_SERIES_CUTOFF = 0.1
_SERIES_TERMS = 22


def _series(tau, coefficients):
    tau = np.asarray(tau, dtype=float)
    acc = np.zeros_like(tau)
    for c in reversed(coefficients):
        acc = acc * tau + c
    return acc


# phi2: (tau - 1 + exp(-tau)) / tau**2 = sum_k (-1)**k tau**(k-2) / k!, k >= 2
_PHI2 = [(-1) ** k / math.factorial(k) for k in range(2, 2 + _SERIES_TERMS)]
# phi3: (2 tau - 3 + 4 exp(-tau) - exp(-2 tau)) / tau**3
#       = sum_k (-1)**k (4 - 2**k) tau**(k-3) / k!, k >= 3
_PHI3 = [(-1) ** k * (4 - 2**k) / math.factorial(k) for k in range(3, 3 + _SERIES_TERMS)]


def phi1(tau):
    """(1 - exp(-tau)) / tau, equal to 1 at tau = 0."""
    tau = np.asarray(tau, dtype=float)
    small = np.abs(tau) < 1e-300
    safe = np.where(small, 1.0, tau)
    return np.where(small, 1.0, -np.expm1(-safe) / safe)


def phi2(tau):
    """(tau - 1 + exp(-tau)) / tau**2, equal to 1/2 at tau = 0."""
    tau = np.asarray(tau, dtype=float)
    near = np.abs(tau) < _SERIES_CUTOFF
    safe = np.where(near, 1.0, tau)
    closed = (safe + np.expm1(-safe)) / safe**2
    return np.where(near, _series(tau, _PHI2), closed)


def phi3(tau):
    """(2 tau - 3 + 4 exp(-tau) - exp(-2 tau)) / tau**3, equal to 2/3 at tau = 0."""
    tau = np.asarray(tau, dtype=float)
    near = np.abs(tau) < _SERIES_CUTOFF
    safe = np.where(near, 1.0, tau)
    closed = (2 * safe + 4 * np.expm1(-safe) - np.expm1(-2 * safe)) / safe**3
    return np.where(near, _series(tau, _PHI3), closed)
