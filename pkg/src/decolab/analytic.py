"""Closed-form reduced density matrices and decoherence timescales.

The exact diagonal-sector solution is a Gaussian in ``(R, r)``::

    rho(R, r, t) = C exp{ -a r^2 + i pbar r / hbar - (R - xbar - i A r)^2 / M }

with ``a`` the coherence curvature, ``A`` the position/separation coupling,
``M`` the spreading function, ``xbar`` and ``pbar`` the classical centre.
The momentum representation follows by a Gaussian Fourier integral.  All
exponents are assembled in log space so that large separations underflow
gracefully instead of producing ``inf * 0``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.integrate import simpson

from ._special import phi1, phi2, phi3
from .model import (POSITION, DensityMatrix, Grid, PhysicalParams, SpinSector,
                    TimescaleQuery, dense_to_band, position_to_rR)

DEFAULT_POPULATION = 0.5
SHORT_TIME_LIMIT = 0.01
_TWO_PI = 2.0 * math.pi


class LimitRegime(str, Enum):
    EXACT = "exact"
    SHORT_TIME = "short_time"


def _diagonal_sign(sector) -> int:
    sector = SpinSector(sector)
    if not sector.is_diagonal:
        raise ValueError("closed forms exist only for the diagonal spin sectors")
    return sector.sign


@dataclass(frozen=True)
class PacketCoefficients:
    """Time-dependent coefficients of the exact Gaussian solution."""

    t: float
    curvature: float  # a, multiplies -r^2
    coupling: float  # A, imaginary shift of R per unit r
    spread: float  # M, multiplies -(R - ...)^2 as 1/M
    center: float  # mean position
    momentum: float  # mean momentum

    @property
    def coherence_curvature(self) -> float:
        """Decay of |rho| with r at the packet centre: a - A^2 / M."""
        return self.curvature - self.coupling**2 / self.spread

    @property
    def position_variance(self) -> float:
        return 0.5 * self.spread

    @property
    def momentum_variance(self) -> float:
        return 2.0 * self.curvature


def spread_of_time(t, params: PhysicalParams):
    """Spreading function ``M`` as a function of time; exact at zero damping."""
    t = np.asarray(t, dtype=float)
    tau = params.damping * t
    sigma, m, hbar = params.packet_width, params.mass, params.hbar
    free = (hbar * t * phi1(tau)) ** 2 / (sigma**2 * m**2)
    # D / (2 m^2 gamma^3) * (2 tau - 3 + 4 e^-tau - e^-2tau) = 4 gamma kT t^3 phi3 / m
    thermal = 4.0 * params.damping * params.thermal_energy * t**3 * phi3(tau) / m
    out = sigma**2 + free + thermal
    return out if out.ndim else float(out)


def M_of_tau(tau, params: PhysicalParams):
    """Spreading function at dimensionless time ``tau = gamma t``.

    Zero damping is rejected because ``tau`` no longer determines ``t``;
    use :func:`spread_of_time` for that limit.
    """
    if params.damping == 0:
        raise ValueError("M(tau) is undefined at zero damping; use spread_of_time(t, params)")
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    return spread_of_time(tau / params.damping, params)


def N_of_tau(tau, params: PhysicalParams):
    """Momentum-space width function ``D (1 - e^-2tau) / (2 hbar^2 gamma) + e^-2tau / sigma^2``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    # D / (2 hbar^2 gamma) = 4 m kT / hbar^2, finite at zero damping
    thermal = 4.0 * params.mass * params.thermal_energy / params.hbar**2 * (-np.expm1(-2 * tau))
    out = thermal + np.exp(-2 * tau) / params.packet_width**2
    return out if out.ndim else float(out)


def packet_coefficients(t: float, sector, params: PhysicalParams) -> PacketCoefficients:
    if t < 0:
        raise ValueError("time must be non-negative")
    s = _diagonal_sign(sector)
    gamma, m, hbar = params.damping, params.mass, params.hbar
    sigma, kT, eps = params.packet_width, params.thermal_energy, params.coupling
    tau = gamma * t
    decay = math.exp(-tau)
    g1 = t * float(phi1(tau))  # (1 - e^-tau) / gamma
    curvature = (math.exp(-2 * tau) / (4 * sigma**2)
                 + 2 * m * gamma * kT * t * float(phi1(2 * tau)) / hbar**2)
    coupling = hbar * decay * g1 / (2 * sigma**2 * m) + 2 * gamma * kT * g1**2 / hbar
    return PacketCoefficients(
        t=t,
        curvature=curvature,
        coupling=coupling,
        spread=float(spread_of_time(t, params)),
        center=-s * eps * t**2 * float(phi2(tau)) / m,
        momentum=-s * eps * g1,
    )


def _finish(log_magnitude, phase):
    """exp(log_magnitude + i phase) with the phase reduced mod 2 pi."""
    phase = np.mod(phase, _TWO_PI)
    out = np.exp(log_magnitude) * (np.cos(phase) + 1j * np.sin(phase))
    return out if np.ndim(out) else complex(out)


def _position_exponent(R, r, c: PacketCoefficients, hbar: float):
    R = np.asarray(R, dtype=float)
    r = np.asarray(r, dtype=float)
    shifted = (R - c.center) - 1j * c.coupling * r
    return -c.curvature * r**2 + 1j * c.momentum * r / hbar - shifted**2 / c.spread


def rho_position_exact(R, r, t: float, sector, params: PhysicalParams,
                       population: float = DEFAULT_POPULATION):
    """Exact diagonal-sector density matrix in ``(R, r)`` coordinates.

    The closed-form prefactor ``2 sqrt(pi / M)`` integrates to ``2 pi``; the
    result is rescaled so that the trace equals ``population``.
    """
    c = packet_coefficients(t, sector, params)
    expo = _position_exponent(R, r, c, params.hbar)
    log_norm = math.log(2 * math.sqrt(math.pi / c.spread)) + math.log(population / _TWO_PI)
    return _finish(expo.real + log_norm, expo.imag)


def _warn_short_time(t: float, params: PhysicalParams):
    if params.damping * t > SHORT_TIME_LIMIT:
        warnings.warn(f"short-time form used at gamma t = {params.damping * t:.3g} "
                      f"> {SHORT_TIME_LIMIT}", stacklevel=3)


def short_time_coupling(t: float, params: PhysicalParams) -> float:
    """Leading-order ``A``: ``hbar t / (2 sigma^2 m) + D t^2 / (4 m hbar)``."""
    diffusion = params.derived().diffusion
    return (params.hbar * t / (2 * params.packet_width**2 * params.mass)
            + diffusion * t**2 / (4 * params.mass * params.hbar))


def rho_position_short_time(x, x_prime, t: float, sector, params: PhysicalParams,
                            population: float = DEFAULT_POPULATION):
    """Leading order in ``gamma t`` of the exact solution, as a product of packets.

    The packet width is frozen at ``sigma``, so this also assumes
    ``hbar t / (m sigma^2) << 1``.
    """
    _warn_short_time(t, params)
    s = _diagonal_sign(sector)
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    sigma, m, hbar = params.packet_width, params.mass, params.hbar
    r = x - x_prime
    rate = 2 * m * params.damping * params.thermal_energy / hbar**2
    center = -s * params.coupling * t**2 / (2 * m)
    shift = 1j * short_time_coupling(t, params) * r
    expo = (-rate * r**2 * t
            - 1j * s * params.coupling * t * r / hbar
            - ((x - center - shift) ** 2 + (x_prime - center - shift) ** 2) / (2 * sigma**2))
    log_norm = math.log(2 * math.sqrt(math.pi) / sigma) + math.log(population / _TWO_PI)
    return _finish(expo.real + log_norm, expo.imag)


def rho_momentum_exact(Q, q, t: float, sector, params: PhysicalParams,
                       population: float = DEFAULT_POPULATION):
    """Exact density matrix in momentum variables.

    ``q = (p + p') / (2 hbar)`` and ``Q = (p - p') / hbar``.  The value is the
    kernel of ``(1 / 2 pi hbar) * int rho(x, x') e^{-i p x / hbar} e^{i p' x' / hbar}``,
    normalized so that ``int rho(p, p) dp = population``.
    """
    c = packet_coefficients(t, sector, params)
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float)
    hbar = params.hbar
    width = 4.0 * c.curvature  # equals N(tau)
    offset = q - c.momentum / hbar + 1j * c.coupling * Q
    expo = -1j * Q * c.center - c.spread * Q**2 / 4 - offset**2 / width
    log_norm = math.log(2 * math.sqrt(math.pi / width) / hbar) + math.log(population / _TWO_PI)
    return _finish(expo.real + log_norm, expo.imag)


def rho_momentum_short_time(p, p_prime, t: float, sector, params: PhysicalParams,
                            population: float = DEFAULT_POPULATION):
    """Product of momentum packets at ``-s eps t`` with a ``t^3`` coherence decay.

    Imaginary terms coupling to ``p - p'`` through spreading are dropped, so
    only magnitudes are meaningful beyond the shortest times.
    """
    _warn_short_time(t, params)
    s = _diagonal_sign(sector)
    p = np.asarray(p, dtype=float)
    p_prime = np.asarray(p_prime, dtype=float)
    sigma, m, hbar, eps = params.packet_width, params.mass, params.hbar, params.coupling
    center = -s * eps * t
    decay = 2 * params.damping * params.thermal_energy * (p - p_prime) ** 2 * t**3 / (3 * m * hbar**2)
    expo = (-decay
            + 1j * s * eps * t**2 * (p - p_prime) / (2 * m * hbar)
            - sigma**2 * ((p - center) ** 2 + (p_prime - center) ** 2) / (2 * hbar**2))
    log_norm = math.log(2 * sigma * math.sqrt(math.pi) / hbar) + math.log(population / _TWO_PI)
    return _finish(expo.real + log_norm, expo.imag)


def exact_position_matrix(grid: Grid, t: float, sector, params: PhysicalParams,
                          population: float = DEFAULT_POPULATION,
                          phase_momenta: tuple[float, float] = (0.0, 0.0),
                          halfwidth: int | None = None, origin: float = 0.0) -> DensityMatrix:
    """Sample the exact solution on ``grid``, optionally as a moving-frame envelope.

    With a nonzero ``origin`` the grid holds offsets from that lab position,
    i.e. entry ``(i, j)`` is ``rho(origin + x_i, origin + x_j)``.  Far from
    zero this avoids the rounding noise of large lab coordinates, which
    finite-difference stencils amplify.  The shifted matrix obeys the same
    equation only for diagonal sectors with equal frame momenta, so other
    cases are refused.
    """
    x = grid.points
    k, b = phase_momenta
    if halfwidth is None:
        xx, xxp = x[:, None], x[None, :]
    else:
        offsets = np.arange(-halfwidth, halfwidth + 1)
        rows = np.arange(grid.n)[:, None]
        cols = rows - offsets[None, :]
        valid = (cols >= 0) & (cols < grid.n)
        xx = x[rows] + 0 * cols
        xxp = grid.lower + grid.spacing * cols
    if origin != 0.0 and (k != b or not SpinSector(sector).is_diagonal):
        raise ValueError("a shifted origin needs a diagonal sector and equal frame momenta")
    R, r = position_to_rR(xx, xxp)
    c = packet_coefficients(t, sector, params)
    c = replace(c, center=c.center - origin)
    expo = _position_exponent(R, r, c, params.hbar) - 1j * (k * xx - b * xxp) / params.hbar
    log_norm = math.log(2 * math.sqrt(math.pi / c.spread)) + math.log(population / _TWO_PI)
    data = np.asarray(_finish(expo.real + log_norm, expo.imag), dtype=complex)
    if halfwidth is not None:
        data = np.where(valid, data, 0.0)
    return DensityMatrix(POSITION, sector, grid, data, halfwidth=halfwidth,
                         phase_momenta=(float(k), float(b)), hbar=params.hbar)


def spin_coherence_exact(t, params: PhysicalParams, unitary: bool = True):
    """Spin coherence ``|int rho_cross(x, x) dx|`` for a unit cross block.

    The trace is an average of ``exp(-(2 i eps / hbar) int_0^t x ds)`` over
    the Gaussian phase-space process of the packet, so it splits exactly
    into two factors.  The bath factor ``exp(-kappa int_0^t r(u)^2 du)``
    comes from the thermal noise, with ``r(u) = (2 eps / m) u^2 phi2(gamma u)``
    the classical branch separation.  The overlap factor comes from the
    initial position and momentum spreads and equals the zero-temperature
    result.  With ``unitary=False`` only the bath factor is returned.
    """
    t = np.asarray(t, dtype=float)
    gamma, m, hbar = params.damping, params.mass, params.hbar
    sigma, eps, kT = params.packet_width, params.coupling, params.thermal_energy
    kappa = 2 * m * gamma * kT / hbar**2
    ts = np.atleast_1d(t)
    integral = np.empty_like(ts)
    for idx, tt in enumerate(ts):
        u = np.linspace(0.0, tt, 2049)
        ru = 2 * eps / m * u**2 * phi2(gamma * u)
        integral[idx] = simpson(ru**2, x=u)
    bath = -kappa * integral.reshape(np.shape(t))
    if not unitary:
        return np.exp(bath)
    r_end = 2 * eps / m * t**2 * phi2(gamma * t)
    # the initial position enters int x ds undamped, hence no friction factor here
    k_end = 2 * eps * t / hbar
    overlap = -(r_end**2) / (4 * sigma**2) - k_end**2 * sigma**2 / 4
    return np.exp(overlap + bath)


@dataclass(frozen=True)
class TimescaleReport:
    """Decoherence timescales; ``inf`` marks a decoupled or absent channel."""

    zurek_time: float | None  # gamma^-1 hbar^2 / (2 m kT dx^2)
    spin_time: float  # (3 hbar^2 m gamma / (2 eps^2 kT))^(1/3)
    prior_momentum_time: float | None  # m gamma / (2 kT dp^2)
    position_time: float | None  # hbar^2 / (2 m gamma kT dx^2)
    momentum_time: float | None  # (3 m hbar^2 / (2 gamma kT dp^2))^(1/3)

    def as_dict(self) -> dict:
        return {
            "zurek_time": self.zurek_time,
            "spin_time": self.spin_time,
            "prior_momentum_time": self.prior_momentum_time,
            "position_time": self.position_time,
            "momentum_time": self.momentum_time,
        }


def _position_decoherence_time(params: PhysicalParams, dx: float) -> float:
    rate = 2 * params.mass * params.damping * params.thermal_energy * dx**2 / params.hbar**2
    return math.inf if rate == 0 else 1.0 / rate


def timescales(query: TimescaleQuery) -> TimescaleReport:
    p = query.params
    dx, dp = query.separation_x, query.separation_p
    gamma, m, hbar, kT, eps = p.damping, p.mass, p.hbar, p.thermal_energy, p.coupling

    position = None if dx is None else _position_decoherence_time(p, dx)

    if dp is None:
        momentum = prior = None
    else:
        bath = gamma * kT
        momentum = math.inf if bath == 0 else (3 * m * hbar**2 / (2 * bath * dp**2)) ** (1 / 3)
        prior = math.inf if kT == 0 else m * gamma / (2 * kT * dp**2)

    if eps == 0 or gamma == 0 or kT == 0:
        spin = math.inf
    else:
        spin = (3 * hbar**2 * m * gamma / (2 * eps**2 * kT)) ** (1 / 3)

    return TimescaleReport(zurek_time=position, spin_time=spin, prior_momentum_time=prior,
                           position_time=position, momentum_time=momentum)
