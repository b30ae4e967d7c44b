"""Method-of-lines integration of the per-sector master equation.

For one spin block with field forces ``(f_ket, f_bra)`` the density matrix
obeys::

    d_t rho = (i hbar / 2m)(d2_x - d2_x') rho
              - (i / hbar)(f_ket x - f_bra x') rho
              - (gamma / 2)(x - x')(d_x - d_x') rho
              - (D / 4 hbar^2)(x - x')^2 rho,            D = 8 m gamma kT

Space is discretised with 4th-order central differences and zero boundary
values; time with classical RK4.

Drifting packets are followed in a moving frame: the stored envelope ``f``
relates to the lab block through ``rho = exp(i (a x - b x') / hbar) f(x - X,
x' - X)`` where ``(X, a, b)`` follow the classical equations of motion.  The
envelope then obeys the same equation without the potential, so the grid can
stay small while the packet travels and accelerates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from ._special import phi1, phi2
from .model import POSITION, DensityMatrix, Grid, PhysicalParams, SpinSector


class StabilityError(ValueError):
    """Time step or grid violates the explicit stability bounds."""


class NumericalInstability(RuntimeError):
    """The integration diverged or leaked through a boundary."""


class BoundaryFluxError(NumericalInstability):
    pass


@dataclass(frozen=True)
class MasterEquationSpec:
    """Which terms enter the master equation for one spin block."""

    sector: SpinSector
    params: PhysicalParams
    kinetic: bool = True
    potential: bool = True
    friction: bool = True
    decoherence: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sector", SpinSector(self.sector))

    @property
    def kinetic_coefficient(self) -> complex:
        return 1j * self.params.hbar / (2 * self.params.mass) if self.kinetic else 0.0

    @property
    def forces(self) -> tuple[float, float]:
        if not self.potential:
            return 0.0, 0.0
        return self.sector.forces(self.params.coupling)

    @property
    def friction_coefficient(self) -> float:
        """Coefficient of ``(x - x')(d_x - d_x')``; momentum relaxes at rate gamma."""
        return 0.5 * self.params.damping if self.friction else 0.0

    @property
    def decoherence_coefficient(self) -> float:
        """``D / 4 hbar^2 = 2 m gamma kT / hbar^2``."""
        if not self.decoherence:
            return 0.0
        p = self.params
        return 2 * p.mass * p.damping * p.thermal_energy / p.hbar**2

    def coefficients(self) -> dict:
        f_ket, f_bra = self.forces
        return {
            "kinetic": self.kinetic_coefficient,
            "potential": (f_ket, f_bra),
            "friction": self.friction_coefficient,
            "decoherence": self.decoherence_coefficient,
        }


@dataclass(frozen=True)
class IntegratorConfig:
    """Explicit RK4 settings.

    ``stability_factor`` is ``c`` in ``dt <= c m dx^2 / hbar``.  ``frame`` is
    ``"comoving"`` (follow the classical trajectory) or ``"lab"``.
    ``halfwidth`` limits the stored off-diagonal band, in cells.
    """

    dt: float
    t_final: float
    snapshot_times: tuple[float, ...] = ()
    stability_factor: float = 0.1
    frame: str = "comoving"
    halfwidth: int | None = None
    scheme: str = field(default="rk4", init=False)
    growth_limit: float = 10.0
    boundary_tolerance: float = 1e-6
    band_tolerance: float = 1e-6
    check_every: int = 50

    def __post_init__(self):
        if not (self.dt > 0):
            raise StabilityError("dt must be positive")
        if not (self.t_final >= 0):
            raise ValueError("t_final must be non-negative")
        times = tuple(float(t) for t in self.snapshot_times) or (0.0, float(self.t_final))
        if any(t < 0 or t > self.t_final * (1 + 1e-12) for t in times):
            raise ValueError("snapshot times must lie in [0, t_final]")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot times must be strictly increasing")
        object.__setattr__(self, "snapshot_times", times)
        if self.frame not in ("comoving", "lab"):
            raise ValueError(f"unknown frame {self.frame!r}")


def stability_limits(spec: MasterEquationSpec, grid: Grid, halfwidth: int | None,
                     stability_factor: float) -> dict:
    """Largest stable ``dt`` allowed by each stiff term.

    The kinetic bound is the configured ``c m dx^2 / hbar``.  The friction
    and decoherence bounds use the RK4 stability interval (about 2.8 on both
    axes) and the largest stored separation.
    """
    p = spec.params
    dx = grid.spacing
    cells = grid.n - 1 if halfwidth is None else min(halfwidth, grid.n - 1)
    r_max = cells * dx
    limits = {"kinetic": stability_factor * p.mass * dx**2 / p.hbar}
    kappa = spec.decoherence_coefficient
    if kappa > 0:
        limits["decoherence"] = 2.5 / (kappa * r_max**2)
    half_gamma = spec.friction_coefficient
    if half_gamma > 0:
        # largest first-derivative symbol of the 4th-order stencil is ~1.372 / dx
        limits["friction"] = 2.5 * dx / (2 * half_gamma * r_max * 1.372)
    return limits


def check_stability(spec: MasterEquationSpec, grid: Grid, config: IntegratorConfig):
    limits = stability_limits(spec, grid, config.halfwidth, config.stability_factor)
    for name, bound in limits.items():
        if config.dt > bound:
            raise StabilityError(f"dt = {config.dt:g} exceeds the {name} stability bound {bound:g}")


def stable_dt(spec: MasterEquationSpec, grid: Grid, halfwidth: int | None,
              stability_factor: float = 0.1) -> float:
    return min(stability_limits(spec, grid, halfwidth, stability_factor).values())


# --- dense right-hand side --------------------------------------------------------------

def _d1(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    g = np.moveaxis(f, axis, 0)
    p = np.zeros((g.shape[0] + 4,) + g.shape[1:], dtype=complex)
    p[2:-2] = g
    out = (-p[4:] + 8 * p[3:-1] - 8 * p[1:-3] + p[:-4]) / (12 * dx)
    return np.moveaxis(out, 0, axis)


def _d2(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    g = np.moveaxis(f, axis, 0)
    p = np.zeros((g.shape[0] + 4,) + g.shape[1:], dtype=complex)
    p[2:-2] = g
    out = (-p[4:] + 16 * p[3:-1] - 30 * p[2:-2] + 16 * p[1:-3] - p[:-4]) / (12 * dx * dx)
    return np.moveaxis(out, 0, axis)


def _static_frame_coefficients(spec: MasterEquationSpec, phase_momenta, hbar):
    """Envelope coefficients for a frame with constant phase momenta ``(a, b)``."""
    a, b = phase_momenta
    m = spec.params.mass
    f_ket, f_bra = spec.forces
    half_gamma = spec.friction_coefficient
    kin = spec.kinetic_coefficient
    # (i hbar / 2m)[(D + i a/hbar)^2 - (D' - i b/hbar)^2] expands to these terms
    kin_on = 1.0 if spec.kinetic else 0.0
    v_ket = -kin_on * a / m
    v_bra = -kin_on * b / m
    theta = kin_on * (a * a - b * b) / (2 * m * hbar)
    # -(gamma/2) r * i (a + b) / hbar is absorbed into the linear potential terms
    u_ket = (f_ket + half_gamma * (a + b)) / hbar
    u_bra = (f_bra + half_gamma * (a + b)) / hbar
    return kin, v_ket, v_bra, half_gamma, spec.decoherence_coefficient, theta, u_ket, u_bra


def master_rhs(rho: DensityMatrix, spec: MasterEquationSpec) -> DensityMatrix:
    """Time derivative of ``rho`` under the master equation (dense evaluation).

    Phase momenta carried by ``rho`` are honoured exactly: the result is the
    envelope of ``d_t rho`` in the same frame.
    """
    if rho.basis != POSITION:
        raise ValueError("master_rhs needs a position-basis density matrix")
    if SpinSector(rho.sector) is not spec.sector:
        raise ValueError("density matrix sector does not match the equation")
    grid = rho.grid
    dx = grid.spacing
    if spec.params.packet_width < 4 * dx:
        raise ValueError("grid under-resolves the packet width (need sigma >= 4 dx)")
    hbar = spec.params.hbar
    kin, v_ket, v_bra, half_gamma, kappa, theta, u_ket, u_bra = \
        _static_frame_coefficients(spec, rho.phase_momenta, hbar)
    f = rho.envelope().astype(complex)
    x = grid.points[:, None]
    xp = grid.points[None, :]
    r = x - xp
    d_ket = _d1(f, 0, dx)
    d_bra = _d1(f, 1, dx)
    out = (kin * (_d2(f, 0, dx) - _d2(f, 1, dx))
           + (v_ket - half_gamma * r) * d_ket
           + (v_bra + half_gamma * r) * d_bra
           - kappa * r**2 * f
           - 1j * (theta + u_ket * x - u_bra * xp) * f)
    return replace(rho, data=out, halfwidth=None)


def exact_solution_residual(t: float, spec: MasterEquationSpec, n: int = 256,
                            spacing: float = 0.015, time_step: float = 0.01) -> float:
    """How well the closed-form kernel satisfies the discretised equation at time ``t``.

    The kernel is sampled on an ``n x n`` patch centred on the packet, in a
    frame carrying its mean momentum, with coordinates measured from the
    packet centre so that large drifts cost no precision.  ``master_rhs`` of
    that sample is compared with a five-point centred time difference of
    step ``time_step``.  Two cells along each edge, whose stencils reach past
    the patch, are left out.  Returns ``max |rhs - d_t rho| / max |d_t rho|``.
    """
    from .analytic import exact_position_matrix, packet_coefficients

    if not spec.sector.is_diagonal:
        raise ValueError("the closed-form kernel covers the diagonal sectors only")
    if t < 2 * time_step:
        raise ValueError("t must be at least twice the time step")
    p = spec.params
    c = packet_coefficients(t, spec.sector, p)
    grid = Grid.centered(n, 0.5 * (n - 1) * spacing)
    frame = (c.momentum, c.momentum)

    def sample(time):
        return exact_position_matrix(grid, time, spec.sector, p, phase_momenta=frame,
                                     origin=c.center)

    rhs = master_rhs(sample(t), spec).data
    h = time_step
    dt = (-sample(t + 2 * h).data + 8 * sample(t + h).data
          - 8 * sample(t - h).data + sample(t - 2 * h).data) / (12 * h)
    inner = (slice(2, -2), slice(2, -2))
    return float(np.abs(rhs - dt)[inner].max() / np.abs(dt).max())


def band_master_rhs(rho: DensityMatrix, spec: MasterEquationSpec) -> DensityMatrix:
    """Same as :func:`master_rhs` but evaluated by the compiled band kernel."""
    if not rho.is_banded:
        raise ValueError("band_master_rhs needs band storage")
    grid = rho.grid
    W = rho.halfwidth
    padded = _kernels.pad_band(rho.data)
    out = np.zeros_like(padded)
    coeffs = _static_frame_coefficients(spec, rho.phase_momenta, spec.params.hbar)
    _kernels.band_rhs(padded, out, grid.n, W, grid.spacing, grid.lower, *coeffs)
    return replace(rho, data=_kernels.unpad_band(out))


# --- moving frame -----------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    """Classical reference trajectory ``(X, a, b)`` for the envelope."""

    shift: float
    ket_momentum: float
    bra_momentum: float


def frame_at(t: float, start: Frame, spec: MasterEquationSpec) -> Frame:
    """Closed-form solution of ``X' = (a+b)/2m``, ``a' = -f_ket - (gamma/2)(a+b)``, same for b."""
    f_ket, f_bra = spec.forces
    gamma = 2 * spec.friction_coefficient
    m = spec.params.mass
    tau = gamma * t
    total0 = start.ket_momentum + start.bra_momentum
    diff0 = start.ket_momentum - start.bra_momentum
    total = total0 * math.exp(-tau) - (f_ket + f_bra) * t * float(phi1(tau))
    diff = diff0 - (f_ket - f_bra) * t
    shift = start.shift + (total0 * t * float(phi1(tau))
                           - (f_ket + f_bra) * t**2 * float(phi2(tau))) / (2 * m)
    return Frame(shift, 0.5 * (total + diff), 0.5 * (total - diff))


def _moving_frame_coefficients(spec: MasterEquationSpec, frame: Frame, hbar: float):
    a, b = frame.ket_momentum, frame.bra_momentum
    m = spec.params.mass
    kin_on = 1.0 if spec.kinetic else 0.0
    velocity = (a + b) / (2 * m)
    # kinetic drift plus the frame velocity: (b - a) / 2m on d_x, (a - b) / 2m on d_x'
    v_ket = -kin_on * a / m + velocity
    v_bra = -kin_on * b / m + velocity
    theta = kin_on * (a * a - b * b) / (2 * m * hbar)
    return (spec.kinetic_coefficient, v_ket, v_bra, spec.friction_coefficient,
            spec.decoherence_coefficient, theta, 0.0, 0.0)


# --- driver -----------------------------------------------------------------------------

def _edge_weight(padded: np.ndarray, n: int, W: int, cells: int) -> tuple[float, float]:
    """Largest magnitude near the grid ends and at the outer band columns."""
    core = padded[_kernels.PAD:-_kernels.PAD, _kernels.PAD:-_kernels.PAD]
    diag = np.abs(core[:, W])
    ends = max(diag[:cells].max(), diag[-cells:].max())
    if W >= n - 1:
        outer = 0.0
    else:
        outer = max(np.abs(core[:, :2]).max(), np.abs(core[:, -2:]).max())
    return float(ends), float(outer)


def evolve(rho0: DensityMatrix, spec: MasterEquationSpec,
           config: IntegratorConfig) -> list[tuple[float, DensityMatrix]]:
    """Integrate ``rho0`` and return ``(t, rho)`` at each snapshot time.

    Snapshots are returned in band storage.  Raises :class:`StabilityError`
    before starting when ``dt`` breaks a stability bound, and
    :class:`NumericalInstability` when the norm grows more than
    ``growth_limit`` times or weight reaches the grid edge.
    """
    if rho0.basis != POSITION:
        raise ValueError("evolution runs in the position basis")
    if SpinSector(rho0.sector) is not spec.sector:
        raise ValueError("initial state sector does not match the equation")
    grid = rho0.grid
    n = grid.n
    W = config.halfwidth if config.halfwidth is not None else (
        rho0.halfwidth if rho0.is_banded else n - 1)
    W = min(W, n - 1)
    check_stability(spec, grid, replace(config, halfwidth=W))
    if spec.params.packet_width < 4 * grid.spacing:
        raise ValueError("grid under-resolves the packet width (need sigma >= 4 dx)")

    band = rho0.to_band(W).data if (rho0.halfwidth != W) else rho0.data.copy()
    state = _kernels.pad_band(band.astype(complex))
    hbar = spec.params.hbar
    initial_max = float(np.abs(state).max())
    initial_trace = abs(rho0.trace()) or 1.0
    dx = grid.spacing

    start = Frame(0.0, *rho0.phase_momenta)
    moving = config.frame == "comoving"
    if moving:
        def coefficients(t):
            fr = frame_at(t, start, spec)
            return _moving_frame_coefficients(spec, fr, hbar)
        x0 = grid.lower
    else:
        static = _static_frame_coefficients(spec, rho0.phase_momenta, hbar)

        def coefficients(t):
            return static
        x0 = grid.lower

    k1, k2, k3, k4, tmp = (np.zeros_like(state) for _ in range(5))

    def snapshot(t: float) -> DensityMatrix:
        band_now = _kernels.unpad_band(state)
        if moving:
            fr = frame_at(t, start, spec)
            g = grid.shifted(fr.shift)
            phases = (fr.ket_momentum, fr.bra_momentum)
        else:
            g, phases = grid, rho0.phase_momenta
        return DensityMatrix(POSITION, spec.sector, g, band_now, halfwidth=W,
                             phase_momenta=phases, hbar=hbar, weight=rho0.weight)

    def watchdog(t: float):
        peak = float(np.abs(state).max())
        if not np.isfinite(peak) or peak > config.growth_limit * initial_max:
            raise NumericalInstability(
                f"norm grew from {initial_max:.3g} to {peak:.3g} by t = {t:.6g}")
        ends, outer = _edge_weight(state, n, W, 5)
        if ends * 5 * dx > config.boundary_tolerance * initial_trace:
            raise BoundaryFluxError(
                f"weight {ends:.3g} reached the grid edge by t = {t:.6g}; enlarge the grid")
        if outer > config.band_tolerance * peak:
            raise BoundaryFluxError(
                f"coherence {outer:.3g} reached the band edge by t = {t:.6g}; widen the band")

    results = []
    t = 0.0
    targets = list(config.snapshot_times)
    if targets and targets[0] == 0.0:
        results.append((0.0, snapshot(0.0)))
        targets = targets[1:]
    step_count = 0
    for target in targets:
        span = target - t
        steps = max(1, math.ceil(span / config.dt * (1 - 1e-12)))
        h = span / steps
        for s in range(steps):
            ts = t + s * h
            c0 = coefficients(ts)
            ch = coefficients(ts + 0.5 * h)
            c1 = coefficients(ts + h)
            _kernels.band_rhs(state, k1, n, W, dx, x0, *c0)
            _kernels.axpy_into(tmp, state, 0.5 * h, k1)
            _kernels.band_rhs(tmp, k2, n, W, dx, x0, *ch)
            _kernels.axpy_into(tmp, state, 0.5 * h, k2)
            _kernels.band_rhs(tmp, k3, n, W, dx, x0, *ch)
            _kernels.axpy_into(tmp, state, h, k3)
            _kernels.band_rhs(tmp, k4, n, W, dx, x0, *c1)
            _kernels.rk4_combine(state, k1, k2, k3, k4, h)
            step_count += 1
            if step_count % config.check_every == 0:
                watchdog(ts + h)
        t = target
        watchdog(t)
        results.append((t, snapshot(t)))
    return results


def evolve_cross_sector(rho0_cross: DensityMatrix, spec: MasterEquationSpec,
                        config: IntegratorConfig) -> list[tuple[float, DensityMatrix]]:
    """Evolve the spin-off-diagonal block; the frame separates ket and bra momenta."""
    if spec.sector is not SpinSector.CROSS:
        raise ValueError("evolve_cross_sector needs the cross sector")
    return evolve(rho0_cross, spec, config)
