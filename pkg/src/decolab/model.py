"""Physical parameters, grids and the density-matrix container.

Everything downstream works in natural units (``hbar = k_B = 1`` unless the
caller chooses otherwise).  The SI layer exists for headline estimates of
macroscopic timescales, where grid-scale dynamics would be meaningless.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

# CODATA 2018 exact values
HBAR_SI = 1.054571817e-34
BOLTZMANN_SI = 1.380649e-23

POSITION = "position"
MOMENTUM = "momentum"


class UnitSystem(str, Enum):
    NATURAL = "natural"
    SI = "si"


@dataclass(frozen=True)
class PhysicalParams:
    """Constants of a spin-1/2 particle in a linear field, coupled to an Ohmic bath.

    Parameters
    ----------
    mass : float
        Particle mass.
    coupling : float
        Field gradient, the coefficient of ``x * sigma_z`` in the Hamiltonian.
    damping : float
        Relaxation rate of the bath (inverse time). Zero switches the bath off.
    thermal_energy : float
        ``k_B T`` of the bath.
    packet_width : float
        Width ``sigma`` of the initial wave packet, ``psi ~ exp(-x^2 / 2 sigma^2)``.
    hbar, boltzmann : float
        Reduced Planck and Boltzmann constants in the chosen unit system.
    cutoff : float
        High-frequency cutoff of the spectral density. ``inf`` means the
        Markovian limit.
    unit_system : {"natural", "si"}
    """

    mass: float = 1.0
    coupling: float = 0.5
    damping: float = 1e-3
    thermal_energy: float = 10.0
    packet_width: float = 1.0
    hbar: float = 1.0
    boltzmann: float = 1.0
    cutoff: float = math.inf
    unit_system: UnitSystem = UnitSystem.NATURAL

    def __post_init__(self):
        object.__setattr__(self, "unit_system", UnitSystem(self.unit_system))
        for name in ("mass", "packet_width", "hbar", "boltzmann", "cutoff"):
            value = getattr(self, name)
            if not (value > 0):
                raise ValueError(f"{name} must be positive, got {value!r}")
        for name in ("coupling", "damping", "thermal_energy"):
            value = getattr(self, name)
            if not (value >= 0) or not math.isfinite(value):
                raise ValueError(f"{name} must be finite and non-negative, got {value!r}")
        if self.damping > 0 and self.cutoff < 100 * self.damping:
            warnings.warn(
                f"cutoff {self.cutoff:g} is not much larger than damping {self.damping:g}; "
                "the Ohmic form assumes cutoff >= 100 * damping",
                stacklevel=3,
            )

    @classmethod
    def from_si(cls, mass_kg: float, temperature_k: float, damping: float = 1.0,
                coupling: float = 0.0, packet_width: float = 1.0,
                cutoff: float = math.inf) -> "PhysicalParams":
        """Build SI parameters from a mass and a temperature in kelvin."""
        return cls(mass=mass_kg, coupling=coupling, damping=damping,
                   thermal_energy=BOLTZMANN_SI * temperature_k, packet_width=packet_width,
                   hbar=HBAR_SI, boltzmann=BOLTZMANN_SI, cutoff=cutoff,
                   unit_system=UnitSystem.SI)

    @property
    def temperature(self) -> float:
        return self.thermal_energy / self.boltzmann

    def derived(self) -> "DerivedCoefficients":
        return DerivedCoefficients.from_params(self)

    def with_values(self, **changes) -> "PhysicalParams":
        return replace(self, **changes)

    def to_natural(self) -> tuple["PhysicalParams", "UnitScales"]:
        """Rescale to units where hbar = k_B = mass = packet_width = 1.

        Returns the rescaled parameters and the scales needed to convert
        results back.
        """
        scales = UnitScales.for_params(self)
        natural = PhysicalParams(
            mass=1.0,
            coupling=self.coupling / scales.force,
            damping=self.damping * scales.time,
            thermal_energy=self.thermal_energy / scales.energy,
            packet_width=1.0,
            hbar=1.0,
            boltzmann=1.0,
            cutoff=self.cutoff * scales.time,
            unit_system=UnitSystem.NATURAL,
        )
        return natural, scales


@dataclass(frozen=True)
class UnitScales:
    """Conversion factors from natural units back to the source unit system."""

    mass: float
    length: float
    time: float

    @classmethod
    def for_params(cls, params: PhysicalParams) -> "UnitScales":
        length = params.packet_width
        return cls(mass=params.mass, length=length,
                   time=params.mass * length**2 / params.hbar)

    @property
    def energy(self) -> float:
        return self.mass * self.length**2 / self.time**2

    @property
    def force(self) -> float:
        return self.energy / self.length

    @property
    def momentum(self) -> float:
        return self.mass * self.length / self.time


@dataclass(frozen=True)
class DerivedCoefficients:
    """Combinations of parameters that appear throughout the dynamics."""

    diffusion: float  # 8 m gamma k_B T
    damping: float

    @classmethod
    def from_params(cls, params: PhysicalParams) -> "DerivedCoefficients":
        return cls(diffusion=8.0 * params.mass * params.damping * params.thermal_energy,
                   damping=params.damping)

    def dimensionless_time(self, t):
        return self.damping * np.asarray(t, dtype=float)


def spectral_density(omega, params: PhysicalParams):
    """Ohmic spectral density ``gamma * omega * exp(-omega / cutoff)``."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ValueError("spectral density is defined for non-negative frequencies")
    out = params.damping * omega * np.exp(-omega / params.cutoff)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Grid:
    """Uniform 1-D grid, ``n`` points from ``lower`` to ``upper`` inclusive."""

    n: int
    lower: float
    upper: float
    axis: str = POSITION
    conjugate: "Grid | None" = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.n < 16:
            raise ValueError(f"grid needs at least 16 points, got {self.n}")
        if not self.upper > self.lower:
            raise ValueError("grid upper bound must exceed lower bound")
        if self.axis not in (POSITION, MOMENTUM):
            raise ValueError(f"unknown axis {self.axis!r}")

    @classmethod
    def from_spacing(cls, n: int, lower: float, spacing: float, axis: str = POSITION,
                     conjugate: "Grid | None" = None) -> "Grid":
        return cls(n, lower, lower + (n - 1) * spacing, axis, conjugate)

    @classmethod
    def centered(cls, n: int, half_width: float, center: float = 0.0,
                 axis: str = POSITION) -> "Grid":
        return cls(n, center - half_width, center + half_width, axis)

    @property
    def spacing(self) -> float:
        return (self.upper - self.lower) / (self.n - 1)

    @property
    def points(self) -> np.ndarray:
        return self.lower + self.spacing * np.arange(self.n)

    def index_of(self, value: float) -> int:
        return int(round((value - self.lower) / self.spacing))

    def shifted(self, offset: float) -> "Grid":
        return Grid(self.n, self.lower + offset, self.upper + offset, self.axis)

    def reciprocal(self, hbar: float = 1.0, center: float = 0.0) -> "Grid":
        """Conjugate FFT grid with spacing ``2 pi hbar / (n * spacing)``.

        The point ``n // 2`` sits at ``center``.  The returned grid remembers
        this one, so mapping back reproduces the original exactly.
        """
        other = MOMENTUM if self.axis == POSITION else POSITION
        step = 2 * math.pi * hbar / (self.n * self.spacing)
        lower = center - (self.n // 2) * step
        return Grid.from_spacing(self.n, lower, step, other, conjugate=self)

    @property
    def midpoint(self) -> float:
        """Grid value at index ``n // 2`` (the FFT zero-frequency slot)."""
        return self.lower + (self.n // 2) * self.spacing


class SpinSector(str, Enum):
    PLUS = "plus"
    MINUS = "minus"
    CROSS = "cross"

    @property
    def sign(self) -> int:
        """Eigenvalue of sigma_z for diagonal sectors; 0 for the cross block."""
        return {"plus": 1, "minus": -1, "cross": 0}[self.value]

    @property
    def is_diagonal(self) -> bool:
        return self is not SpinSector.CROSS

    def forces(self, coupling: float) -> tuple[float, float]:
        """Field forces acting on the ket and bra coordinates.

        The potential contributes ``-(i/hbar)(f_ket x - f_bra x')`` to the
        time derivative of the block.
        """
        if self is SpinSector.PLUS:
            return coupling, coupling
        if self is SpinSector.MINUS:
            return -coupling, -coupling
        return coupling, -coupling


def position_to_rR(x, x_prime):
    """Map ``(x, x')`` to ``(R, r)`` with ``R = (x + x')/2`` and ``r = x - x'``."""
    x = np.asarray(x)
    x_prime = np.asarray(x_prime)
    return 0.5 * (x + x_prime), x - x_prime


def rR_to_position(R, r):
    R = np.asarray(R)
    r = np.asarray(r)
    return R + 0.5 * r, R - 0.5 * r


def band_to_dense(band: np.ndarray, halfwidth: int) -> np.ndarray:
    """Expand band storage ``band[i, d + W] = rho[i, i - d]`` to a full matrix."""
    n = band.shape[0]
    dense = np.zeros((n, n), dtype=band.dtype)
    rows = np.arange(n)
    for k in range(2 * halfwidth + 1):
        d = k - halfwidth
        cols = rows - d
        ok = (cols >= 0) & (cols < n)
        dense[rows[ok], cols[ok]] = band[rows[ok], k]
    return dense


def dense_to_band(dense: np.ndarray, halfwidth: int) -> np.ndarray:
    n = dense.shape[0]
    band = np.zeros((n, 2 * halfwidth + 1), dtype=complex)
    rows = np.arange(n)
    for k in range(2 * halfwidth + 1):
        d = k - halfwidth
        cols = rows - d
        ok = (cols >= 0) & (cols < n)
        band[rows[ok], k] = dense[rows[ok], cols[ok]]
    return band


@dataclass
class DensityMatrix:
    """One spin block of a density matrix sampled on a uniform grid.

    The stored array is an *envelope*.  Lab-frame values are

        rho(a_i, a_j) = exp(i (k a_i - b a_j) / hbar) * envelope[i, j]

    with ``(k, b) = phase_momenta``; both are zero unless the state was
    produced in a moving frame.  When ``halfwidth`` is set, ``data`` uses
    band storage ``data[i, d + W] = envelope[i, i - d]`` and entries further
    than ``W`` cells from the diagonal are taken as zero.
    """

    basis: str
    sector: SpinSector
    grid: Grid
    data: np.ndarray
    halfwidth: int | None = None
    phase_momenta: tuple[float, float] = (0.0, 0.0)
    hbar: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        if self.basis not in (POSITION, MOMENTUM):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.grid.axis != self.basis:
            raise ValueError("grid axis does not match basis")
        self.sector = SpinSector(self.sector)
        n = self.grid.n
        expected = (n, n) if self.halfwidth is None else (n, 2 * self.halfwidth + 1)
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape} does not match {expected}")

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def is_banded(self) -> bool:
        return self.halfwidth is not None

    @property
    def has_phase(self) -> bool:
        return self.phase_momenta != (0.0, 0.0)

    def envelope(self) -> np.ndarray:
        if self.halfwidth is None:
            return self.data
        return band_to_dense(self.data, self.halfwidth)

    def phase_factors(self) -> tuple[np.ndarray, np.ndarray]:
        k, b = self.phase_momenta
        x = self.grid.points
        return np.exp(1j * k * x / self.hbar), np.exp(-1j * b * x / self.hbar)

    @property
    def values(self) -> np.ndarray:
        """Dense lab-frame matrix (allocates ``n * n`` complex numbers)."""
        env = self.envelope()
        if not self.has_phase:
            return env
        left, right = self.phase_factors()
        return left[:, None] * env * right[None, :]

    def diagonal(self) -> np.ndarray:
        if self.halfwidth is None:
            diag = np.diagonal(self.data).copy()
        else:
            diag = self.data[:, self.halfwidth].copy()
        k, b = self.phase_momenta
        if k != b:
            diag = diag * np.exp(1j * (k - b) * self.grid.points / self.hbar)
        return diag

    def trace(self) -> complex:
        return complex(np.sum(self.diagonal()) * self.grid.spacing * self.weight)

    def hermiticity_error(self) -> float:
        """``max |rho - rho^dagger| / max |rho|`` (only meaningful when k == b)."""
        env = self.envelope()
        scale = np.max(np.abs(env))
        if scale == 0:
            return 0.0
        return float(np.max(np.abs(env - env.conj().T)) / scale)

    def with_data(self, data: np.ndarray, **changes) -> "DensityMatrix":
        return replace(self, data=data, **changes)

    def to_dense(self) -> "DensityMatrix":
        if self.halfwidth is None:
            return self
        return replace(self, data=self.envelope(), halfwidth=None)

    def to_band(self, halfwidth: int) -> "DensityMatrix":
        return replace(self, data=dense_to_band(self.envelope(), halfwidth), halfwidth=halfwidth)

    def to_lab(self) -> "DensityMatrix":
        """Fold the phase momenta into the stored values."""
        return replace(self, data=self.values, halfwidth=None, phase_momenta=(0.0, 0.0))


@dataclass(frozen=True)
class TimescaleQuery:
    """Separation(s) at which decoherence timescales are requested."""

    params: PhysicalParams
    separation_x: float | None = None
    separation_p: float | None = None

    def __post_init__(self):
        given = [s for s in (self.separation_x, self.separation_p) if s is not None]
        if not given:
            raise ValueError("a position or momentum separation is required")
        if any(not (s > 0) for s in given):
            raise ValueError("separations must be positive")


def packet_fits(grid: Grid, width: float, center: float = 0.0, margin_cells: int = 5) -> bool:
    """True when ``center +- 4 width`` lies ``margin_cells`` inside the grid."""
    pad = margin_cells * grid.spacing
    return (center - 4 * width - pad >= grid.lower) and (center + 4 * width + pad <= grid.upper)


def gaussian_initial_state(params: PhysicalParams, grid: Grid,
                           sector: SpinSector = SpinSector.PLUS,
                           population: float = 1.0,
                           halfwidth: int | None = None) -> DensityMatrix:
    """Pure Gaussian packet at rest, ``rho ~ exp(-(x^2 + x'^2) / 2 sigma^2)``.

    Normalized so that the trace (Riemann sum) equals ``population``.
    """
    if grid.axis != POSITION:
        raise ValueError("initial state needs a position grid")
    sigma = params.packet_width
    if grid.upper - grid.lower < 8 * sigma or not packet_fits(grid, sigma):
        raise ValueError(
            f"grid [{grid.lower:g}, {grid.upper:g}] is too small for a packet of width {sigma:g}")
    x = grid.points
    psi = np.exp(-x**2 / (2 * sigma**2))
    psi = psi / np.sqrt(np.sum(psi**2) * grid.spacing)
    dense = population * np.outer(psi, psi).astype(complex)
    if halfwidth is not None:
        data = dense_to_band(dense, halfwidth)
    else:
        data = dense
    return DensityMatrix(POSITION, sector, grid, data, halfwidth=halfwidth, hbar=params.hbar)


def sizing_half_width(params: PhysicalParams, t_final: float) -> float:
    """Half extent that keeps a drifting packet clear of the boundaries.

    Satisfies ``extent >= max(8 sigma, 2 drift + 8 sigma)`` with the packet
    width grown by free and thermal spreading (seven standard deviations).
    """
    sigma, m = params.packet_width, params.mass
    drift = params.coupling * t_final**2 / (2 * m)
    # upper bound on the spreading function (its thermal part uses phi3 <= 2/3)
    spread = (sigma**2 + (params.hbar * t_final / (m * sigma)) ** 2
              + 8.0 / 3.0 * params.damping * params.thermal_energy * t_final**3 / m)
    return drift + max(5 * sigma, 7 * math.sqrt(spread / 2))
