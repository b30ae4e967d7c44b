"""Observables extracted from density matrices.

Basis transforms, moments, purity, coherence time series with decay fits,
and a Gaussian pointer-state fit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.fft
import scipy.linalg

from .model import MOMENTUM, POSITION, DensityMatrix, Grid, SpinSector


class InsufficientDecay(ValueError):
    """The series does not decay enough to constrain a fit."""


# --- basis transforms -------------------------------------------------------------------

def to_momentum(rho: DensityMatrix) -> DensityMatrix:
    """``rho(p, p') = (1 / 2 pi hbar) int rho(x, x') e^{-i p x / hbar} e^{i p' x' / hbar}``.

    Evaluated with FFTs on the reciprocal grid, centred on the frame momentum
    when the state carries one (ket and bra momenta must then agree).
    """
    if rho.basis != POSITION:
        raise ValueError("to_momentum needs a position-basis density matrix")
    k, b = rho.phase_momenta
    if k != b:
        raise ValueError("ket and bra phase momenta differ; no common momentum grid")
    hbar = rho.hbar
    xgrid = rho.grid
    n, dx = xgrid.n, xgrid.spacing
    pgrid = xgrid.reciprocal(hbar, center=k)
    env = rho.envelope()
    # phase of the grid origin: exp(-i (p - k) x_0 / hbar) with p - k = (m - n//2) dp
    m_index = np.arange(n) - n // 2
    origin = np.exp(-1j * m_index * pgrid.spacing * xgrid.lower / hbar)
    # lab phase exp(i k x) combined with exp(-i p x) leaves exp(-i (p - k) x)
    fwd = scipy.fft.fftshift(scipy.fft.fft(env, axis=0), axes=0)
    both = scipy.fft.fftshift(scipy.fft.ifft(fwd, axis=1), axes=1) * n
    # extra phase from the moving-frame origin: exp(-i k x_0 ...) cancels between bra and ket
    data = (dx * dx / (2 * math.pi * hbar)) * origin[:, None] * both * origin.conj()[None, :]
    return DensityMatrix(MOMENTUM, rho.sector, pgrid, data, hbar=hbar, weight=rho.weight)


def to_position(rho: DensityMatrix) -> DensityMatrix:
    """Inverse of :func:`to_momentum`; the result keeps the momentum centre as a frame."""
    if rho.basis != MOMENTUM:
        raise ValueError("to_position needs a momentum-basis density matrix")
    hbar = rho.hbar
    pgrid = rho.grid
    center = pgrid.midpoint
    xgrid = pgrid.reciprocal(hbar) if pgrid.conjugate is None else pgrid.conjugate
    n, dx = xgrid.n, xgrid.spacing
    m_index = np.arange(n) - n // 2
    origin = np.exp(-1j * m_index * pgrid.spacing * xgrid.lower / hbar)
    core = origin.conj()[:, None] * rho.values * origin[None, :]
    core = core * (2 * math.pi * hbar / (dx * dx))
    back = scipy.fft.ifft(scipy.fft.ifftshift(core, axes=0), axis=0)
    env = scipy.fft.fft(scipy.fft.ifftshift(back, axes=1), axis=1) / n
    return DensityMatrix(POSITION, rho.sector, xgrid, env, phase_momenta=(center, center),
                         hbar=hbar, weight=rho.weight)


# --- moments and purity -----------------------------------------------------------------

def moments(rho: DensityMatrix) -> tuple[float, float]:
    """Mean and variance of the grid variable from the diagonal."""
    diag = rho.diagonal().real
    a = rho.grid.points
    norm = float(np.sum(diag))
    if abs(norm * rho.grid.spacing * rho.weight) < 1e-8:
        raise ValueError("trace too small for moments")
    mean = float(np.sum(a * diag) / norm)
    var = float(np.sum((a - mean) ** 2 * diag) / norm)
    return mean, var


def purity(rho: DensityMatrix) -> float:
    """``Tr rho^2 / (Tr rho)^2`` as Riemann sums (assumes a Hermitian block).

    Dividing by the squared trace makes the purity of a block independent of
    its spin population, so a pure packet gives 1.
    """
    cell = rho.grid.spacing * rho.weight
    square = float(np.sum(np.abs(rho.data) ** 2) * cell * cell)
    return square / abs(rho.trace()) ** 2


def spin_coherence(rho: DensityMatrix) -> float:
    """``|int rho(x, x) dx|``; for the cross block this is ``|<sigma_+>|``."""
    return abs(rho.trace())


# --- coherence series and fits ----------------------------------------------------------

@dataclass(frozen=True)
class CoherenceSeries:
    separation: float
    times: np.ndarray
    magnitudes: np.ndarray
    basis: str
    method: str

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


def _offset_slice(rho: DensityMatrix, cells: int) -> np.ndarray:
    """Envelope entries ``f(a_i, a_i - cells * h)`` along one off-diagonal."""
    if rho.is_banded:
        if abs(cells) > rho.halfwidth:
            raise ValueError("separation lies outside the stored band")
        col = rho.data[:, cells + rho.halfwidth]
        rows = np.arange(rho.n)
        ok = (rows - cells >= 0) & (rows - cells < rho.n)
        return col[ok]
    return np.diagonal(rho.data, offset=-cells)


def _coherence(rho: DensityMatrix, separation: float, method: str, t: float,
               mass: float | None) -> float:
    grid = rho.grid
    cells = int(round(separation / grid.spacing))
    if abs(cells) >= grid.n:
        raise ValueError("separation outside grid")
    line = _offset_slice(rho, cells)
    if method == "peak":
        return float(np.abs(line).max())
    if method == "integrated":
        return float(abs(np.sum(line)) * grid.spacing)
    if method == "interaction":
        if rho.basis != MOMENTUM or mass is None:
            raise ValueError("interaction-picture coherence needs momentum data and a mass")
        p = grid.points
        rows = np.arange(grid.n)
        ok = (rows - cells >= 0) & (rows - cells < grid.n)
        P = p[ok] - 0.5 * cells * grid.spacing
        delta = cells * grid.spacing
        # undo free propagation: exp(i (p^2 - p'^2) t / 2 m hbar)
        phase = np.exp(1j * P * delta * t / (mass * rho.hbar))
        return float(abs(np.sum(phase * line)) * grid.spacing)
    raise ValueError(f"unknown coherence method {method!r}")


def coherence_series(snapshots: Sequence[tuple[float, DensityMatrix]], separation: float,
                     basis: str = POSITION, method: str | None = None,
                     mass: float | None = None) -> CoherenceSeries:
    """Coherence at a fixed separation, normalised by the first snapshot.

    Methods: ``"integrated"`` sums the off-diagonal line over the mean
    coordinate, which is blind to drift and free spreading; ``"peak"`` takes
    its largest magnitude; ``"interaction"`` (momentum basis only) removes the
    free-particle phase before summing.  The default is ``"integrated"`` in
    position and ``"interaction"`` in momentum.
    """
    if len(snapshots) < 4:
        raise ValueError("need at least 4 snapshots")
    if method is None:
        method = "integrated" if basis == POSITION else "interaction"
    times, mags = [], []
    for t, rho in snapshots:
        if basis == MOMENTUM and rho.basis == POSITION:
            rho = to_momentum(rho)
        elif rho.basis != basis:
            raise ValueError("snapshot basis does not match the requested basis")
        times.append(t)
        mags.append(_coherence(rho, separation, method, t, mass))
    mags = np.asarray(mags)
    if mags[0] <= 0:
        raise ValueError("initial coherence vanishes")
    return CoherenceSeries(separation, np.asarray(times, dtype=float), mags / mags[0], basis, method)


@dataclass(frozen=True)
class FitReport:
    model: str
    rate: float
    exponent: float
    residual: float
    window: tuple[float, float]
    intercept: float
    points: int

    @property
    def timescale(self) -> float:
        """Time at which the fitted exponent reaches one."""
        return self.rate ** (-1.0 / self.exponent) if self.rate > 0 else math.inf


def _fit_window(series: CoherenceSeries, t_max: float | None):
    t = series.times
    y = series.magnitudes
    keep = t > 0
    if t_max is not None:
        keep &= t <= t_max * (1 + 1e-12)
    below = np.nonzero(keep & (y < 1e-3))[0]
    if below.size:
        keep &= np.arange(t.size) < below[0]
    keep &= y > 0
    return t[keep], y[keep]


def fit_decay(series: CoherenceSeries, model: str = "exp_t", t_max: float | None = None,
              min_points: int = 6, require_decay: bool = True) -> FitReport:
    """Least-squares decay fit in log space.

    ``exp_t``: ``log y = c - rate t``.  ``exp_t3``: ``log y = c - rate t^3``.
    ``powerlaw``: ``log(-log y) = log rate + exponent log t`` using points
    with ``y < 0.95``.  The window runs from the first snapshot after zero
    until ``y`` drops below 1e-3 (and up to ``t_max`` when given).

    A series whose log drops by less than 0.5 is refused unless
    ``require_decay`` is false, which control runs use to bound a rate that
    should vanish.
    """
    t, y = _fit_window(series, t_max)
    if t.size < min_points:
        raise InsufficientDecay(f"only {t.size} points in the fit window; need {min_points}")
    logy = np.log(y)
    if require_decay:
        if -logy.min() < 0.5:
            raise InsufficientDecay(
                f"insufficient decay: largest log-drop {-logy.min():.3g} < 0.5")
        if -logy.min() < 1.0:
            warnings.warn("fit window spans less than one e-folding", stacklevel=2)
    if model in ("exp_t", "exp_t3"):
        power = 1.0 if model == "exp_t" else 3.0
        design = np.column_stack([np.ones_like(t), -t**power])
        coef, *_ = scipy.linalg.lstsq(design, logy)
        resid = logy - design @ coef
        intercept, rate, exponent = float(coef[0]), float(coef[1]), power
    elif model == "powerlaw":
        sel = y < 0.95
        if sel.sum() < 3:
            raise InsufficientDecay("too few points below 0.95 for a free-exponent fit")
        lt, lv = np.log(t[sel]), np.log(-logy[sel])
        design = np.column_stack([np.ones_like(lt), lt])
        coef, *_ = scipy.linalg.lstsq(design, lv)
        resid = lv - design @ coef
        intercept, rate, exponent = float(coef[0]), float(math.exp(coef[0])), float(coef[1])
        t = t[sel]
    else:
        raise ValueError(f"unknown decay model {model!r}")
    return FitReport(model=model, rate=rate, exponent=exponent,
                     residual=float(np.sqrt(np.mean(resid**2))),
                     window=(float(t[0]), float(t[-1])), intercept=intercept, points=int(t.size))


# --- pointer-state fit ------------------------------------------------------------------

@dataclass(frozen=True)
class PointerFit:
    center_x: float
    center_p: float
    width_x: float
    width_p: float
    phase_slope: float
    relative_residual: float
    coefficients: tuple[complex, ...]


def _quadratic_design(R: np.ndarray, r: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(R), R, r, R**2, R * r, r**2])


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


def _fit_phase(env: np.ndarray, mask: np.ndarray, x: np.ndarray, h: float) -> np.ndarray:
    """Quadratic phase coefficients from neighbour-to-neighbour phase increments.

    Increments are wrap-free as long as the phase changes by less than pi per
    cell; the constant term is left at zero.
    """
    blocks_a, blocks_b = [], []
    for axis in (0, 1):
        both = mask[:-1, :] & mask[1:, :] if axis == 0 else mask[:, :-1] & mask[:, 1:]
        i, j = np.nonzero(both)
        i2, j2 = (i + 1, j) if axis == 0 else (i, j + 1)
        inc = np.angle(env[i2, j2] * np.conj(env[i, j]))
        d0 = _quadratic_design(0.5 * (x[i] + x[j]), x[i] - x[j])
        d1 = _quadratic_design(0.5 * (x[i2] + x[j2]), x[i2] - x[j2])
        blocks_a.append((d1 - d0)[:, 1:])
        blocks_b.append(inc)
    coef, *_ = scipy.linalg.lstsq(np.vstack(blocks_a), np.concatenate(blocks_b))
    return np.concatenate([[0.0], coef])


def pointer_fit(rho: DensityMatrix, threshold: float = 1e-4,
                coherence_probe: float | None = None) -> PointerFit:
    """Fit ``log rho(R, r)`` by a complex quadratic in ``(R, r)``.

    The fit uses the moving-frame envelope; frame momentum and shift are
    added back to the centres.  ``relative_residual`` is the RMS misfit of
    the complex log divided by the RMS log-magnitude over points with
    ``|rho| >= threshold * max|rho|``.  When ``coherence_probe`` is given a
    warning is issued if the coherence at that separation is still above
    1e-2 of the peak.
    """
    if rho.basis != POSITION or not SpinSector(rho.sector).is_diagonal:
        raise ValueError("pointer_fit needs a diagonal-sector position-basis state")
    k, b = rho.phase_momenta
    if k != b:
        raise ValueError("ket and bra frame momenta must agree")
    env = rho.envelope()
    grid = rho.grid
    x = grid.points
    mag = np.abs(env)
    peak = mag.max()
    if coherence_probe is not None:
        cells = int(round(coherence_probe / grid.spacing))
        probe = np.abs(np.diagonal(env, offset=-cells)).max() / peak
        if probe > 1e-2:
            warnings.warn(f"coherence at separation {coherence_probe:g} is {probe:.3g} of the "
                          "peak; the state is not yet decohered", stacklevel=2)
    mask = mag >= threshold * peak
    rows, cols = np.nonzero(mask)
    R = 0.5 * (x[rows] + x[cols])
    r = x[rows] - x[cols]
    vals = env[rows, cols]
    logmag = np.log(np.abs(vals))
    design = _quadratic_design(R, r)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise np.linalg.LinAlgError("pointer fit is singular (state too flat or too narrow)")
    c_re, *_ = scipy.linalg.lstsq(design, logmag)
    if c_re[3] >= 0:
        raise np.linalg.LinAlgError("fitted profile does not decay along the diagonal")
    c_im = _fit_phase(env, mask, x, grid.spacing)
    # the constant phase is anchored at the largest entry
    i0, j0 = np.unravel_index(np.argmax(mag), mag.shape)
    anchor = _quadratic_design(np.array([0.5 * (x[i0] + x[j0])]), np.array([x[i0] - x[j0]]))[0]
    c_im[0] = np.angle(env[i0, j0]) - anchor[1:] @ c_im[1:]
    phase_misfit = _wrap(np.angle(vals) - design @ c_im)
    misfit = np.sqrt(np.mean((logmag - design @ c_re) ** 2 + phase_misfit**2))
    rel = float(misfit / np.sqrt(np.mean(logmag**2)))
    coef = c_re + 1j * c_im
    c_R, c_r, c_RR, c_Rr, c_rr = coef[1], coef[2], coef[3], coef[4], coef[5]
    center_env = float(-c_R.real / (2 * c_RR.real))
    # after integrating over R the r-profile is exp(c_rr' r^2 + c_r' r)
    c_rr_eff = c_rr - c_Rr**2 / (4 * c_RR)
    c_r_eff = c_r - c_Rr * c_R / (2 * c_RR)
    width_p = rho.hbar * math.sqrt(max(-2 * c_rr_eff.real, 0.0))
    slope = float(c_r_eff.imag)
    return PointerFit(
        center_x=center_env,
        center_p=float(k + rho.hbar * slope),
        width_x=float(math.sqrt(-1.0 / (2 * c_RR.real))),
        width_p=width_p,
        phase_slope=slope,
        relative_residual=rel,
        coefficients=tuple(complex(c) for c in coef),
    )


def trace_drift(snapshots: Sequence[tuple[float, DensityMatrix]]) -> float:
    traces = np.array([rho.trace() for _, rho in snapshots])
    return float(np.max(np.abs(traces - traces[0])))


def max_hermiticity_error(snapshots: Sequence[tuple[float, DensityMatrix]]) -> float:
    return max(rho.hermiticity_error() for _, rho in snapshots)
