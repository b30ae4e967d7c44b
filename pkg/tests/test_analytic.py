import math
import warnings

import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given
from hypothesis import strategies as st

from decolab.analysis import to_momentum
from decolab.analytic import (DEFAULT_POPULATION, LimitRegime, M_of_tau, N_of_tau,
                              exact_position_matrix, packet_coefficients, rho_momentum_exact,
                              rho_momentum_short_time, rho_position_exact,
                              rho_position_short_time, spin_coherence_exact, spread_of_time,
                              timescales)
from decolab.model import POSITION, DensityMatrix, Grid, PhysicalParams, TimescaleQuery

REFERENCE = PhysicalParams()

# High-precision (50 digit) evaluation of the closed-form position kernel at
# R = 0, r = 0.5, t = 5 with the reference parameters and population 1/2.
POSITION_KERNEL_R0_R05_T5 = complex(0.0111551857625649481105644172, -0.00780100752770169408180086821)
# Fourier integral of the position kernel at p = -2.3, p' = -2.6, t = 5,
# by a 6001^2 trapezoid sum over R in xb +- 45, r in +-14 (converged to 1e-16
# against 3001^2); independent of the closed momentum form.
MOMENTUM_KERNEL_T5 = complex(-0.05339726024383887, 0.2138099607327536)


def rel_err(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / np.max(np.abs(b))


# --- spreading functions ------------------------------------------------------------

def test_M_at_zero_is_sigma_squared():
    assert M_of_tau(0.0, PhysicalParams(packet_width=1.7)) == pytest.approx(1.7**2)


def test_M_small_tau_matches_free_spreading():
    # the thermal correction is O(tau^3) but carries D / gamma^3; kT = 1 keeps it below 0.3%
    p = REFERENCE.with_values(thermal_energy=1.0)
    tau = 1e-3
    t = tau / p.damping
    free = p.packet_width**2 + (p.hbar * t / (p.packet_width * p.mass)) ** 2
    assert M_of_tau(tau, p) == pytest.approx(free, rel=5e-3)


def test_M_large_tau_is_diffusive():
    p = REFERENCE
    tau = 50.0
    diffusive = p.derived().diffusion * 2 * tau / (2 * p.mass**2 * p.damping**3)
    assert M_of_tau(tau, p) / diffusive == pytest.approx(1.0, rel=0.1)


def test_M_rejects_zero_damping_and_negative_tau():
    with pytest.raises(ValueError, match="zero damping"):
        M_of_tau(1.0, REFERENCE.with_values(damping=0.0))
    with pytest.raises(ValueError):
        M_of_tau(-1.0, REFERENCE)


def test_spread_of_time_zero_damping_limit():
    p = REFERENCE.with_values(damping=0.0)
    t = np.array([0.0, 1.0, 7.0])
    assert np.allclose(spread_of_time(t, p), 1 + t**2)
    # the damped form approaches the undamped one continuously
    tiny = REFERENCE.with_values(damping=1e-9, thermal_energy=0.0)
    assert np.allclose(spread_of_time(t, tiny), 1 + t**2, rtol=1e-7)


def test_N_limits():
    p = REFERENCE
    assert N_of_tau(0.0, p) == pytest.approx(1.0)
    limit = p.derived().diffusion / (2 * p.hbar**2 * p.damping)
    assert N_of_tau(40.0, p) == pytest.approx(limit, rel=1e-12)
    assert N_of_tau(0.0, p.with_values(damping=0.0)) == pytest.approx(1.0)


def test_packet_coefficients_at_zero():
    c = packet_coefficients(0.0, "plus", REFERENCE)
    assert (c.center, c.momentum, c.coupling) == (0.0, 0.0, 0.0)
    assert c.curvature == pytest.approx(0.25)
    assert c.position_variance == pytest.approx(0.5)
    assert c.momentum_variance == pytest.approx(0.5)


@pytest.mark.parametrize("t", [1.0, 10.0])
def test_packet_follows_the_classical_trajectory(t):
    p = REFERENCE
    plus, minus = (packet_coefficients(t, s, p) for s in ("plus", "minus"))
    # one sector moves each way, by eps t^2 / 2m and eps t to first order in gamma t
    assert plus.center == -minus.center
    assert abs(plus.center) == pytest.approx(p.coupling * t**2 / 2, rel=p.damping * t)
    assert abs(plus.momentum) == pytest.approx(p.coupling * t, rel=p.damping * t)


# --- exact position kernel ----------------------------------------------------------

def test_initial_kernel_is_the_pure_packet():
    R, r = np.meshgrid(np.linspace(-3, 3, 13), np.linspace(-3, 3, 13))
    value = rho_position_exact(R, r, 0.0, "plus", REFERENCE)
    norm = DEFAULT_POPULATION / math.sqrt(math.pi)
    assert np.allclose(value, norm * np.exp(-r**2 / 4 - R**2), rtol=1e-13, atol=0)


@given(R=st.floats(-30, 30), r=st.floats(-10, 10), t=st.floats(0, 200))
def test_kernel_hermitian_in_r(R, r, t):
    a = rho_position_exact(R, r, t, "plus", REFERENCE)
    b = rho_position_exact(R, -r, t, "plus", REFERENCE)
    assert abs(a - np.conj(b)) <= 1e-12 * max(abs(a), 1e-300)


@given(R=st.floats(-2000, 200), t=st.floats(0, 200))
def test_kernel_diagonal_real_positive(R, t):
    value = rho_position_exact(R, 0.0, t, "plus", REFERENCE)
    assert value.imag == 0.0
    assert value.real >= 0.0


@given(R=st.floats(-50, 50), r=st.floats(-5, 5), t=st.floats(0, 100))
def test_sector_parity(R, r, t):
    # the minus sector is the mirror image of the plus sector
    plus = rho_position_exact(R, r, t, "plus", REFERENCE)
    minus = rho_position_exact(-R, -r, t, "minus", REFERENCE)
    assert abs(plus - minus) <= 1e-12 * max(abs(plus), 1e-300)


@pytest.mark.parametrize("t", [0.0, 3.0, 30.0])
@pytest.mark.parametrize("population", [0.5, 1.0])
def test_kernel_trace_equals_population(t, population):
    c = packet_coefficients(t, "plus", REFERENCE)
    R = np.linspace(c.center - 12 * math.sqrt(c.spread), c.center + 12 * math.sqrt(c.spread), 4001)
    diag = rho_position_exact(R, 0.0, t, "plus", REFERENCE, population)
    assert trapezoid(diag.real, R) == pytest.approx(population, rel=1e-10)


def test_kernel_regression_value():
    value = rho_position_exact(0.0, 0.5, 5.0, "plus", REFERENCE)
    assert value == pytest.approx(POSITION_KERNEL_R0_R05_T5, rel=1e-12)


def test_kernel_survives_huge_exponents():
    value = rho_position_exact(0.0, 400.0, 50.0, "plus", REFERENCE)
    assert value == 0.0 or np.isfinite(value)
    assert np.isfinite(rho_position_exact(-1e4, 1e-3, 1e3, "plus", REFERENCE))


def test_matrix_sampling_matches_pointwise_and_frames():
    c = packet_coefficients(4.0, "plus", REFERENCE)
    g = Grid.centered(48, 6.0, center=c.center)
    lab = exact_position_matrix(g, 4.0, "plus", REFERENCE)
    framed = exact_position_matrix(g, 4.0, "plus", REFERENCE, phase_momenta=(c.momentum, c.momentum))
    band = exact_position_matrix(g, 4.0, "plus", REFERENCE, halfwidth=10)
    x = g.points
    direct = rho_position_exact(0.5 * (x[:, None] + x[None, :]), x[:, None] - x[None, :], 4.0,
                                "plus", REFERENCE)
    assert rel_err(lab.data, direct) < 1e-13
    assert rel_err(framed.values, direct) < 1e-12
    assert np.allclose(band.to_dense().data[20, 15:26], lab.data[20, 15:26])


def test_shifted_origin_guards():
    g = Grid.centered(32, 4.0)
    with pytest.raises(ValueError, match="origin"):
        exact_position_matrix(g, 1.0, "plus", REFERENCE, phase_momenta=(1.0, 0.0), origin=3.0)
    shifted = exact_position_matrix(g, 1.0, "plus", REFERENCE, origin=2.0)
    plain = exact_position_matrix(g.shifted(2.0), 1.0, "plus", REFERENCE)
    assert rel_err(shifted.data, plain.data) < 1e-12


# --- short-time position form -------------------------------------------------------

def _short_time_deviation(gamma_t):
    # gamma = 1 keeps hbar t / (m sigma^2) small as well
    p = REFERENCE.with_values(damping=1.0)
    t = gamma_t
    c = packet_coefficients(t, "plus", p)
    x = c.center + np.linspace(-2.0, 2.0, 81)
    X, Xp = np.meshgrid(x, x, indexing="ij")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        approx = rho_position_short_time(X, Xp, t, "plus", p)
    exact = rho_position_exact(0.5 * (X + Xp), X - Xp, t, "plus", p)
    return rel_err(approx, exact)


def test_short_time_agrees_with_exact():
    assert _short_time_deviation(1e-3) <= 1e-3


def test_short_time_deviation_is_first_order():
    devs = [_short_time_deviation(g) for g in (1e-2, 1e-3, 1e-4)]
    for coarse, fine in zip(devs, devs[1:]):
        assert 0.05 <= fine / coarse <= 0.2


def test_short_time_warns_outside_its_regime():
    with pytest.warns(UserWarning, match="short-time"):
        rho_position_short_time(0.0, 0.0, 100.0, "plus", REFERENCE)


def test_short_time_without_bath_keeps_the_pure_packet():
    p = REFERENCE.with_values(damping=0.0)
    x = np.linspace(-3, 3, 7)
    value = rho_position_short_time(x[:, None], x[None, :], 1e-3, "plus", p)
    cold = rho_position_short_time(x[:, None], x[None, :], 1e-3, "plus",
                                   p.with_values(thermal_energy=0.0))
    assert np.array_equal(value, cold)
    # pure up to the frozen-width error (hbar t r / 2 m sigma^2)^2 ~ 1e-5
    psi = rho_position_short_time(x, x, 1e-3, "plus", p)
    assert np.allclose(np.abs(value) ** 2, np.outer(psi.real, psi.real), rtol=1e-4, atol=0)


def test_short_time_decay_factor():
    t, r = 1e-3, 2.0
    hot = REFERENCE.with_values(damping=1.0)
    cold = hot.with_values(thermal_energy=0.0)
    ratio = abs(rho_position_short_time(1.0, 1.0 - r, t, "plus", hot)
                / rho_position_short_time(1.0, 1.0 - r, t, "plus", cold))
    expected = math.exp(-2 * hot.mass * hot.damping * hot.thermal_energy * r**2 * t)
    assert ratio == pytest.approx(expected, rel=1e-6)


# --- momentum kernels ---------------------------------------------------------------

def test_momentum_kernel_at_zero_time():
    Q, q = np.meshgrid(np.linspace(-3, 3, 7), np.linspace(-3, 3, 7))
    value = rho_momentum_exact(Q, q, 0.0, "plus", REFERENCE)
    norm = DEFAULT_POPULATION / math.sqrt(math.pi)
    assert np.allclose(value, norm * np.exp(-Q**2 / 4 - q**2), rtol=1e-13, atol=0)


@given(Q=st.floats(-5, 5), q=st.floats(-30, 30), t=st.floats(0, 100))
def test_momentum_kernel_hermitian(Q, q, t):
    a = rho_momentum_exact(Q, q, t, "plus", REFERENCE)
    b = rho_momentum_exact(-Q, q, t, "plus", REFERENCE)
    assert abs(a - np.conj(b)) <= 1e-12 * max(abs(a), 1e-300)


def test_momentum_kernel_regression_value():
    p, pp = -2.3, -2.6
    value = rho_momentum_exact(p - pp, 0.5 * (p + pp), 5.0, "plus", REFERENCE)
    assert value == pytest.approx(MOMENTUM_KERNEL_T5, rel=1e-9)


@pytest.mark.parametrize("t, n, half", [(0.0, 128, 10.0), (5.0, 512, 40.0)])
def test_momentum_kernel_matches_fft_of_position_kernel(t, n, half):
    c = packet_coefficients(t, "plus", REFERENCE)
    rho = exact_position_matrix(Grid.centered(n, half, center=c.center), t, "plus", REFERENCE,
                                phase_momenta=(c.momentum, c.momentum))
    mom = to_momentum(rho)
    P = mom.grid.points
    direct = rho_momentum_exact(P[:, None] - P[None, :], 0.5 * (P[:, None] + P[None, :]),
                                t, "plus", REFERENCE)
    assert rel_err(mom.data, direct) < 1e-12


def test_momentum_short_time_diagonal_has_no_decay():
    hot = REFERENCE.with_values(damping=0.005)
    cold = hot.with_values(thermal_energy=0.0)
    p = np.linspace(-4, 4, 9)
    a = rho_momentum_short_time(p, p, 1.0, "plus", hot)
    b = rho_momentum_short_time(p, p, 1.0, "plus", cold)
    assert np.allclose(a, b)
    centre = -hot.coupling * 1.0
    assert np.argmax(a.real) == np.argmin(np.abs(p - centre))


def test_momentum_short_time_cubic_law():
    hot = REFERENCE.with_values(damping=0.001)
    cold = hot.with_values(thermal_energy=0.0)

    def log_decay(t):
        return -math.log(abs(rho_momentum_short_time(0.7, -0.5, t, "plus", hot)
                             / rho_momentum_short_time(0.7, -0.5, t, "plus", cold)))

    assert log_decay(4.0) / log_decay(2.0) == pytest.approx(8.0, rel=1e-12)


def test_momentum_short_time_matches_fft_of_position_short_time():
    # gamma t = 1e-3 and hbar t / (m sigma^2) = 1e-2; large kT makes the t^3 decay visible
    p = REFERENCE.with_values(damping=0.1, thermal_energy=1e5)
    t = 0.01
    g = Grid.centered(640, 6.39)
    x = g.points
    pos = rho_position_short_time(x[:, None], x[None, :], t, "plus", p)
    mom = to_momentum(DensityMatrix(POSITION, "plus", g, np.asarray(pos, dtype=complex)))
    P = mom.grid.points
    direct = rho_momentum_short_time(P[:, None], P[None, :], t, "plus", p)
    for separation in (1.0, 2.0):
        k = int(round(separation / mom.grid.spacing))
        fft_line = np.abs(np.diagonal(mom.data, -k)).max() / np.abs(np.diagonal(mom.data)).max()
        direct_line = np.abs(np.diagonal(direct, -k)).max() / np.abs(np.diagonal(direct)).max()
        assert fft_line == pytest.approx(direct_line, rel=0.1)


# --- spin coherence -----------------------------------------------------------------

def test_spin_coherence_factors():
    p = PhysicalParams(coupling=1.0, damping=10.0, thermal_energy=10.0, packet_width=0.25)
    t = np.linspace(0, 2, 9)
    full = spin_coherence_exact(t, p)
    bath = spin_coherence_exact(t, p, unitary=False)
    cold = spin_coherence_exact(t, p.with_values(thermal_energy=0.0))
    assert np.allclose(full, bath * cold, rtol=1e-12)
    assert np.allclose(spin_coherence_exact(t, p.with_values(thermal_energy=0.0), unitary=False), 1)
    assert np.allclose(spin_coherence_exact(t, p.with_values(coupling=0.0)), 1)
    assert np.all(np.diff(bath) < 0)


# --- timescales ---------------------------------------------------------------------

def test_macroscopic_estimate():
    si = PhysicalParams.from_si(1e-3, 300.0, damping=1.0)
    report = timescales(TimescaleQuery(si, separation_x=1e-2))
    assert report.zurek_time * si.damping == pytest.approx(1.3e-41, rel=0.05)
    assert report.zurek_time == report.position_time


def test_position_time_inverse_square():
    a = timescales(TimescaleQuery(REFERENCE, separation_x=1.0)).position_time
    b = timescales(TimescaleQuery(REFERENCE, separation_x=2.0)).position_time
    assert b == pytest.approx(a / 4, rel=1e-14)


def test_momentum_time_value():
    report = timescales(TimescaleQuery(REFERENCE, separation_p=1.0))
    assert report.momentum_time == pytest.approx(150 ** (1 / 3), rel=1e-12)
    assert report.momentum_time == pytest.approx(5.313, abs=1e-3)
    assert report.position_time is None and report.zurek_time is None


def test_prior_momentum_time_value():
    report = timescales(TimescaleQuery(REFERENCE, separation_p=2.0))
    assert report.prior_momentum_time == pytest.approx(1e-3 / (2 * 10 * 4))


@pytest.mark.parametrize("change", [{"damping": 0.0}, {"thermal_energy": 0.0}])
def test_decoupled_bath_gives_infinite_times(change):
    report = timescales(TimescaleQuery(REFERENCE.with_values(**change),
                                       separation_x=1.0, separation_p=1.0))
    assert report.position_time == math.inf
    assert report.momentum_time == math.inf
    assert report.spin_time == math.inf


def test_zero_field_gives_infinite_spin_time():
    report = timescales(TimescaleQuery(REFERENCE.with_values(coupling=0.0), separation_x=1.0))
    assert report.spin_time == math.inf
    assert math.isfinite(report.position_time)


positive = st.floats(1e-3, 1e3)


@given(gamma=positive, kT=positive, sep=positive, factor=st.floats(1.01, 10.0))
def test_timescale_monotonicity(gamma, kT, sep, factor):
    base = PhysicalParams(damping=gamma, thermal_energy=kT)
    ref = timescales(TimescaleQuery(base, separation_x=sep, separation_p=sep))
    for changed, query_sep in (({"damping": gamma * factor}, sep),
                               ({"thermal_energy": kT * factor}, sep),
                               ({}, sep * factor)):
        other = timescales(TimescaleQuery(base.with_values(**changed),
                                          separation_x=query_sep, separation_p=query_sep))
        assert other.position_time < ref.position_time
        assert other.momentum_time < ref.momentum_time


def test_limit_regime_tags():
    assert {r.value for r in LimitRegime} == {"exact", "short_time"}
