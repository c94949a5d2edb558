import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from condemp.diffusion import PathSample, simulate_h_path
from condemp.measures import (
    EmpiricalMeasure,
    SpectralCoefficients,
    SpectralDensity,
    amb_upper_bound,
    density_measure_1d,
    grid_measure,
    hminus1_functional,
    log_mean,
    path_to_empirical,
    psi_coefficients,
    regularize_density,
    smoothed_density,
    write_psi_csv,
)
from condemp.spectral import solve_interval_eigensystem
from condemp.transport import w2_1d_exact


def fake_path(x, h=0.01):
    x = np.asarray(x, dtype=float)
    return PathSample(h=h, positions=x.reshape(len(x), -1), survived=True, tau=np.inf)


def dual_sobolev_quadrature(rho):
    """Negative Sobolev norm of rho - 1 against mu_0 = 2 sin^2(pi x) dx on [0, 1].

    In one dimension the potential solves (phi0^2 u')' = (rho - 1) phi0^2, so
    the norm is the integral of F^2 / phi0^2 with F the cumulative defect.
    """
    x = np.linspace(0, 1, 200001)
    p2 = 2 * np.sin(np.pi * x) ** 2
    F = integrate.cumulative_trapezoid((rho(x) - 1) * p2, x, initial=0)
    inner = slice(1, -1)
    return integrate.simpson(F[inner] ** 2 / p2[inner], x=x[inner])


def test_empirical_measure_validation():
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.1, 0.2], [1.0])
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.1], [-1.0])
    assert EmpiricalMeasure([0.1, 0.2], [0.5, 0.5]).dim == 1


def test_trapezoid_occupation_measure():
    p = fake_path(np.linspace(0.1, 0.9, 11), h=0.1)
    m = path_to_empirical(p, 1.0)
    assert m.mass == pytest.approx(1.0)
    assert m.weights[0] == pytest.approx(0.05) and m.weights[5] == pytest.approx(0.1)
    assert len(path_to_empirical(p, 0.5)) == 6
    single = path_to_empirical(fake_path([0.3]), 0.0)
    assert len(single) == 1 and single.weights[0] == 1.0
    with pytest.raises(ValueError, match="grid"):
        path_to_empirical(p, 0.55)
    with pytest.raises(ValueError, match="cover"):
        path_to_empirical(p, 2.0)


def test_grid_measure():
    p = fake_path(np.linspace(0.0, 1.0, 101), h=0.01)
    m = grid_measure(p, 1.0, 4)
    assert np.allclose(m.points[:, 0], [0.0, 0.25, 0.5, 0.75])
    assert np.allclose(m.weights, 0.25)


def test_psi_closed_form_kernels_match_direct(unit64, square):
    for E in (unit64, square):
        p = simulate_h_path(E, "ground", 1.0, seed=1)
        c = psi_coefficients(p, E, 1.0)
        w = np.full(len(p.positions), 1.0 / (len(p.positions) - 1))
        w[[0, -1]] /= 2
        direct = w @ E.ratio(p.positions, np.arange(E.n_modes))
        assert c.values[0] == 1.0
        assert np.allclose(c.values[1:], direct[1:], atol=1e-12)
        assert not c.flagged


def test_psi_tabulated_system():
    E = solve_interval_eigensystem(1.0, "0.5 * x", 16, n=2048)
    p = fake_path(np.linspace(0.2, 0.6, 41), h=0.025)
    c = psi_coefficients(p, E, 1.0, M=8)
    assert c.n_modes == 8
    with pytest.raises(ValueError):
        psi_coefficients(p, E, 1.0, M=100)


def test_hminus1_against_quadrature(unit64):
    coef = np.zeros(unit64.n_modes)
    coef[0] = 1.0
    coef[1:6] = [0.05, -0.03, 0.02, 0.01, -0.01]
    c = SpectralCoefficients(1.0, coef)
    rho = SpectralDensity(unit64, coef)
    val = hminus1_functional(c, unit64, 0.0)
    assert val.value == pytest.approx(dual_sobolev_quadrature(lambda x: rho(x[:, None])), rel=1e-6)
    assert math.isinf(val.tail_bound)
    damped = hminus1_functional(c, unit64, 0.05)
    assert damped.value < val.value and math.isfinite(damped.tail_bound)


def test_smoothed_density_integrates_to_one(square):
    p = simulate_h_path(square, "ground", 0.5, seed=3)
    c = psi_coefficients(p, square, 0.5)
    rho = smoothed_density(c, square, 0.02)
    x = np.linspace(0.0025, 0.9975, 200)
    X, Y = np.meshgrid(x, x)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    mass = np.mean(rho(pts) * square.ground.pdf(pts))
    assert mass == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(ValueError):
        smoothed_density(c, square, 0.0)


def test_regularize_composes():
    rho = SpectralDensity(solve_interval_eigensystem(1.0, None, 8), np.r_[0.0, 0.5, np.zeros(6)])
    r2 = regularize_density(regularize_density(rho, 0.2), 0.5)
    assert r2.mix == pytest.approx(1 - 0.8 * 0.5)
    assert regularize_density(np.array([0.0, 2.0]), 0.5).tolist() == [0.5, 1.5]
    f = regularize_density(lambda x: np.zeros(len(x)), 0.25)
    assert f(np.zeros((3, 1))).tolist() == [0.25] * 3
    with pytest.raises(ValueError):
        regularize_density(rho, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6))
def test_log_mean_between_geometric_and_arithmetic(a, b):
    m = float(log_mean(a, b))
    assert math.sqrt(a * b) * (1 - 1e-9) <= m <= (a + b) / 2 * (1 + 1e-9)
    assert m == pytest.approx(float(log_mean(b, a)), rel=1e-12)


def test_log_mean_near_diagonal():
    assert float(log_mean(1.0, 1.0)) == 1.0
    assert float(log_mean(1 + 1e-8, 1.0)) == pytest.approx(1 + 5e-9, rel=1e-15)
    assert float(log_mean(math.e, 1.0)) == pytest.approx(math.e - 1)


def test_amb_bounds_transport_cost(unit64):
    for c1 in (0.01, 0.2):
        coef = np.zeros(unit64.n_modes)
        coef[0], coef[1], coef[2] = 1.0, c1, -c1 / 2
        c = SpectralCoefficients(1.0, coef)
        rho = smoothed_density(c, unit64, 1e-3)
        bound = amb_upper_bound(rho, c, unit64, 1e-3)
        w2 = w2_1d_exact(density_measure_1d(rho, unit64), unit64.ground.factors[0]).cost
        h1 = hminus1_functional(c, unit64, 1e-3).value
        assert w2 <= bound * (1 + 1e-6)
        if c1 == 0.01:
            # linear regime: all three agree to second order
            assert w2 == pytest.approx(h1, rel=0.05) and bound == pytest.approx(h1, rel=0.05)


def test_amb_reference_value(unit64):
    coef = np.zeros(unit64.n_modes)
    coef[0], coef[1] = 1.0, 0.01
    c = SpectralCoefficients(1.0, coef)
    bound = amb_upper_bound(smoothed_density(c, unit64, 0.1), c, unit64, 0.1)
    assert bound == pytest.approx(1e-4 * math.exp(-0.6 * math.pi ** 2) / (3 * math.pi ** 2), rel=1e-4)


def test_amb_rejects_nonpositive_density(unit64):
    coef = np.zeros(unit64.n_modes)
    coef[0], coef[1] = 1.0, 2.0
    c = SpectralCoefficients(1.0, coef)
    with pytest.raises(ValueError, match="positive"):
        amb_upper_bound(SpectralDensity(unit64, coef), c, unit64, 0.0)


def test_psi_csv(tmp_path):
    c = SpectralCoefficients(1.0, np.array([1.0, 0.25, -0.5]))
    f = tmp_path / "psi.csv"
    write_psi_csv([(0, c), (1, c)], f)
    rows = f.read_text().splitlines()
    assert rows[0] == "replica,m,psi_m" and rows[3] == "0,2,-0.5" and len(rows) == 7
