import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condemp.diffusion import (
    NoSurvivorError,
    SdeConfig,
    bismut_gradient,
    bridge_kill_probability,
    conditional_estimator,
    ricci_h,
    scaled_survival,
    simulate_h_path,
    simulate_killed_path,
    survival_fraction,
    write_path_csv,
)
from condemp.spectral import solve_interval_eigensystem, spectral_survival


def bridge_hit_mc(a, b, h, n=4000, steps=2000, seed=0):
    """Fraction of discretised bridges (variance rate 2) that dip below zero."""
    rng = np.random.default_rng(seed)
    s = np.linspace(0, 1, steps + 1)
    dW = rng.standard_normal((n, steps)) * math.sqrt(2 * h / steps)
    W = np.concatenate([np.zeros((n, 1)), np.cumsum(dW, axis=1)], axis=1)
    bridge = a + W - s * W[:, -1:] + s * (b - a)
    return (bridge.min(axis=1) < 0).mean()


def test_bridge_probability_values():
    assert bridge_kill_probability(1.0, 1.0, 1.0) == pytest.approx(math.exp(-1))
    assert bridge_kill_probability(0.0, 0.3, 0.1) == 1.0
    # fine discretisations underestimate crossings slightly
    p = bridge_kill_probability(0.05, 0.08, 0.004)
    mc = bridge_hit_mc(0.05, 0.08, 0.004)
    assert mc == pytest.approx(float(p), abs=0.03)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0), st.floats(1e-5, 1.0))
def test_bridge_probability_is_monotone(a, b, h):
    p = float(bridge_kill_probability(a, b, h))
    assert 0.0 <= p <= 1.0
    assert float(bridge_kill_probability(a * 1.1, b, h)) <= p
    assert float(bridge_kill_probability(a, b, h * 1.1)) >= p


def test_config_validation():
    with pytest.raises(ValueError):
        SdeConfig(h=0)
    with pytest.raises(ValueError):
        SdeConfig(scheme="milstein")
    with pytest.raises(ValueError):
        SdeConfig(substep_factor=1)


def test_horizon_must_be_a_step_multiple(unit64):
    with pytest.raises(ValueError, match="multiple"):
        simulate_killed_path(unit64, [0.5], 0.10005)


def test_coarse_bridge_survival_is_unbiased(unit64):
    # with the bridge correction even h = 0.01 has no exit bias for V = 0
    exact = spectral_survival(unit64, [0.5], 0.3)
    p, se = survival_fraction(unit64, [0.5], 0.3, 20000, SdeConfig(h=0.01), seed=11)
    assert abs(p - exact) < 4 * se


def test_killed_survival_with_drift():
    E = solve_interval_eigensystem(1.0, "1.5 * x", 64, n=2048)
    exact = spectral_survival(E, [0.4], 0.2)
    p, se = survival_fraction(E, [0.4], 0.2, 20000, SdeConfig(h=1e-3), seed=3)
    assert abs(p - exact) < 4 * se + 2e-3


def test_killed_path_records_and_kills(unit64):
    p = simulate_killed_path(unit64, [0.5], 0.1, seed=1, replica=2, record=0.05)
    assert len(p.positions) <= 51
    q = simulate_killed_path(unit64, [0.0], 0.1)
    assert not q.survived and q.tau == 0.0 and len(q.positions) == 1
    dead = [simulate_killed_path(unit64, [0.5], 1.0, seed=0, replica=i) for i in range(30)]
    for d in dead:
        if not d.survived:
            assert 0 < d.tau <= 1.0


def test_paths_are_reproducible_and_distinct(unit64):
    a = simulate_h_path(unit64, "ground", 0.5, seed=4, replica=7)
    b = simulate_h_path(unit64, "ground", 0.5, seed=4, replica=7)
    c = simulate_h_path(unit64, "ground", 0.5, seed=4, replica=8)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_h_path_stays_inside(square):
    p = simulate_h_path(square, "uniform", 5.0, seed=2)
    assert p.survived
    assert np.all((p.positions > 0) & (p.positions < 1))
    assert p.diagnostics["phi0_inv2_integral"] > 0


def test_h_semigroup_transition(unit64):
    # E_x[U_1(X_t)] = exp(-3 pi^2 t) U_1(x) for the conditioned process
    x, t, n = 0.1, 0.05, 4000
    vals = []
    for i in range(n):
        p = simulate_h_path(unit64, None, t, SdeConfig(h=1e-4), seed=9, replica=i, record=0, x0=[x])
        vals.append(2 * math.cos(math.pi * p.final[0]))
    vals = np.array(vals)
    target = math.exp(-3 * math.pi ** 2 * t) * 2 * math.cos(math.pi * x)
    assert abs(vals.mean() - target) < 4 * vals.std() / math.sqrt(n)


def test_scaled_survival_identity(unit64):
    v, se = scaled_survival(unit64, [0.5], 2.0, 1500, seed=5)
    assert abs(v - 4 / math.pi) < 4 * se


def test_conditional_estimator_contracts(unit64):
    F = lambda p: p.positions[-1, 0]
    with pytest.raises(ValueError):
        conditional_estimator(unit64, [0.5], F, 1.0, 0.5)
    with pytest.raises(ValueError):
        conditional_estimator(unit64, [0.5], F, 0.1, 0.2, method="naive")
    with pytest.raises(NoSurvivorError):
        conditional_estimator(unit64, [0.5], F, 0.1, 3.0, method="rejection", N=20)
    est = conditional_estimator(unit64, [0.5], F, 0.2, 0.4, N=400, seed=1)
    # symmetric problem: mean position is the centre
    assert abs(est.estimate - 0.5) < 4 * est.se
    assert est.n_used == 400 and est.ess > 100


def test_low_ess_warning(unit64):
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        est = conditional_estimator(unit64, [0.5], lambda p: 1.0, 0.1, 0.2, N=3)
    assert est.low_ess and any("effective sample size" in str(w.message) for w in rec)


def test_ricci_matches_closed_form_and_fd():
    E = solve_interval_eigensystem(1.0, None, 16)
    F = solve_interval_eigensystem(1.0, "0 * x", 16, n=4096, method="fd")
    x = np.array([0.2, 0.5, 0.7])
    exact = 2 * math.pi ** 2 / np.sin(math.pi * x) ** 2
    assert np.allclose(ricci_h(E, x)[:, 0], exact)
    assert np.allclose(ricci_h(F, x)[:, 0], exact, rtol=1e-3)


def test_bismut_constant_function(unit64):
    g, se = bismut_gradient(unit64, lambda y: np.ones(len(y)), 0.2, [0.5], N=2000, seed=2)
    assert abs(g[0]) < 4 * se[0]
    with pytest.raises(ValueError, match="gamma"):
        bismut_gradient(unit64, lambda y: y[:, 0], 0.2, [0.5], N=2, gamma=lambda s: s)


def test_bismut_off_centre(unit64):
    # exact gradient of P_t^0 f at x = 0.3 for f = 2 cos(pi x)
    t, x = 0.1, 0.3
    g, se = bismut_gradient(unit64, lambda y: 2 * np.cos(np.pi * y[:, 0]), t, [x], N=6000, seed=8)
    exact = -2 * math.pi * math.sin(math.pi * x) * math.exp(-3 * math.pi ** 2 * t)
    assert abs(g[0] - exact) < 4 * se[0]


def test_path_csv(tmp_path, unit64):
    p = simulate_h_path(unit64, "ground", 0.01, seed=0)
    f = tmp_path / "path.csv"
    write_path_csv(p, f, unit64)
    rows = f.read_text().splitlines()
    assert rows[0] == "time,x1,phi0" and len(rows) == 12
    t, x, phi = map(float, rows[-1].split(","))
    assert t == pytest.approx(0.01) and phi == pytest.approx(math.sqrt(2) * math.sin(math.pi * x))
