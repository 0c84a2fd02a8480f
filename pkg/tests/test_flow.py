import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from velocity_edit.flow import (ConstantField, GuidanceConfig, LinearField, Schedule, cfg_velocity, estimate_x0,
                                euler_sample, interpolate)
from velocity_edit.toy.oracle import GaussianOracleField, oracle_velocity

finite = st.floats(-10, 10)
vec3 = arrays(np.float64, 3, elements=finite)
unit = st.floats(0.0, 1.0)


# -- interpolation and clean-sample estimate -------------------------------------

def test_interpolate_endpoints_and_midpoint():
    x0, eps = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    assert np.array_equal(interpolate(x0, eps, 0.0), x0)
    assert np.array_equal(interpolate(x0, eps, 1.0), eps)
    assert interpolate(np.zeros(1), np.full(1, 2.0), 0.5)[0] == 1.0


def test_interpolate_errors():
    with pytest.raises(ValueError):
        interpolate(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        interpolate(np.zeros(2), np.zeros(2), 1.5)


def test_estimate_x0_examples():
    assert estimate_x0(np.array([2.0]), 0.5, np.array([2.0]))[0] == 1.0
    x = np.array([0.3, -0.7])
    assert np.array_equal(estimate_x0(x, 0.0, np.array([5.0, 5.0])), x)
    with pytest.raises(ValueError):
        estimate_x0(np.zeros(2), 0.5, np.zeros(3))


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, unit, unit)
def test_interpolate_is_affine_in_t(x0, eps, a, b):
    mid = interpolate(x0, eps, (a + b) / 2)
    avg = (interpolate(x0, eps, a) + interpolate(x0, eps, b)) / 2
    assert np.allclose(mid, avg, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, unit)
def test_teacher_velocity_recovers_x0(x0, eps, t):
    x = interpolate(x0, eps, t)
    assert np.allclose(estimate_x0(x, t, eps - x0), x0, atol=1e-12)


# -- guidance ------------------------------------------------------------------

def test_cfg_weight_nine_example():
    # scalar field equal to the embedding's first entry: v_c = 1.0, v_phi = 0.5
    f = LinearField(np.zeros((1, 1)), np.array([[1.0, 0.0]]), np.zeros(1))
    out = cfg_velocity(f, np.zeros(1), 0.5, np.array([1.0, 0.0]), np.array([0.5, 0.0]), 9.0)
    assert out[0] == pytest.approx(5.5, abs=1e-12)


def test_cfg_zero_weight_and_equal_conditions(rng):
    f = LinearField(rng.standard_normal((3, 3)), rng.standard_normal((3, 8)), rng.standard_normal(3))
    x, c, phi = rng.standard_normal(3), rng.standard_normal(8), rng.standard_normal(8)
    assert np.array_equal(cfg_velocity(f, x, 0.3, c, phi, 0.0), f(x, 0.3, c))
    assert np.allclose(cfg_velocity(f, x, 0.3, c, c, 7.0), f(x, 0.3, c), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 20), st.integers(0, 2**31))
def test_cfg_is_affine_in_omega(omega, seed):
    rng = np.random.default_rng(seed)
    f = LinearField(rng.standard_normal((3, 3)), rng.standard_normal((3, 8)), rng.standard_normal(3))
    x, c, phi = rng.standard_normal(3), rng.standard_normal(8), rng.standard_normal(8)
    expected = cfg_velocity(f, x, 0.4, c, phi, 0.0) + omega * (f(x, 0.4, c) - f(x, 0.4, phi))
    assert np.allclose(cfg_velocity(f, x, 0.4, c, phi, omega), expected, atol=1e-9)


def test_guidance_gating():
    s = Schedule()
    g = GuidanceConfig()
    assert g.gated(s, 0.8) == (1.5, 9.0)
    assert g.gated(s, 0.6) == (1.5, 9.0)
    assert g.gated(s, 0.48) == (0.0, 0.0)


# -- schedule ------------------------------------------------------------------

def test_schedule_grid_and_default_window():
    s = Schedule()
    ts = s.timesteps
    assert ts[0] == 1.0 and ts[-1] == 0.0 and len(ts) == 26
    assert np.all(np.diff(ts) < 0)
    assert s.active_steps == list(range(13, 25))
    assert all(s.dt(k) < 0 for k in range(25))
    assert s.t(13) == pytest.approx(0.48)
    # the default window sits entirely below the guidance interval
    assert not any(s.cfg_on(s.t(k)) for k in s.active_steps)


@pytest.mark.parametrize("kw", [dict(T=0), dict(n_max=30), dict(n_min=5, n_max=3), dict(cfg_interval=(0.9, 0.1))])
def test_schedule_rejects_invalid(kw):
    with pytest.raises(ValueError):
        Schedule(**kw)


# -- Euler -------------------------------------------------------------------------

def test_euler_constant_field_is_exact(rng):
    u, eps = rng.standard_normal(4), rng.standard_normal(4)
    out = euler_sample(ConstantField(u), Schedule.sampling(7), eps, np.zeros(8), np.zeros(8), 0.0)
    assert np.allclose(out, eps - u, atol=1e-12)


def test_euler_teacher_field_recovers_x0(rng):
    x0, eps = rng.standard_normal(4), rng.standard_normal(4)
    for T in (1, 3, 25):
        out = euler_sample(ConstantField(eps - x0), Schedule.sampling(T), eps, np.zeros(8), np.zeros(8), 0.0)
        assert np.allclose(out, x0, atol=1e-12)


def linear_flow_errors(Ts=(25, 50, 100), seed=0):
    """Euler error against the exact solution ``x(0) = expm(-A) x(1)`` of ``dx/dt = A x``."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    lam = np.array([-1.0, -0.5, 0.5, 1.2])
    A = q @ np.diag(lam) @ q.T
    exact_map = q @ np.diag(np.exp(-lam)) @ q.T     # symmetric A: expm via eigen-decomposition
    x1 = rng.standard_normal(4)
    field = LinearField(A, np.zeros((4, 8)), np.zeros(4))
    errs = [np.linalg.norm(euler_sample(field, Schedule.sampling(T), x1, np.zeros(8), np.zeros(8), 0.0) - exact_map @ x1)
            for T in Ts]
    return errs


def test_euler_first_order_convergence():
    errs = linear_flow_errors()
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(1.6 <= r <= 2.4 for r in ratios), ratios


# -- Gaussian oracle ------------------------------------------------------------------

def test_oracle_limits():
    m = np.array([0.5, -1.0])
    f = GaussianOracleField(m, 0.7)
    x = np.array([[0.3, 2.0]])
    assert np.allclose(f.velocity(x, 1.0, np.zeros(8)), x - m, atol=1e-12)
    g = GaussianOracleField(np.zeros(3), 1.0)
    for t in (0.1, 0.5, 0.9):
        assert np.array_equal(g.velocity(np.zeros((1, 3)), t, np.zeros(8)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        GaussianOracleField(m, 0.0)


def test_oracle_ignores_condition(rng):
    f = GaussianOracleField(np.array([1.0, 2.0]), 0.5)
    x = rng.standard_normal(2)
    assert np.array_equal(f(x, 0.4, rng.standard_normal(8)), f(x, 0.4, np.zeros(8)))


def monte_carlo_regression(m: float, s: float, t: float, n: int, rng):
    """Least-squares fit of ``eps - x0`` on ``x_t`` from samples of the joint law."""
    x0 = m + s * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    xt = (1 - t) * x0 + t * eps
    y = eps - x0
    X = np.stack([np.ones(n), xt], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    cov = np.linalg.inv(X.T @ X) * (resid @ resid) / (n - 2)
    return coef, cov


def test_oracle_matches_monte_carlo_regression():
    rng = np.random.default_rng(7)
    m, s = 0.8, 0.6
    misses = 0
    for t in (0.2, 0.5, 0.8, 0.95):
        coef, cov = monte_carlo_regression(m, s, t, 100_000, rng)
        for x in np.linspace(-2, 2, 5):
            basis = np.array([1.0, x])
            se = np.sqrt(basis @ cov @ basis)
            misses += abs(basis @ coef - oracle_velocity(x, t, m, s)) > 2 * se
    assert misses == 0  # 20 probe points


def test_oracle_transport_statistics():
    m, s = np.array([1.0, -0.5, 2.0]), 0.5
    rng = np.random.default_rng(3)
    eps = rng.standard_normal((1000, 3))
    out = euler_sample(GaussianOracleField(m, s), Schedule.sampling(200), eps, np.zeros(8), np.zeros(8), 0.0)
    assert np.all(np.abs(out.mean(axis=0) - m) <= 0.1)
    assert np.all(np.abs(out.std(axis=0) - s) <= 0.1)


def test_field_call_validates_shapes(rng):
    f = LinearField(np.eye(3), np.zeros((3, 8)), np.zeros(3))
    with pytest.raises(ValueError):
        f(np.zeros(4), 0.5, np.zeros(8))
    with pytest.raises(ValueError):
        f(np.zeros(3), 0.5, np.zeros(5))
    assert f(np.ones((2, 3)), 0.5, np.zeros(8)).shape == (2, 3)
