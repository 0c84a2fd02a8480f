import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from velocity_edit.flow import GuidanceConfig, LinearField, Schedule
from velocity_edit.flowedit import (EditDiverged, couple, edit_loop, plain_mean, residual_diagnostic, step_noises,
                                    vdelta_sample)
from velocity_edit.toy.nets import DenseVelocityNet, ToyNet

# dyadic rationals with few significant bits: sums and differences are exact in float64
dyadic = st.integers(-2**20, 2**20).map(lambda i: i / 2**10)
dyadic_vec = arrays(np.float64, 6, elements=dyadic)
dyadic_t = st.integers(0, 16).map(lambda i: i / 16)
real_vec = arrays(np.float64, 6, elements=st.floats(-10, 10))


def random_linear_field(rng, n=6, d=8):
    return LinearField(rng.standard_normal((n, n)), rng.standard_normal((n, d)), rng.standard_normal(n))


# -- coupling ---------------------------------------------------------------------

def test_zero_offset_and_endpoint(rng):
    x, eps = rng.standard_normal(6), rng.standard_normal(6)
    pair = couple(x, x, eps, 0.37)
    assert np.array_equal(pair.z_tgt, pair.z_src)
    z = rng.standard_normal(6)
    pair = couple(x, z, eps, 0.0)
    assert np.array_equal(pair.z_src, x) and np.array_equal(pair.z_tgt, z)


@settings(max_examples=100, deadline=None)
@given(dyadic_vec, dyadic_vec, dyadic_vec, dyadic_t)
def test_coupling_identity_bit_exact_on_dyadic_inputs(x, z, eps, t):
    pair = couple(x, z, eps, t)
    assert np.array_equal(pair.z_tgt - pair.z_src, z - x)


@settings(max_examples=100, deadline=None)
@given(real_vec, real_vec, real_vec, st.floats(0, 1))
def test_coupling_identity_to_rounding_on_arbitrary_inputs(x, z, eps, t):
    pair = couple(x, z, eps, t)
    scale = 1 + np.max(np.abs([x, z, eps]))
    assert np.max(np.abs((pair.z_tgt - pair.z_src) - (z - x))) <= 8 * np.finfo(float).eps * scale


def test_coupling_errors():
    with pytest.raises(ValueError):
        couple(np.zeros(3), np.zeros(4), np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        couple(np.zeros(3), np.zeros(3), np.zeros(3), -0.1)


def test_coupling_broadcasts_over_samples(rng):
    x, z = rng.standard_normal(6), rng.standard_normal(6)
    eps = rng.standard_normal((5, 6))
    pair = couple(x, z, eps, 0.5)
    assert pair.z_src.shape == (5, 6)
    assert np.allclose(pair.z_tgt[2], couple(x, z, eps[2], 0.5).z_tgt, atol=0)


# -- velocity difference ------------------------------------------------------------

def test_symmetric_setup_gives_zero(rng):
    f = random_linear_field(rng)
    x, eps, c, phi = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(8), rng.standard_normal(8)
    pair = couple(x, x, eps, 0.7)
    assert np.array_equal(vdelta_sample(f, pair, c, c, phi, GuidanceConfig(3.0, 3.0)), np.zeros(6))


def test_asymmetric_weights_leave_scaled_residual(rng):
    f = random_linear_field(rng)
    x, eps, c, phi = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(8), rng.standard_normal(8)
    pair = couple(x, x, eps, 0.7)
    got = vdelta_sample(f, pair, c, c, phi, GuidanceConfig(1.5, 9.0))
    want = 7.5 * (f(pair.z_src, 0.7, c) - f(pair.z_src, 0.7, phi))
    assert np.allclose(got, want, atol=1e-12)


def test_linear_field_with_source_as_null_is_zero(rng):
    f = random_linear_field(rng)
    x, eps, c = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(8)
    pair = couple(x, x, eps, 0.7)
    assert np.allclose(vdelta_sample(f, pair, c, c, c, GuidanceConfig(1.5, 9.0)), 0.0, atol=1e-12)


def test_schedule_gating_zeroes_guidance(rng):
    f = random_linear_field(rng)
    x, eps, c, phi = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(8), rng.standard_normal(8)
    pair = couple(x, x, eps, 0.3)  # below the guidance interval
    assert np.array_equal(vdelta_sample(f, pair, c, c, phi, GuidanceConfig(1.5, 9.0), Schedule()), np.zeros(6))


# -- residual diagnostic -----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 10), st.floats(0, 10))
def test_residual_identity_on_random_linear_fields(seed, t, w_src, w_tgt):
    rng = np.random.default_rng(seed)
    f = random_linear_field(rng)
    _, _, gap = residual_diagnostic(f, rng.standard_normal(6), rng.standard_normal(8), rng.standard_normal(8),
                                    GuidanceConfig(w_src, w_tgt), t, rng.standard_normal(6))
    assert gap <= 1e-9


def test_residual_identity_on_random_network(rng):
    f = DenseVelocityNet(ToyNet("dense", 64, hidden=16, seed=5, R=8))
    lhs, rhs, gap = residual_diagnostic(f, rng.standard_normal((1, 8, 8)), rng.standard_normal(8),
                                        np.zeros(8), GuidanceConfig(), 0.8, rng.standard_normal((1, 8, 8)))
    assert gap <= 1e-9 and np.linalg.norm(rhs) > 0


def test_equal_weights_make_both_sides_zero(rng):
    f = random_linear_field(rng)
    lhs, rhs, gap = residual_diagnostic(f, rng.standard_normal(6), rng.standard_normal(8), rng.standard_normal(8),
                                        GuidanceConfig(4.0, 4.0), 0.5, rng.standard_normal(6))
    assert np.array_equal(lhs, np.zeros(6)) and np.array_equal(rhs, np.zeros(6)) and gap == 0.0


# -- edit loop -------------------------------------------------------------------------

def test_constant_update_over_default_window(rng):
    f = random_linear_field(rng)
    x, u = rng.standard_normal(6), rng.standard_normal(6)
    z = edit_loop(f, x, np.zeros(8), np.ones(8), Schedule(), GuidanceConfig(), 3, update_rule=lambda s: u)
    assert np.allclose(z, x - 0.48 * u, atol=1e-12)


def test_identical_branches_leave_source_untouched(rng):
    f = random_linear_field(rng)
    x, c = rng.standard_normal(6), rng.standard_normal(8)
    sched = Schedule(n_max=25)
    z = edit_loop(f, x, c, c, sched, GuidanceConfig(2.0, 2.0), 5, phi=rng.standard_normal(8))
    assert np.array_equal(z, x)


def test_plain_mean_is_permutation_invariant(rng):
    s = rng.standard_normal((5, 6))
    perm = rng.permutation(5)
    assert np.allclose(plain_mean(s), plain_mean(s[perm]), atol=1e-15)


def test_edit_loop_seed_determinism_and_trace(rng):
    f = random_linear_field(rng)
    x, cs, ct = rng.standard_normal(6), rng.standard_normal(8), rng.standard_normal(8)
    sched = Schedule(n_max=18)
    trace = []
    a = edit_loop(f, x, cs, ct, sched, GuidanceConfig(), 5, seed=11, trace=trace)
    b = edit_loop(f, x, cs, ct, sched, GuidanceConfig(), 5, seed=11)
    c = edit_loop(f, x, cs, ct, sched, GuidanceConfig(), 5, seed=12)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert [e["k"] for e in trace] == sched.active_steps
    assert trace[0]["samples"].shape == (5, 6)


def test_non_finite_update_aborts_with_step(rng):
    f = random_linear_field(rng)
    with pytest.raises(EditDiverged, match="step 13"):
        edit_loop(f, np.zeros(6), np.zeros(8), np.ones(8), Schedule(), GuidanceConfig(), 2,
                  update_rule=lambda s: np.full(6, np.nan))


def test_step_noises_are_pure_and_stream_separated():
    a = step_noises(3, 14, 5, (2, 2))
    assert np.array_equal(a, step_noises(3, 14, 5, (2, 2)))
    assert not np.array_equal(a, step_noises(3, 15, 5, (2, 2)))
    assert not np.array_equal(a, step_noises(3, 14, 5, (2, 2), stream="probe"))
    # the first L draws do not depend on S
    assert np.array_equal(step_noises(3, 14, 2, (2, 2)), a[:2])
