import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsee.errors import ConfigurationError, NonFiniteFieldError
from qsee.spaces import (
    GridField,
    MonitorAccumulator,
    MonitorSeries,
    SpaceTriple,
    fractional_norm,
    grid_points,
    lq_norm,
    monitor_update,
    noise_norm,
    sobolev1_norm,
    theta_lambda,
)


def sine(N=64):
    return GridField.from_function(lambda x: np.sin(np.pi * x), N)


# oracles ------------------------------------------------------------------------


def test_zero_field_norms_vanish():
    f = GridField.zeros(64)
    T = SpaceTriple()
    assert lq_norm(f, 3.0) == 0.0
    assert sobolev1_norm(f, 2.0) == 0.0
    assert fractional_norm(f, 0.5, T, 8.0) == 0.0


def test_constant_field_l2_norm_counts_interior_nodes():
    N = 64
    f = GridField(np.ones(N - 1), 1.0 / N)
    assert lq_norm(f, 2.0) == pytest.approx(math.sqrt((N - 1) / N), rel=1e-14)


def test_sine_l2_norm():
    assert abs(lq_norm(sine(), 2.0) - math.sqrt(0.5)) < 1e-3


def test_sine_w12_norm():
    exact = math.sqrt(math.pi**2 / 2) + math.sqrt(0.5)
    assert sobolev1_norm(sine(), 2.0) == pytest.approx(exact, rel=0.02)


def test_nonfinite_field_rejected():
    with pytest.raises(NonFiniteFieldError, match="non-finite field"):
        GridField(np.array([0.0, np.nan, 1.0]), 0.25)


def test_dirichlet_points_are_interior():
    (x,) = grid_points(8)
    assert x[0] == pytest.approx(1 / 8) and x[-1] == pytest.approx(7 / 8)
    assert x.size == 7


@pytest.mark.parametrize("boundary", ["dirichlet", "periodic"])
@pytest.mark.parametrize("d", [1, 2])
def test_eigenvalues_positive_and_sorted(boundary, d):
    T = SpaceTriple(N=16, d=d, q=4.0 if d == 1 else 8.0, boundary=boundary)
    assert np.all(T.eigenvalues > 0)
    lam, _ = T.modes(T.n_nodes)
    assert np.all(np.diff(lam) >= 0)


def test_invalid_triple_rejected():
    with pytest.raises(ConfigurationError):
        SpaceTriple(p=2.5, q=2.5, d=1)
    with pytest.raises(ConfigurationError):
        SpaceTriple(p=4.0, q=2.0, d=1)


@pytest.mark.parametrize("k", [1, 2, 5, 9, 20])
@pytest.mark.parametrize("s", [-1.0, 0.0, 0.75, 1.0])
def test_single_mode_fractional_norm_is_dyadic_weight(k, s):
    T = SpaceTriple()
    lam, E = T.modes(k)
    e = E[-1] / lq_norm(T.field(E[-1]), T.q)
    j = math.floor(math.log(lam[-1], 4))
    assert fractional_norm(T.field(e), s, T, 8.0) == pytest.approx(2.0 ** (j * s), rel=1e-10)


@pytest.mark.parametrize("N", [32, 64, 128])
def test_zero_order_surrogate_equivalent_to_lq(N):
    T = SpaceTriple(N=N)
    f = sine(N)
    ratio = fractional_norm(f, 0.0, T, T.q) / lq_norm(f, T.q)
    assert 0.25 <= ratio <= 4.0


def test_modes_are_orthonormal_in_discrete_l2():
    T = SpaceTriple(N=32)
    _, E = T.modes(10)
    gram = T.h * E @ E.T
    assert np.allclose(gram, np.eye(10), atol=1e-12)


def test_periodic_and_2d_block_norms_agree_with_transform_route():
    T = SpaceTriple(N=16, d=2, q=8.0)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((3,) + T.shape)
    dense = T.block_norms(v.reshape(3, -1))
    direct = np.array([[lq_norm(T.field(c), T.q) for c in T.block_components(x)[0]] for x in v])
    assert np.allclose(dense, direct, rtol=1e-10)


def test_noise_norm_of_single_mode():
    T = SpaceTriple()
    _, E = T.modes(1)
    # one coefficient field: the square function is |e_1|
    assert noise_norm(E, T) == pytest.approx(lq_norm(T.field(np.abs(E[0])), T.q), rel=1e-12)


@pytest.mark.parametrize("x,expected", [(0.5, 1.0), (1.5, 0.5), (3.0, 0.0)])
def test_theta_examples(x, expected):
    lam = 0.7
    assert theta_lambda(x * lam, lam) == pytest.approx(expected, abs=1e-15)


def test_theta_rejects_negative_argument():
    with pytest.raises(ValueError):
        theta_lambda(-1.0, 1.0)
    with pytest.raises(ConfigurationError):
        theta_lambda(1.0, 0.0)


def test_monitor_first_step_at_anchor():
    T = SpaceTriple()
    u = sine()
    dt = 1e-4
    s = monitor_update(MonitorSeries(), u, u, dt, T)
    assert s.value == pytest.approx(dt ** (1 / T.p) * T.norm_E1(u), rel=1e-12)


def test_monitor_zero_state():
    T = SpaceTriple()
    z = T.zeros()
    assert monitor_update(MonitorSeries(), z, z, 1e-3, T).value == 0.0


def test_two_step_monitor_matches_direct_computation():
    T = SpaceTriple()
    u0, u1, u2 = sine(), sine() * 1.1, sine() * 0.7
    dt = 1e-3
    s = monitor_update(monitor_update(MonitorSeries(), u1, u0, dt, T), u2, u0, dt, T)
    sup = max(T.norm_Ep(u1 - u0), T.norm_Ep(u2 - u0))
    lp = (dt * (T.norm_E1(u1) ** T.p + T.norm_E1(u2) ** T.p)) ** (1 / T.p)
    assert s.value == pytest.approx(sup + lp, rel=1e-12)
    assert len(s) == 2


def test_accumulator_matches_functional_update():
    T = SpaceTriple()
    rng = np.random.default_rng(3)
    anchor = rng.standard_normal(T.n_nodes)
    states = anchor + 0.1 * rng.standard_normal((5, T.n_nodes)).cumsum(axis=0)
    acc = MonitorAccumulator(T, anchor, 0.0, 1e-3)
    s = MonitorSeries()
    for x in states:
        acc.update(x)
        s = monitor_update(s, T.field(x), T.field(anchor), 1e-3, T)
    got = acc.series()
    assert np.array_equal(got.monitor, s.monitor)
    assert np.array_equal(got.norm_Ep, s.norm_Ep)


# properties ------------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1e-3, 1e3))
def test_theta_is_lipschitz(x, y, lam):
    lhs = abs(theta_lambda(x, lam) - theta_lambda(y, lam))
    assert lhs <= abs(x - y) / lam + 4 * np.finfo(float).eps
    assert 0.0 <= theta_lambda(x, lam) <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=63, max_size=63), st.lists(finite, min_size=63, max_size=63), st.sampled_from([-1.0, 0.75, 1.0]))
def test_surrogate_triangle_inequality(a, b, s):
    T = SpaceTriple()
    x, y = np.array(a), np.array(b)
    n = lambda v: fractional_norm(T.field(v), s, T, T.p)  # noqa: E731
    assert n(x + y) <= (n(x) + n(y)) * (1 + 1e-12) + 1e-300


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=63, max_size=63), st.floats(-100, 100))
def test_surrogate_is_homogeneous(a, c):
    T = SpaceTriple()
    x = np.array(a)
    assert T.norm_Ep(c * x) == pytest.approx(abs(c) * T.norm_Ep(x), rel=1e-12, abs=1e-300)


@settings(max_examples=30, deadline=None)
@given(st.lists(finite, min_size=63, max_size=63))
def test_norm_scale_is_monotone_in_s(a):
    T = SpaceTriple()
    x = np.array(a)
    # block weights 2^(js) with j >= 0 increase with s
    assert T.norm_E(x) <= T.norm_Ep(x) * (1 + 1e-12) + 1e-300
    assert T.norm_Ep(x) <= T.norm_E1(x) * (1 + 1e-12) + 1e-300
