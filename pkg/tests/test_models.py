import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsee.errors import ConfigurationError, EllipticityError
from qsee.models import (
    bounded_diffusivity,
    d2phi_n,
    dphi_n,
    estimate_C_Q,
    gauss_defect,
    ito_energy_residual,
    make_gdiv_model,
    make_nondivergence_model,
    moment_verify,
    ou_oracle,
    phi_n,
    random_smooth_field,
)
from qsee.spaces import GridField, SpaceTriple
from qsee.stepper import assemble_operator, semi_implicit_step


def heat(N=64, **kw):
    return make_gdiv_model(lambda u: np.ones_like(u), triple=SpaceTriple(N=N), constant_a=True, **kw)


# factories ----------------------------------------------------------------------


def test_heat_spec_has_no_lower_order_terms():
    m = heat()
    u = random_smooth_field(m.triple, np.random.default_rng(0))
    assert np.array_equal(m.drift(0.0, u), np.zeros_like(u))
    assert not m.has_noise


def test_bounded_diffusivity_accepted_with_floor_one():
    a, L = bounded_diffusivity(0.5)
    m = make_gdiv_model(a, L_a=L)
    assert L == pytest.approx(3 * math.sqrt(3) * 0.5 / 8)
    u = np.linspace(-20, 20, 1001)
    assert np.all(a(u) >= 1.0)
    # the reported constant bounds sampled difference quotients
    assert np.max(np.abs(np.diff(a(u)) / np.diff(u))) <= L * (1 + 1e-9)
    assert m.form == "divergence"


def test_identity_diffusivity_rejected():
    with pytest.raises(EllipticityError):
        make_gdiv_model(lambda u: u)


def test_nonpositive_floor_rejected():
    with pytest.raises(ConfigurationError):
        make_gdiv_model(lambda u: np.ones_like(u), delta0=0.0)


def test_nondivergence_examples():
    a = lambda x, u, grad: 1.0 + 0.25 * np.sin(u) ** 2  # noqa: E731
    m = make_nondivergence_model(a)
    ones = np.ones(m.n_nodes)
    # second differences of a constant vanish; only the shift remains
    assert np.allclose(m.apply_A(ones, ones), m.shift * ones, atol=1e-10)
    heat_torus = make_nondivergence_model(lambda x, u, grad: np.ones_like(u))
    _, E = heat_torus.triple.modes(3)
    lam = heat_torus.triple.modes(3)[0]
    for k in range(3):
        assert np.allclose(heat_torus.apply_A(E[k], E[k]), lam[k] * E[k], atol=1e-9)


def test_nondivergence_ellipticity_violation_rejected():
    with pytest.raises(EllipticityError):
        make_nondivergence_model(lambda x, u, grad: 1.0 - 0.5 * u * u)


# OU oracle ------------------------------------------------------------------------


def test_ou_oracle_examples():
    assert ou_oracle(1.0, 0.0, 2.0, 3.0) == (pytest.approx(3 * math.exp(-2)), 0.0)
    assert ou_oracle(1.0, 1.0, 1.0, 0.0)[1] == pytest.approx((1 - math.exp(-2)) / 2)
    assert ou_oracle(1.0, 1.0, 1.0, 0.0)[1] == pytest.approx(0.432332, abs=1e-6)
    assert ou_oracle(2.0, 3.0, 50.0, 1.0)[1] == pytest.approx(9 / 4)
    with pytest.raises(ConfigurationError):
        ou_oracle(0.0, 1.0, 1.0, 1.0)


def test_implicit_step_on_eigenfunction_matches_scalar_recursion():
    m = heat()
    lam, E = m.triple.modes(3)
    u = m.field(E[2])
    op = assemble_operator(m, u)
    dt = 1e-3
    out = semi_implicit_step(u, op, m, 1.0, 0.0, dt, None)
    # the reference spectrum already includes the unit shift
    assert np.allclose(out.values, E[2] / (1 + dt * lam[2]), atol=1e-12)


# phi_n --------------------------------------------------------------------------------


def test_phi_examples():
    assert phi_n(0.0, 2, 4.0) == 0.0
    assert phi_n(1.0, 2, 4.0) == 1.0
    # n^(a-2) (a(a-1) xi^2 / 2 - a(a-2) n |xi| + (a-1)(a-2) n^2 / 2) at n=2, a=4, xi=3
    assert phi_n(3.0, 2, 4.0) == pytest.approx(4 * (54 - 48 + 12), abs=1e-12)
    assert phi_n(3.0, 2, 4.0) == pytest.approx(72.0)


def test_phi_alpha_two_is_square():
    xi = np.linspace(-5, 5, 101)
    assert np.array_equal(phi_n(xi, 1, 2.0), xi * xi)
    assert np.array_equal(dphi_n(xi, 1, 2.0), 2 * xi)


@pytest.mark.parametrize("alpha", [3.0, 4.0, 6.0])
@pytest.mark.parametrize("n", [1, 2, 5])
def test_phi_is_c2_at_the_junction(alpha, n):
    eps = 1e-9
    for f in (phi_n, dphi_n, d2phi_n):
        inner, outer = f(n - eps, n, alpha), f(n + eps, n, alpha)
        assert abs(outer - inner) <= 1e-6 * max(1.0, abs(inner))


@settings(max_examples=200)
@given(st.floats(-50, 50), st.integers(1, 10), st.sampled_from([2.0, 3.0, 4.0, 6.0]))
def test_phi_inequalities(xi, n, alpha):
    f, f1, f2 = float(phi_n(xi, n, alpha)), float(dphi_n(xi, n, alpha)), float(d2phi_n(xi, n, alpha))
    a1 = alpha * (alpha - 1)
    tol = lambda r: 1e-12 * max(1.0, abs(r))  # noqa: E731
    assert abs(xi * f1) <= alpha * f + tol(alpha * f)
    assert abs(f1) <= alpha * (1 + f) + tol(alpha * (1 + f))
    assert xi * xi * f2 <= a1 * f + tol(a1 * f)
    assert f2 <= a1 * (1 + f) + tol(a1 * (1 + f))
    assert f2 >= 0
    assert f <= abs(xi) ** alpha * (1 + 1e-12)


def test_gauss_defect_vanishes_under_refinement():
    G = lambda u: np.sin(u) + 0.3 * u * u  # noqa: E731
    Ns = [32, 64, 128, 256]
    defects = [abs(gauss_defect(GridField.from_function(lambda x: 2 * np.sin(np.pi * x) * (1 + x), N), G, 4.0, 2)) for N in Ns]
    slope = -np.polyfit(np.log(Ns), np.log(defects), 1)[0]
    assert slope >= 0.9


# moments and energy -------------------------------------------------------------------


class _DecayRunner:
    def __init__(self, model, steps=20, dt=1e-3):
        self.model, self.steps, self.dt = model, steps, dt

    def __call__(self, u0, i):
        op = assemble_operator(self.model, u0)
        states = [u0.values]
        for _ in range(self.steps):
            states.append(semi_implicit_step(states[-1], op, self.model, 1.0, 0.0, self.dt, None).values)

        class P:
            pass

        class R:
            termination = "reached_T"

        P.states = np.array(states)
        return P, R


def test_moment_verify_heat_decay_is_initial_norm():
    m = heat()
    u0 = GridField.from_function(lambda x: np.sin(np.pi * x), 64)
    rep = moment_verify(m, u0, 4.0, 3, _DecayRunner(m))
    norm4 = (m.h * np.sum(u0.values**4)) ** 0.25
    assert rep.empirical_lhs == pytest.approx(norm4, rel=1e-14)
    assert [s for s, _ in rep.u0_scale_sweep] == [1.0, 2.0, 4.0]
    assert rep.valid and rep.n_excluded == [0, 0, 0]


def test_moment_verify_rejects_small_alpha():
    m = heat()
    with pytest.raises(ConfigurationError):
        moment_verify(m, m.triple.zeros(), 1.5, 2, _DecayRunner(m))


def test_ito_residual_zero_data_zero_noise():
    m = heat()
    states = np.zeros((6, m.n_nodes))
    assert ito_energy_residual(states, np.zeros((5, m.n_modes)), m, 1e-3) == 0.0


def test_ito_residual_heat_is_first_order():
    m = heat()
    u0 = np.sin(np.pi * m.triple.points()[0])
    res = []
    dts = [4e-4, 2e-4, 1e-4]
    for dt in dts:
        op = assemble_operator(m, u0)
        states = [u0]
        for _ in range(int(round(0.02 / dt))):
            states.append(op.solve(states[-1], dt))
        res.append(ito_energy_residual(np.array(states), np.zeros((len(states), m.n_modes)), m, dt))
    assert np.polyfit(np.log(dts), np.log(res), 1)[0] >= 0.9


def test_estimate_C_Q_scales_with_quasilinearity():
    small = make_gdiv_model(bounded_diffusivity(0.05)[0])
    large = make_gdiv_model(bounded_diffusivity(0.5)[0])
    c_small, c_large = estimate_C_Q(small, 60), estimate_C_Q(large, 60)
    assert c_large == pytest.approx(10 * c_small, rel=0.05)
    assert estimate_C_Q(heat(), 20) == 0.0
