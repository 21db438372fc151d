import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsee.errors import BlowUpSignal, ConfigurationError, NoContractionError, SmallnessError
from qsee.models import bounded_diffusivity, make_gdiv_model
from qsee.noise import NoiseSpec, sample_path
from qsee.spaces import SpaceTriple
from qsee.stepper import (
    MRConstants,
    SmallnessBudget,
    assemble_operator,
    choose_lambda,
    estimate_mr_constants,
    picard_solve,
    semi_implicit_step,
    solve_frozen_segment,
    truncated_quasilinearity,
)


def const_model(c=1.0, N=64, **kw):
    kw.setdefault("n_modes", min(16, N // 2))
    return make_gdiv_model(lambda u: c * np.ones_like(u), triple=SpaceTriple(N=N), constant_a=True, **kw)


def quasi_model(N=64, **kw):
    return make_gdiv_model(bounded_diffusivity(0.5)[0], lambda u: 0.1 * np.sin(u), lambda u: 0.1 * np.sin(u), triple=SpaceTriple(N=N), **kw)


def sine(model):
    return np.sin(math.pi * model.triple.points()[0])


# operator ---------------------------------------------------------------------------


@pytest.mark.parametrize("c", [1.0, 2.5])
def test_constant_coefficient_spectrum(c):
    N = 32
    m = const_model(c, N)
    op = assemble_operator(m, np.zeros(N - 1))
    k = np.arange(1, N)
    expected = c * 4 * N * N * np.sin(k * math.pi / (2 * N)) ** 2 + 1.0
    assert np.allclose(np.sort(op.eigen()[0]), expected, rtol=1e-10)


def test_divergence_operator_is_symmetric_and_positive():
    m = quasi_model(N=32)
    op = assemble_operator(m, 3 * sine(m))
    assert op.symmetric
    assert np.all(op.eigen()[0] >= m.delta0 * 0 + 1.0 - 1e-9)


def test_solve_inverts_shifted_operator():
    m = quasi_model(N=32)
    op = assemble_operator(m, sine(m))
    rhs = np.random.default_rng(0).standard_normal(31)
    x = op.solve(rhs, 1e-3)
    assert np.allclose(x + 1e-3 * op.apply(x), rhs, atol=1e-12)


def test_nonfinite_anchor_rejected():
    m = const_model()
    with pytest.raises(ConfigurationError):
        assemble_operator(m, np.full(63, np.nan))


# single steps --------------------------------------------------------------------------


def test_zero_state_stays_zero_without_forcing():
    m = const_model()
    op = assemble_operator(m, np.zeros(63))
    out = semi_implicit_step(np.zeros(63), op, m, 1.0, 0.0, 1e-3, None)
    assert np.array_equal(out.values, np.zeros(63))


def test_step_rejects_bad_arguments():
    m = const_model()
    op = assemble_operator(m, np.zeros(63))
    with pytest.raises(ConfigurationError):
        semi_implicit_step(np.zeros(63), op, m, 1.0, 0.0, 0.0, None)
    with pytest.raises(ConfigurationError):
        semi_implicit_step(np.zeros(63), op, m, 1.5, 0.0, 1e-3, None)


def test_nonfinite_step_raises_blowup_with_last_state():
    m = make_gdiv_model(lambda u: np.ones_like(u), F=lambda t, u: u**40, constant_a=True)
    op = assemble_operator(m, np.zeros(63))
    u = np.full(63, 1e10)
    with pytest.raises(BlowUpSignal) as err:
        semi_implicit_step(u, op, m, 1.0, 0.0, 1e-3, None)
    assert np.array_equal(err.value.last_state, u)


def test_full_cutoff_at_anchor_matches_frozen_linear_step():
    m = quasi_model()
    u = sine(m)
    op = assemble_operator(m, u)
    dW = np.zeros(m.n_modes)
    out = semi_implicit_step(u, op, m, 1.0, 0.0, 1e-3, dW).values
    rhs = u + 1e-3 * m.drift(0.0, u, m.retract(u))
    assert np.allclose(out, op.solve(rhs, 1e-3), atol=1e-14)


def test_truncated_quasilinearity_zero_cases():
    m = quasi_model()
    u = sine(m)
    v = 2 * u
    assert np.array_equal(truncated_quasilinearity(u, v, 0.0, m).values, np.zeros_like(u))
    assert np.allclose(truncated_quasilinearity(u, u, 1.0, m).values, 0.0, atol=1e-12)
    c = const_model()
    assert np.allclose(truncated_quasilinearity(u, v, 1.0, c).values, 0.0, atol=1e-10)
    with pytest.raises(ConfigurationError):
        truncated_quasilinearity(u, v, -0.1, m)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(0.1, 3), st.floats(0.1, 3))
def test_truncated_quasilinearity_is_linear_in_theta(theta, s1, s2):
    m = quasi_model(N=32)
    u, v = s1 * sine(m), s2 * sine(m) ** 2
    full = truncated_quasilinearity(u, v, 1.0, m).values
    assert np.allclose(truncated_quasilinearity(u, v, theta, m).values, theta * full, rtol=1e-12, atol=1e-9)


# segments ----------------------------------------------------------------------------------


def test_segment_with_huge_lambda_runs_to_end():
    m = quasi_model()
    noise = sample_path(NoiseSpec(0, m.n_modes, 50, 1e-3), 0)
    seg = solve_frozen_segment(sine(m), m, SmallnessBudget(0.0, lam=1e6), noise, 0.0, 0.05)
    assert seg.stop_index is None and seg.n_steps == 50
    assert np.all(seg.theta_history == 1.0)
    assert seg.times[-1] == pytest.approx(0.05)


def test_segment_stops_after_first_step():
    m = const_model()
    u0 = sine(m)
    dt = 1e-4
    lam = 0.5 * dt ** (1 / m.triple.p) * m.triple.norm_E1(u0)
    seg = solve_frozen_segment(u0, m, SmallnessBudget(0.0, lam=lam), None, 0.0, 0.01, dt=dt)
    assert seg.stop_index == 1 and seg.n_steps == 1
    assert seg.theta_history.tolist() == [1.0]


def test_theta_uses_previous_monitor():
    m = quasi_model()
    noise = sample_path(NoiseSpec(3, m.n_modes, 200, 1e-4), 0)
    seg = solve_frozen_segment(sine(m), m, SmallnessBudget(0.0, lam=2.0), noise, 0.0, 0.02)
    mon = seg.monitor.monitor
    expected = np.clip(2.0 - mon[:-1] / 2.0, 0.0, 1.0)
    assert seg.theta_history[0] == 1.0
    assert np.allclose(seg.theta_history[1:], expected[: seg.theta_history.size - 1], atol=1e-15)


def test_segment_field_cap():
    m = const_model()
    seg = solve_frozen_segment(sine(m), m, SmallnessBudget(0.0, lam=1e6), None, 0.0, 0.01, dt=1e-3, field_cap=1e-3)
    assert seg.capped and seg.n_steps == 1


def test_empty_segment_rejected():
    m = const_model()
    with pytest.raises(ConfigurationError):
        solve_frozen_segment(sine(m), m, SmallnessBudget(0.0), None, 0.01, 0.01, dt=1e-3)


def test_noise_rows_follow_global_step_index():
    m = quasi_model()
    spec = NoiseSpec(5, m.n_modes, 40, 1e-3)
    noise = sample_path(spec, 0)
    u0 = sine(m)
    a = solve_frozen_segment(u0, m, SmallnessBudget(0.0, lam=1e6), noise, 0.0, 0.04)
    b = solve_frozen_segment(a.states[20], m, SmallnessBudget(0.0, lam=1e6), noise, 0.02, 0.04)
    # a table holding only steps 20..39 must drive the same segment
    c = solve_frozen_segment(a.states[20], m, SmallnessBudget(0.0, lam=1e6), sample_path(spec, 0, 20, 40), 0.02, 0.04)
    assert np.array_equal(b.states, c.states)


# Picard ------------------------------------------------------------------------------------


def test_picard_linear_problem_converges_in_one_iteration():
    m = const_model(N=32)
    op = assemble_operator(m, sine(m))
    noise = sample_path(NoiseSpec(0, m.n_modes, 20, 1e-3), 0)
    res = picard_solve(op, m, sine(m), noise, 0.02)
    assert res.converged and res.iterations == 1
    # the fixed point is the exact discrete semigroup orbit
    S = op.semigroup(1e-3)
    assert np.allclose(res.path[-1], np.linalg.matrix_power(S, 20) @ sine(m), atol=1e-12)


def test_picard_contracts_on_short_window():
    m = quasi_model(N=32)
    u0 = sine(m)
    op = assemble_operator(m, u0)
    noise = sample_path(NoiseSpec(1, m.n_modes, 50, 1e-3), 0)
    res = picard_solve(op, m, u0, noise, 0.05, lam=1.0)
    assert res.converged
    assert max(res.ratios[2:]) < 1.0


def test_picard_reports_divergence():
    m = make_gdiv_model(lambda u: np.ones_like(u), F=lambda t, u: 50 * u * u, triple=SpaceTriple(N=16), n_modes=8, constant_a=True)
    u0 = 50 * np.sin(math.pi * m.triple.points()[0])
    op = assemble_operator(m, u0)
    noise = sample_path(NoiseSpec(0, m.n_modes, 200, 1e-2), 0)
    with pytest.raises(NoContractionError), np.errstate(over="ignore", invalid="ignore"):
        picard_solve(op, m, u0, noise, 2.0, max_iter=30)


def test_picard_window_must_span_a_step():
    m = const_model(N=16)
    op = assemble_operator(m, np.zeros(15))
    noise = sample_path(NoiseSpec(0, 2, 10, 1e-3), 0)
    with pytest.raises(ConfigurationError):
        picard_solve(op, m, np.zeros(15), noise, 1e-4)


# budget and MR constants ----------------------------------------------------------------


def test_choose_lambda_example():
    mr = MRConstants(1.0, 1.0, 1)
    assert choose_lambda(1.0, 0.0, 0.0, 0.0, 0.0, mr, margin=0.6) == pytest.approx(0.1)
    assert choose_lambda(0.0, 0.0, 0.0, 0.0, 0.0, mr, lambda_max=7.0) == 7.0


def test_choose_lambda_errors():
    mr = MRConstants(1.0, 1.0, 1)
    with pytest.raises(SmallnessError):
        choose_lambda(1.0, 0.7, 0.0, 0.0, 0.0, mr)
    with pytest.raises(ConfigurationError):
        choose_lambda(1.0, 0.0, 0.0, 0.0, 0.0, mr, margin=1.0)


@settings(max_examples=50)
@given(st.floats(1e-3, 10), st.floats(0, 0.1), st.floats(0, 0.1), st.floats(0.1, 0.9), st.floats(0.1, 3), st.floats(0.1, 3))
def test_chosen_lambda_meets_margin(C_Q, L_F, L_B, margin, cd, cs):
    mr = MRConstants(cd, cs, 1)
    try:
        lam = choose_lambda(C_Q, L_F, 0.0, L_B, 0.0, mr, margin=margin, lambda_max=1e9)
    except SmallnessError:
        assert cd * L_F + cs * L_B >= margin
        return
    number = SmallnessBudget(C_Q, L_F, 0.0, L_B, 0.0, lam).contraction_number(mr)
    assert number == pytest.approx(margin, rel=1e-9)


def test_budget_validation():
    with pytest.raises(ConfigurationError):
        SmallnessBudget(-1.0)
    with pytest.raises(ConfigurationError):
        SmallnessBudget(1.0, lam=0.0)
    with pytest.raises(SmallnessError):
        SmallnessBudget(1.0, lam=1.0).validate(MRConstants(1.0, 1.0, 1))


def test_mr_constants_single_sample_and_nesting():
    m = const_model(N=16)
    op = assemble_operator(m, np.zeros(15))
    spec = NoiseSpec(0, 4, 32, 1e-3)
    one = estimate_mr_constants(op, m.triple, spec, 1)
    few = estimate_mr_constants(op, m.triple, spec, 4)
    more = estimate_mr_constants(op, m.triple, spec, 8)
    assert one.c_mrd_hat > 0 and one.c_mrs_hat > 0
    assert one.c_mrd_hat <= few.c_mrd_hat <= more.c_mrd_hat
    assert one.c_mrs_hat <= few.c_mrs_hat <= more.c_mrs_hat
    assert np.array_equal(few.deterministic_ratios, more.deterministic_ratios[:4])
    with pytest.raises(ConfigurationError):
        estimate_mr_constants(op, m.triple, spec, 0)
