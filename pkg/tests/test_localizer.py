import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsee.errors import ConfigurationError
from qsee.localizer import Caps, StoppingRecord, classify_termination, run_localized, run_truncated_hierarchy, truncate_Rn
from qsee.models import bounded_diffusivity, make_gdiv_model
from qsee.noise import NoiseSpec, sample_path
from qsee.spaces import GridField, SpaceTriple
from qsee.stepper import SmallnessBudget


def heat():
    return make_gdiv_model(lambda u: np.ones_like(u), constant_a=True, triple=SpaceTriple(N=32))


def quasi():
    return make_gdiv_model(
        bounded_diffusivity(0.5)[0], lambda u: 0.1 * np.sin(u), lambda u: 0.1 * np.sin(u), triple=SpaceTriple(N=32), n_modes=8
    )


def sine(model, amp=1.0):
    return amp * np.sin(math.pi * model.triple.points()[0])


def test_zero_data_zero_noise_stays_zero():
    m = heat()
    path, rec = run_localized(m, np.zeros(31), SmallnessBudget(0.0, lam=1.0), NoiseSpec(0, 4, 100, 1e-3))
    assert rec.termination == "reached_T"
    assert np.array_equal(path.states, np.zeros((101, 31)))
    assert len(rec.anchors) == 1 and rec.final_time == pytest.approx(0.1)
    assert rec.total_monitor_lp == 0.0


def test_large_lambda_is_a_single_segment():
    m = quasi()
    path, rec = run_localized(m, sine(m), SmallnessBudget(0.1, lam=1e6), NoiseSpec(1, 8, 100, 1e-3))
    assert rec.segment_steps == [100]
    assert np.all(path.theta == 1.0)
    assert path.states.shape == (101, 31)


def test_restarts_glue_segments():
    m = quasi()
    dt = 1e-4
    path, rec = run_localized(m, sine(m), SmallnessBudget(0.1, lam=0.6), NoiseSpec(2, 8, 400, dt))
    assert rec.termination == "reached_T"
    assert len(rec.anchors) > 1
    assert sum(rec.segment_steps) == 400
    # every anchor is the state stored at its grid time
    for t, a in rec.anchors:
        assert np.array_equal(path.states[int(round(t / dt))], a)
    total = sum(x**m.triple.p for x in rec.segment_lp) ** (1 / m.triple.p)
    assert rec.total_monitor_lp == pytest.approx(total, rel=1e-12)


def test_tiny_lambda_hits_step_floor():
    m = quasi()
    _, rec = run_localized(m, sine(m), SmallnessBudget(0.1, lam=1e-8), NoiseSpec(0, 8, 100, 1e-3))
    assert rec.termination == "step_floor"
    assert classify_termination(rec)["report"] == "step_floor"


def test_field_cap_flags_blow_up():
    m = quasi()
    _, rec = run_localized(m, sine(m, 5.0), SmallnessBudget(0.1, lam=1e6), NoiseSpec(0, 8, 100, 1e-3), caps=Caps(field_cap=1.0))
    assert rec.termination == "blow_up_flag"
    assert rec.final_time < 0.1


def test_superlinear_reaction_flags_blow_up():
    m = make_gdiv_model(lambda u: np.ones_like(u), F=lambda t, u: u**3, constant_a=True, triple=SpaceTriple(N=32))
    _, rec = run_localized(m, sine(m, 60.0), SmallnessBudget(0.0, lam=1e6), NoiseSpec(0, 4, 200, 1e-3))
    assert rec.termination == "blow_up_flag"


def test_runs_are_pure_functions_of_inputs():
    m = quasi()
    spec = NoiseSpec(9, 8, 200, 1e-4)
    budget = SmallnessBudget(0.1, lam=0.5)
    a, ra = run_localized(m, sine(m), budget, spec, 3)
    b, rb = run_localized(m, sine(m), budget, sample_path(spec, 3))
    assert np.array_equal(a.states, b.states)
    assert ra.segment_steps == rb.segment_steps


def test_caps_validation():
    with pytest.raises(ConfigurationError):
        Caps(field_cap=0.0)
    with pytest.raises(ConfigurationError):
        Caps(min_segment_steps=0)


def test_classify_termination():
    rec = StoppingRecord([(0.0, np.zeros(3))], "reached_T", 0.5, 1.0)
    out = classify_termination(rec)
    assert out["report"] == "global" and out["anchor_count"] == 1
    with pytest.raises(ConfigurationError):
        classify_termination(StoppingRecord([], "exploded", 0.0, 0.0))


# truncation ----------------------------------------------------------------------------


def test_truncate_inside_ball_returns_same_object():
    T = SpaceTriple(N=32)
    f = GridField(np.sin(math.pi * T.points()[0]), T.h)
    assert truncate_Rn(f, 10 * T.norm_Ep(f.values), T) is f


def test_truncate_outside_ball_lands_on_sphere():
    T = SpaceTriple(N=32)
    y = np.sin(math.pi * T.points()[0])
    n = 0.5 * T.norm_Ep(y)
    out = truncate_Rn(y, n, T)
    assert T.norm_Ep(out) == pytest.approx(n, rel=1e-12)
    with pytest.raises(ConfigurationError):
        truncate_Rn(y, 0.0, T)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=31, max_size=31), st.lists(st.floats(-100, 100), min_size=31, max_size=31), st.floats(0.1, 50))
def test_truncation_is_two_lipschitz(a, b, n):
    T = SpaceTriple(N=32)
    x, y = np.array(a), np.array(b)
    lhs = T.norm_Ep(truncate_Rn(x, n, T) - truncate_Rn(y, n, T))
    assert lhs <= 2 * T.norm_Ep(x - y) * (1 + 1e-12) + 1e-12


def test_hierarchy_levels_agree_before_exit():
    m = make_gdiv_model(
        lambda u: 1.0 + 0.005 * u * u, lambda u: 0.02 * u * u, lambda u: 0.2 * u, triple=SpaceTriple(N=32), n_modes=8,
        forcing=lambda t: 25 * np.sin(math.pi * np.arange(1, 32) / 32),
    )
    res = run_truncated_hierarchy(m, np.zeros(31), SmallnessBudget(0.1, lam=2.0), NoiseSpec(7, 8, 500, 1e-4), levels=[1.0, 2.0, 4.0])
    sigmas = [lev.sigma_n for lev in res.levels]
    assert sigmas == sorted(sigmas)
    assert all(lev.gamma_set_member for lev in res.levels)
    for lev, path in zip(res.levels, res.paths):
        k = lev.exit_index if lev.exit_index is not None else path.times.size
        assert np.array_equal(path.states[:k], res.paths[-1].states[:k])
        assert np.array_equal(res.states[:k], path.states[:k])


def test_hierarchy_marks_inadmissible_levels():
    m = heat()
    u0 = sine(m)
    norm = m.triple.norm_Ep(u0)
    res = run_truncated_hierarchy(m, u0, SmallnessBudget(0.0, lam=1e6), NoiseSpec(0, 4, 20, 1e-3), levels=[norm, 4 * norm])
    assert not res.levels[0].gamma_set_member and res.paths[0] is None
    assert res.levels[1].gamma_set_member


def test_hierarchy_errors():
    m = heat()
    spec = NoiseSpec(0, 4, 20, 1e-3)
    b = SmallnessBudget(0.0)
    with pytest.raises(ConfigurationError):
        run_truncated_hierarchy(m, np.zeros(31), b, spec, levels=[])
    with pytest.raises(ConfigurationError):
        run_truncated_hierarchy(m, np.zeros(31), b, spec, levels=[2.0, 1.0])
    with pytest.raises(ConfigurationError):
        run_truncated_hierarchy(m, np.zeros(31), [b], spec, levels=[1.0, 2.0])
    with pytest.raises(ConfigurationError):
        run_truncated_hierarchy(m, 100 * sine(m), b, spec, levels=[1.0])
