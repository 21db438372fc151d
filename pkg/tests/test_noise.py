import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsee.errors import ConfigurationError
from qsee.noise import NoisePath, NoiseSpec, coarsen, sample_path, standard_normals


def test_same_seed_and_path_give_identical_tables():
    spec = NoiseSpec(5, 4, 100, 1e-3)
    assert np.array_equal(sample_path(spec, 3).increments, sample_path(spec, 3).increments)


def test_paths_and_seeds_differ():
    spec = NoiseSpec(5, 4, 100, 1e-3)
    a = sample_path(spec, 0).increments
    assert not np.array_equal(a, sample_path(spec, 1).increments)
    assert not np.array_equal(a, sample_path(NoiseSpec(6, 4, 100, 1e-3), 0).increments)


def test_million_entry_moments():
    dt = 1e-3
    spec = NoiseSpec(11, 100, 10_000, dt)
    x = sample_path(spec, 0).increments.ravel()
    assert x.size == 10**6
    assert abs(x.mean()) < 4 * math.sqrt(dt / 1e6)
    assert abs(x.var() / dt - 1) < 0.01


def test_empty_spec_rejected():
    with pytest.raises(ConfigurationError):
        NoiseSpec(0, 0, 10, 1e-3)
    with pytest.raises(ConfigurationError):
        NoiseSpec(0, 3, 0, 1e-3)
    with pytest.raises(ConfigurationError):
        NoiseSpec(0, 3, 10, 0.0)


def test_coarsen_identity_and_full_sum():
    path = sample_path(NoiseSpec(1, 3, 12, 0.01), 0)
    assert np.array_equal(coarsen(path, 1).increments, path.increments)
    one = coarsen(path, 12)
    assert one.increments.shape == (1, 3)
    assert np.allclose(one.increments[0], path.increments.sum(axis=0), rtol=1e-14)
    assert one.dt == pytest.approx(0.12)


def test_coarsen_rejects_non_divisible_factor():
    path = sample_path(NoiseSpec(1, 3, 12, 0.01), 0)
    with pytest.raises(ConfigurationError):
        coarsen(path, 5)


def test_coarsened_variance_is_additive():
    factor, dt = 4, 1e-3
    spec = NoiseSpec(2, 50, 4000, dt)
    x = coarsen(sample_path(spec, 0), factor).increments.ravel()
    assert abs(x.var() / (factor * dt) - 1) < 0.01 * 3


def test_rows_address_global_steps():
    spec = NoiseSpec(9, 2, 50, 0.1)
    full = sample_path(spec, 4)
    part = sample_path(spec, 4, 20, 30)
    assert np.array_equal(part.rows(22, 25), full.rows(22, 25))
    with pytest.raises(ConfigurationError):
        part.rows(10, 25)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63), st.integers(0, 10**6), st.integers(0, 500), st.integers(1, 500))
def test_partial_tables_equal_full_rows(seed, path, start, length):
    steps = np.arange(start, start + length)
    full = standard_normals(seed, path, np.arange(start + length), np.arange(3))
    assert np.array_equal(standard_normals(seed, path, steps, np.arange(3)), full[start:])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 6))
def test_coarsening_commutes_with_composition(seed, k):
    path = sample_path(NoiseSpec(seed, 2, 12 * k, 0.01), 0)
    a = coarsen(coarsen(path, 2), 3).increments
    b = coarsen(path, 6).increments
    assert np.allclose(a, b, rtol=1e-13, atol=1e-15)


def test_cross_correlation_small():
    spec = NoiseSpec(3, 2, 20_000, 1.0)
    x = sample_path(spec, 0).increments
    y = sample_path(spec, 1).increments
    n = x.shape[0]
    assert abs(np.corrcoef(x[:, 0], x[:, 1])[0, 1]) < 4 / math.sqrt(n)
    assert abs(np.corrcoef(x[:, 0], y[:, 0])[0, 1]) < 4 / math.sqrt(n)
    assert abs(np.corrcoef(x[1:, 0], x[:-1, 0])[0, 1]) < 4 / math.sqrt(n)


def test_noise_path_shape_properties():
    p = NoisePath(np.zeros((7, 3)), 0.5)
    assert (p.n_steps, p.n_modes) == (7, 3)
