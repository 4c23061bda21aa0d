import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from harrisflow import rng


def test_same_inputs_same_stream():
    a = rng.Stream(rng.seed_stream(5, 11)).uniforms(1000)
    b = rng.Stream(rng.seed_stream(5, 11)).uniforms(1000)
    np.testing.assert_array_equal(a, b)


@given(seed=st.integers(0, 2**64 - 1), i=st.integers(0, 2**40))
def test_neighbouring_replicas_uncorrelated(seed, i):
    a = rng.Stream(rng.seed_stream(seed, i)).uniforms(10_000)
    b = rng.Stream(rng.seed_stream(seed, i + 1)).uniforms(10_000)
    assert abs(np.corrcoef(a, b)[0, 1]) <= 0.03


def test_out_of_range_rejected():
    with pytest.raises(ValueError):
        rng.seed_stream(0, 2**64)
    with pytest.raises(ValueError):
        rng.seed_stream(-1, 0)
    rng.seed_stream(2**64 - 1, 2**64 - 1)


def test_key_type_is_uint64():
    # python ints would enter kernels as signed and corrupt the mixing
    assert isinstance(rng.seed_stream(20240601, 0), np.uint64)


def test_replica_keys_match_seed_stream():
    keys = rng.replica_keys(99, 5, offset=3)
    assert [int(k) for k in keys] == [int(rng.seed_stream(99, 3 + r)) for r in range(5)]


def test_moments():
    s = rng.Stream(rng.seed_stream(1, 0))
    u = s.uniforms(200_000)
    z = s.normals(200_000)
    assert abs(u.mean() - 0.5) < 0.003
    assert 0 < u.min() and u.max() < 1
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_aux_uniforms_disjoint_from_path_draws():
    aux = rng.aux_uniforms(4, 3, 2)
    for r in range(3):
        path = rng.Stream(rng.seed_stream(4, r)).uniforms(64)
        assert not np.isin(aux[r], path).any()
