import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from bsvie import rng


def test_philox_known_answers():
    # Random123 known-answer vectors for Philox4x32-10
    cases = [
        ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
        ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
        ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
         (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
    ]
    for counter, key, expected in cases:
        assert tuple(int(w) for w in rng.philox4x32(counter, key)) == expected


@given(seed=st.integers(0, 2**40), m=st.integers(0, 2**20), n=st.integers(0, 500), j=st.integers(0, 64))
def test_value_is_pure_function_of_index(seed, m, n, j):
    a = rng.normals(seed, rng.TRAIN, m, n, j)
    b = rng.normals(seed, rng.TRAIN, np.array([m, m + 1]), n, j)[0]
    assert a == b


def test_chunking_does_not_change_values():
    full = rng.sample_increments(3, 100, 4, 3, 0.25)
    chunked = rng.sample_increments(3, 100, 4, 3, 0.25, chunk=7)
    assert np.array_equal(full, chunked)
    tail = rng.sample_increments(3, 40, 4, 3, 0.25, path_offset=60)
    assert np.array_equal(full[60:], tail)


def test_streams_are_distinct():
    draws = [rng.sample_increments(1, 64, 2, 2, 1.0, stream=s) for s in range(4)]
    for i in range(4):
        for k in range(i + 1, 4):
            assert not np.allclose(draws[i], draws[k])


def test_variance_and_mean_law_of_large_numbers():
    h = 0.05
    dW = rng.sample_increments(0, 100_000, 1, 1, h).ravel()
    assert 0.95 * h <= dW.var() <= 1.05 * h
    dW = rng.sample_increments(1, 2000, 50, 2, h)
    M_N = 2000 * 50
    for j in range(2):
        col = dW[..., j]
        assert abs(col.mean()) <= 4 * np.sqrt(h / M_N)
        assert abs(col.var() / h - 1) <= 0.05


def test_two_seeds_same_normal_law():
    a = rng.sample_increments(10, 20_000, 1, 1, 1.0).ravel()
    b = rng.sample_increments(11, 20_000, 1, 1, 1.0).ravel()
    assert not np.array_equal(a, b)
    assert stats.ks_2samp(a, b).pvalue > 0.001
    assert stats.kstest(a, "norm").pvalue > 0.001


def test_invalid_arguments():
    with pytest.raises(ValueError):
        rng.sample_increments(0, 0, 1, 1, 1.0)
    with pytest.raises(ValueError):
        rng.sample_increments(0, 1, 1, 1, 0.0)
    with pytest.raises(ValueError):
        rng.normals(0, 1 << 16, 0, 0, 0)
