import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dropgrad.errors import CacheError, ShapeError
from dropgrad.sparsity import (
    NO_DROP, DropSpec, MemReport, SparseActivation, Strategy, activation_bytes_estimate, drop,
    drop_min_k, drop_random, mem_report, recover, retained_count, retained_mask)
from dropgrad.tensor import Rng

arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=8),
                    elements=st.floats(-100, 100, allow_nan=False, width=64))
gammas = st.floats(0.0, 0.99)


def sort_oracle(a, gamma):
    """Retained positions by a full stable sort on (-|a|, position)."""
    flat = a.reshape(-1)
    k = retained_count(flat.size, gamma)
    order = sorted(range(flat.size), key=lambda i: (-abs(flat[i]), i))
    return sorted(order[:k])


def test_drop_spec_validation_and_parsing():
    assert DropSpec("min-k", 0.5).strategy is Strategy.MIN_K
    with pytest.raises(ValueError):
        DropSpec("min_k", 1.0)
    with pytest.raises(ValueError):
        DropSpec("min_k", -0.1)
    with pytest.raises(ValueError):
        Strategy.parse("topk")
    assert not NO_DROP.active
    d = DropSpec("random", 0.3, True)
    assert DropSpec.from_dict(d.to_dict()) == d


@pytest.mark.parametrize("n,gamma,k", [(4, 0.5, 2), (10, 0.25, 8), (10, 0.35, 7), (3, 0.9, 1),
                                       (1, 0.9, 1), (1000, 0.0, 1000), (5, 0.1, 5)])
def test_retained_count(n, gamma, k):
    # 10 * 0.75 = 7.5 rounds half up to 8; 10 * 0.65 = 6.5 rounds half up to 7
    assert retained_count(n, gamma) == k


def test_min_k_small_example():
    s = drop_min_k(np.array([0.5, -2.0, 0.0, 3.0]), 0.5)
    assert np.array_equal(s.values, [-2.0, 3.0])
    assert np.array_equal(s.indices, [1, 3])
    assert s.indices.dtype == np.uint32


def test_min_k_gamma_zero_keeps_everything():
    a = np.arange(6.0).reshape(2, 3) - 2
    s = drop_min_k(a, 0.0)
    assert np.array_equal(s.index_array(), np.arange(6))
    assert np.array_equal(s.values, a.reshape(-1))
    assert np.array_equal(recover(s), a)


def test_min_k_dominance_against_full_sort():
    a = Rng(0).normal(1000)
    s = drop_min_k(a, 0.9)
    assert s.k == 100
    dropped = np.abs(a[~retained_mask(s)])
    assert np.abs(s.values).min() >= dropped.max()
    assert s.index_array().tolist() == sort_oracle(a, 0.9)


def test_min_k_ties_prefer_lower_positions():
    s = drop_min_k(np.array([1.0, -1.0, 1.0, 1.0, 5.0]), 0.4)
    assert s.index_array().tolist() == [0, 1, 4]


def test_min_k_selection_is_global_over_batch():
    a = np.array([[10.0, 9.0, 8.0], [0.1, 0.2, 0.3]])
    s = drop_min_k(a, 0.5)
    assert s.index_array().tolist() == [0, 1, 2]


@settings(max_examples=200, deadline=None)
@given(arrays, gammas)
def test_min_k_properties(a, gamma):
    s = drop_min_k(a, gamma)
    n = a.size
    assert s.k == retained_count(n, gamma) == min(max(int(np.floor((1 - gamma) * n + 0.5)), 1), n)
    idx = s.index_array()
    assert np.all(np.diff(idx.astype(np.int64)) > 0)
    assert idx.tolist() == sort_oracle(a, gamma)
    r = recover(s)
    mask = retained_mask(s)
    assert r.shape == a.shape
    assert np.array_equal(r[mask], a[mask])
    assert np.all(r[~mask] == 0)
    if (~mask).any():
        assert np.abs(a[mask]).min() >= np.abs(a[~mask]).max()


@settings(max_examples=100, deadline=None)
@given(arrays, gammas, st.integers(0, 2**63))
def test_random_properties(a, gamma, seed):
    s = drop_random(a, gamma, Rng(seed))
    assert s.k == retained_count(a.size, gamma)
    idx = s.index_array()
    assert np.all(np.diff(idx.astype(np.int64)) > 0)
    r = recover(s)
    mask = retained_mask(s)
    assert np.array_equal(r[mask], a[mask]) and np.all(r[~mask] == 0)
    assert np.array_equal(r * mask, r)


@settings(max_examples=50, deadline=None)
@given(arrays, st.floats(0.0, 0.98), st.floats(0.0, 0.98))
def test_payload_monotone_in_gamma(a, g1, g2):
    lo, hi = sorted((g1, g2))
    assert (mem_report(drop_min_k(a, lo)).payload_value_bytes
            >= mem_report(drop_min_k(a, hi)).payload_value_bytes)


def test_random_is_reproducible_and_identity_at_zero():
    a = np.arange(10.0)
    s1 = drop_random(a, 0.5, Rng(42))
    s2 = drop_random(a, 0.5, Rng(42))
    assert s1.k == 5
    assert np.array_equal(s1.indices, s2.indices)
    s0 = drop_random(a, 0.0, Rng(1))
    assert np.array_equal(recover(s0), a)


def test_random_retention_frequency_is_uniform():
    # binomial sd at p=0.5 over 1e4 trials is 0.005, so 0.02 is four sd
    r = Rng(0)
    a = np.ones(100)
    counts = np.zeros(100)
    for _ in range(10_000):
        counts[drop_random(a, 0.5, r).indices] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.5) <= 0.02)


def test_random_consumes_n_draws():
    r = Rng(3)
    drop_random(np.ones(17), 0.2, r)
    ref = Rng(3)
    ref.uniform(17)
    assert r.state == ref.state


def test_drop_dispatch():
    a = np.array([3.0, -1.0, 2.0])
    assert np.array_equal(drop(a, DropSpec("min_k", 0.34)).values, [3.0, 2.0])
    with pytest.raises(ValueError):
        drop(a, DropSpec("random", 0.5))
    with pytest.raises(ValueError):
        drop(a, NO_DROP)


def test_recover_example_and_corruption():
    s = SparseActivation(np.array([-2.0, 3.0]), np.array([1, 3], dtype=np.uint32), (4,))
    assert np.array_equal(recover(s), [0.0, -2.0, 0.0, 3.0])
    bad = SparseActivation(np.array([1.0]), np.array([4], dtype=np.uint32), (4,))
    with pytest.raises(CacheError):
        recover(bad)
    unsorted = SparseActivation(np.array([1.0, 2.0]), np.array([2, 1], dtype=np.uint32), (4,))
    with pytest.raises(CacheError):
        recover(unsorted)


def test_empty_tensor_rejected():
    with pytest.raises(ShapeError):
        drop_min_k(np.zeros(0), 0.5)
    with pytest.raises(ShapeError):
        drop_random(np.zeros(0), 0.5, Rng(0))


def test_mem_report_million_f32():
    a = np.zeros(10**6, dtype=np.float32)
    a[::10] = 1.0
    r = mem_report(drop_min_k(a, 0.9))
    assert r.k == 100_000
    assert r.payload_value_bytes == 400_000
    assert r.payload_value_bytes + r.payload_index_bytes == 800_000
    assert r.reduction_fraction == pytest.approx(0.9, abs=1e-12)
    assert r.reduction_fraction_with_index == pytest.approx(0.8, abs=1e-12)
    host = mem_report(drop_min_k(a, 0.9, DropSpec("min_k", 0.9, index_on_host=True)))
    assert host.reduction_fraction_with_index == pytest.approx(0.9, abs=1e-12)


def test_mem_report_gamma_zero_equals_dense():
    r = mem_report(drop_min_k(np.ones(64, dtype=np.float32), 0.0))
    assert r.reduction_fraction == 0.0
    assert r.payload_value_bytes + r.payload_index_bytes == r.dense_bytes == 256
    assert len(r.csv_row()) == len(MemReport.CSV_COLUMNS)


def test_activation_bytes_estimate():
    assert activation_bytes_estimate("fc", 1, 3, 5, 1)[0] == 12
    assert activation_bytes_estimate("conv", 1, 1, 1, 1, 1)[1] == 4
    a1, p1 = activation_bytes_estimate("conv", 8, 3, 16, 49, 3)
    a2, p2 = activation_bytes_estimate("conv", 16, 3, 16, 49, 3)
    assert a2 == 2 * a1 and p2 == p1
    with pytest.raises(ValueError):
        activation_bytes_estimate("pool", 1, 1, 1, 1)
    with pytest.raises(ValueError):
        activation_bytes_estimate("fc", 0, 1, 1, 1)
