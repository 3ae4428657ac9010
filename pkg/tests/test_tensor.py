import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropgrad import tensor as T
from dropgrad.errors import NonFiniteError, ShapeError


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def direct_conv(x, w, stride, padding):
    b, c, h, wd = x.shape
    cz, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, cz, oh, ow))
    for n in range(b):
        for j in range(cz):
            for y in range(oh):
                for xx in range(ow):
                    patch = xp[n, :, y * stride:y * stride + k, xx * stride:xx * stride + k]
                    out[n, j, y, xx] = np.sum(patch * w[j])
    return out


# -- rng

def test_splitmix_reference_outputs():
    r = T.Rng(0)
    assert [int(v) for v in r.next_u64(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_vectorised_stream_matches_scalar_reference():
    r = T.Rng(12345)
    fast = [int(v) for v in r.next_u64(50)]
    state, slow = 12345, []
    for _ in range(50):
        state, out = T.splitmix64_scalar(state)
        slow.append(out)
    assert fast == slow
    assert r.state == state


def test_stream_continues_across_calls():
    a, b = T.Rng(7), T.Rng(7)
    joined = np.concatenate([a.next_u64(3), a.next_u64(4)])
    assert np.array_equal(joined, b.next_u64(7))


def test_same_seed_same_tensors():
    x = T.rand_normal(T.Rng(3), (4, 5))
    y = T.rand_normal(T.Rng(3), (4, 5))
    assert np.array_equal(x, y)
    assert not np.array_equal(x, T.rand_normal(T.Rng(4), (4, 5)))


def test_derive_is_independent_of_parent_position():
    r = T.Rng(9)
    child = r.derive(1, 2).next_u64(2)
    r.next_u64(10)
    assert np.array_equal(child, r.derive(1, 2).next_u64(2))
    assert not np.array_equal(child, r.derive(2, 1).next_u64(2))


def test_state_round_trip():
    r = T.Rng(5)
    r.uniform(11)
    s = T.Rng.fromstate(r.getstate())
    assert np.array_equal(r.uniform(4), s.uniform(4))


def test_zero_std_normal_is_constant():
    assert np.array_equal(T.rand_normal(T.Rng(0), (3, 3), 2.5, 0.0), np.full((3, 3), 2.5))


def test_uniform_mean_concentrates():
    # standard error of the mean for U(0,1) at 1e6 draws is ~0.00029
    m = T.rand_uniform(T.Rng(0), (1_000_000,)).mean()
    assert 0.497 <= m <= 0.503


def test_uniform_range_and_normal_moments():
    u = T.Rng(1).uniform(100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    z = T.Rng(2).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.02


def test_odd_normal_count_is_prefix_of_even():
    assert np.array_equal(T.Rng(4).normal(5), T.Rng(4).normal(6)[:5])


def test_rand_preconditions():
    with pytest.raises(ValueError):
        T.rand_uniform(T.Rng(0), (2,), 1.0, 1.0)
    with pytest.raises(ValueError):
        T.rand_normal(T.Rng(0), (2,), 0.0, -1.0)


def test_permutation_is_a_permutation():
    p = T.Rng(0).permutation(1000)
    assert np.array_equal(np.sort(p), np.arange(1000))


# -- tensors

def test_as_tensor_rejects_non_finite_and_empty():
    with pytest.raises(NonFiniteError):
        T.as_tensor([1.0, math.nan])
    with pytest.raises(ShapeError):
        T.as_tensor(np.zeros((0, 3)))


def test_resolve_dtype():
    assert T.resolve_dtype("f32") == np.float32
    assert T.resolve_dtype(np.float64) == np.float64
    with pytest.raises(ValueError):
        T.resolve_dtype("f16")


# -- matmul

def test_matmul_identity_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, np.eye(2)), a)
    assert np.array_equal(T.matmul(np.eye(2), np.array([[5.0], [7.0]])), [[5.0], [7.0]])


def test_matmul_outer_product_example():
    a = np.array([[2.0, 0.1, -3.0]])
    dz = np.array([[1.0, -1.0]])
    expected = [[2.0, 0.1, -3.0], [-2.0, -0.1, 3.0]]
    assert np.array_equal(T.matmul(dz.T.copy(), a), expected)
    assert np.array_equal(triple_loop(dz.T, a), expected)


def test_matmul_matches_ascending_triple_loop_bitwise():
    r = T.Rng(0)
    a, b = T.rand_normal(r, (5, 70)), T.rand_normal(r, (70, 6))
    ref = triple_loop(a, b)
    for path in ("outer", "scan"):
        assert np.array_equal(T.matmul(a, b, path=path), ref)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 90), st.integers(1, 6), st.integers(0, 2**32))
def test_matmul_paths_agree(m, k, n, seed):
    r = T.Rng(seed)
    a, b = T.rand_normal(r, (m, k)), T.rand_normal(r, (k, n))
    assert np.array_equal(T.matmul(a, b, "outer"), T.matmul(a, b, "scan"))


def test_matmul_zero_annihilates():
    a = T.rand_normal(T.Rng(0), (3, 4))
    assert np.array_equal(T.matmul(a, np.zeros((4, 2))), np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_repeatable():
    r = T.Rng(1)
    a, b = T.rand_normal(r, (64, 300), dtype="f32"), T.rand_normal(r, (300, 20), dtype="f32")
    assert np.array_equal(T.matmul(a, b), T.matmul(a, b))
    assert T.matmul(a, b).dtype == np.float32


# -- convolution

def test_conv_scalar_kernel():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
    assert np.array_equal(out, np.full((1, 1, 3, 3), 2.0))


def test_conv_zero_kernel_and_dot_product():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert np.array_equal(T.conv2d(x, np.zeros((2, 1, 1, 1))), np.zeros((1, 2, 2, 2)))
    w = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert np.array_equal(T.conv2d(x, w), [[[[5.0]]]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_conv_matches_direct_loop(stride, padding):
    r = T.Rng(stride * 10 + padding)
    x = T.rand_normal(r, (2, 3, 7, 7))
    w = T.rand_normal(r, (4, 3, 3, 3)) if stride != 3 else T.rand_normal(r, (4, 3, 4, 4))
    np.testing.assert_allclose(T.conv2d(x, w, stride, padding), direct_conv(x, w, stride, padding),
                               rtol=1e-12, atol=1e-12)


def test_pointwise_conv_equals_channel_matmul():
    r = T.Rng(8)
    x = T.rand_normal(r, (2, 3, 4, 5))
    w = T.rand_normal(r, (6, 3, 1, 1))
    via_conv = T.conv2d(x, w)
    pixels = x.transpose(0, 2, 3, 1).reshape(-1, 3)
    via_mm = T.matmul(pixels, w[:, :, 0, 0].T.copy()).reshape(2, 4, 5, 6).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(via_conv, via_mm, rtol=1e-6)


def test_conv_extent_errors():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=2)
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


def test_col2im_is_adjoint_of_im2col():
    # <im2col(x), c> == <x, col2im(c)> for the pair to be a correct adjoint
    r = T.Rng(3)
    x = T.rand_normal(r, (2, 2, 7, 7))
    cols, _, _ = T.im2col(x, 3, 2, 1)
    c = T.rand_normal(r, cols.shape)
    lhs = float(np.sum(cols * c))
    rhs = float(np.sum(x * T.col2im(c, x.shape, 3, 2, 1)))
    assert math.isclose(lhs, rhs, rel_tol=1e-12)


# -- pointwise

def test_relu_scale_gelu_definitions():
    assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    x = np.array([1.5, -2.0])
    assert np.array_equal(T.scale(x, 1), x)
    assert T.gelu(np.array([0.0]))[0] == 0.0
    assert T.gelu_grad(np.array([0.0]))[0] == 0.5


def test_gelu_grad_matches_finite_difference():
    x = np.linspace(-4, 4, 41)
    h = 1e-6
    fd = (T.gelu(x + h) - T.gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(T.gelu_grad(x), fd, rtol=1e-6, atol=1e-9)


def test_elementwise_dispatch_and_shape_check():
    x = np.array([1.0, -1.0])
    assert np.array_equal(T.elementwise("add", x, x), [2.0, -2.0])
    assert np.array_equal(T.elementwise("relu", x), [1.0, 0.0])
    with pytest.raises(ShapeError):
        T.elementwise("add", x, np.zeros(3))
    with pytest.raises(ValueError):
        T.elementwise("tanh", x)
