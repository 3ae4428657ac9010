"""Layer forward passes with cache policy, and backward passes from those caches.

Only fc and conv inputs are ever sparsified. Their input gradients use the
weights alone, so they stay exact whatever the cache holds; the parameter
gradient is computed from ``recover(cache)`` by the same dense kernel the
undropped path uses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CacheError, NonFiniteError, ShapeError
from .sparsity import NO_DROP, SparseActivation, drop, mem_report, recover


class CacheKind(str, enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    MASK = "mask"  # packed sign bits, relu only
    NONE = "none"


class LayerCache:
    """Single-use cache; ``take()`` hands the payload out once."""

    def __init__(self, kind, dense=None, sparse=None, mask=None, shape=None):
        if kind is CacheKind.DENSE and dense is None:
            raise CacheError("dense cache without a tensor")
        if kind is CacheKind.SPARSE and sparse is None:
            raise CacheError("sparse cache without a payload")
        if kind is CacheKind.MASK and mask is None:
            raise CacheError("mask cache without bits")
        self.kind = kind
        self.dense = dense
        self.sparse = sparse
        self.mask = mask
        self.shape = tuple(shape) if shape is not None else (
            dense.shape if dense is not None else
            sparse.original_shape if sparse is not None else ())
        self.consumed = False

    @classmethod
    def of_dense(cls, a):
        return cls(CacheKind.DENSE, dense=a)

    @classmethod
    def of_sparse(cls, s):
        return cls(CacheKind.SPARSE, sparse=s)

    def nbytes(self, with_index=True):
        if self.kind is CacheKind.DENSE:
            return self.dense.nbytes
        if self.kind is CacheKind.SPARSE:
            r = mem_report(self.sparse)
            if with_index and not self.sparse.drop_spec.index_on_host:
                return r.payload_value_bytes + r.payload_index_bytes
            return r.payload_value_bytes
        if self.kind is CacheKind.MASK:
            return self.mask.nbytes
        return 0

    def dense_equivalent_bytes(self):
        """Bytes of the dense tensor a backward pass has to materialise."""
        if self.kind is CacheKind.SPARSE:
            return self.sparse.size * self.sparse.dtype.itemsize
        return 0

    def take(self):
        if self.consumed:
            raise CacheError("cache already consumed (double backward?)")
        self.consumed = True
        return self

    def activation(self):
        """The cached input as seen by the backward pass (zero-filled if sparse)."""
        if self.kind is CacheKind.DENSE:
            return self.dense
        if self.kind is CacheKind.SPARSE:
            return recover(self.sparse)
        raise CacheError(f"{self.kind.value} cache holds no activation")


@dataclass
class LayerGrads:
    d_theta: np.ndarray | None = None
    d_bias: np.ndarray | None = None
    d_input: np.ndarray | None = None


def _cache_input(a, spec, rng):
    if spec.active:
        return LayerCache.of_sparse(drop(a, spec, rng))
    return LayerCache.of_dense(a)


def _require(cache):
    if cache is None:
        raise CacheError("missing cache")
    return cache.take()


# -- fully connected ----------------------------------------------------------

def fc_forward(a, theta, bias=None, spec=NO_DROP, rng=None):
    """``z = a @ theta.T + bias`` with theta laid out ``[C_z, C_a]``."""
    if a.ndim != 2 or theta.ndim != 2 or a.shape[1] != theta.shape[1]:
        raise ShapeError(f"fc: input {a.shape} incompatible with weight {theta.shape}")
    z = T.matmul(a, np.ascontiguousarray(theta.T))
    if bias is not None:
        if bias.shape != (theta.shape[0],):
            raise ShapeError(f"fc: bias {bias.shape} for {theta.shape[0]} outputs")
        z += bias
    return z, _cache_input(a, spec, rng)


def fc_backward(cache, theta, d_z, need_input=True):
    cache = _require(cache)
    a = cache.activation()
    if d_z.shape != (a.shape[0], theta.shape[0]):
        raise ShapeError(f"fc backward: d_z {d_z.shape} for input {a.shape}")
    d_theta = T.matmul(np.ascontiguousarray(d_z.T), a)
    d_bias = np.add.reduce(d_z, axis=0)
    d_input = T.matmul(d_z, theta) if need_input else None
    return LayerGrads(d_theta, d_bias, d_input)


# -- convolution ----------------------------------------------------------------

def conv_forward(a, kernel, bias=None, stride=1, padding=0, spec=NO_DROP, rng=None):
    """The cache holds the unpadded input; padding is reapplied in backward."""
    z = T.conv2d(a, kernel, stride, padding)
    if bias is not None:
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv: bias {bias.shape} for {kernel.shape[0]} kernels")
        z += bias[None, :, None, None]
    return z, _cache_input(a, spec, rng)


def conv_backward(cache, kernel, d_z, stride=1, padding=0, need_input=True):
    cache = _require(cache)
    a = cache.activation()
    k = kernel.shape[2]
    d_theta = T.conv2d_kernel_grad(a, d_z, k, stride, padding)
    d_bias = np.add.reduce(d_z, axis=(0, 2, 3))
    d_input = T.conv2d_input_grad(d_z, kernel, a.shape, stride, padding) if need_input else None
    return LayerGrads(d_theta, d_bias, d_input)


# -- pointwise (never dropped) ----------------------------------------------------

def relu_forward(a):
    return T.relu(a), LayerCache(CacheKind.MASK, mask=np.packbits(a.reshape(-1) > 0), shape=a.shape)


def relu_backward(cache, d_z):
    cache = _require(cache)
    n = int(np.prod(cache.shape))
    keep = np.unpackbits(cache.mask, count=n).astype(bool).reshape(cache.shape)
    return LayerGrads(d_input=np.where(keep, d_z, d_z.dtype.type(0)))


def gelu_forward(a):
    return T.gelu(a), LayerCache.of_dense(a)


def gelu_backward(cache, d_z):
    cache = _require(cache)
    return LayerGrads(d_input=d_z * T.gelu_grad(cache.dense))


def flatten_forward(a):
    return a.reshape(a.shape[0], -1), LayerCache(CacheKind.NONE, shape=a.shape)


def flatten_backward(cache, d_z):
    cache = _require(cache)
    return LayerGrads(d_input=d_z.reshape(cache.shape))


# -- objective ---------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / B``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, C], got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    sums = expd.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    log_probs = shifted[rows, labels] - np.log(sums[:, 0])
    loss = float(-log_probs.mean(dtype=np.float64))
    d_logits = expd / sums
    d_logits[rows, labels] -= 1
    d_logits /= logits.dtype.type(b)
    return loss, d_logits
