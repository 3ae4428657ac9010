"""Dropping (D), recovery (R) and byte accounting for cached activations.

A cached tensor of N elements keeps ``k = floor((1 - gamma) * N + 1/2)``
elements, clamped to ``[1, N]``. Selection is global over the flattened
tensor, batch dimension included. Indices are flat row-major positions
stored as ``uint32``.

When ``k == N`` the retained index set is the identity 0..N-1; it is
represented implicitly and charged zero index bytes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, ShapeError

INDEX_DTYPE = np.uint32
INDEX_BYTES = np.dtype(INDEX_DTYPE).itemsize


class Strategy(str, enum.Enum):
    NONE = "none"
    RANDOM = "random"
    MIN_K = "min_k"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_").lower())
        except ValueError:
            raise ValueError(f"unknown drop strategy {value!r}") from None


@dataclass(frozen=True)
class DropSpec:
    strategy: Strategy = Strategy.NONE
    gamma: float = 0.0
    index_on_host: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        object.__setattr__(self, "gamma", float(self.gamma))
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def active(self):
        return self.strategy is not Strategy.NONE

    def to_dict(self):
        return {"strategy": self.strategy.value, "gamma": self.gamma,
                "index_on_host": self.index_on_host}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("strategy", "none"), d.get("gamma", 0.0), d.get("index_on_host", False))


NO_DROP = DropSpec()


def retained_count(n, gamma):
    """Round-half-up of (1 - gamma) * n, clamped to [1, n]."""
    if n <= 0:
        raise ShapeError("cannot drop from an empty tensor")
    k = math.floor((1.0 - gamma) * n + 0.5)
    return min(max(k, 1), n)


@dataclass
class SparseActivation:
    values: np.ndarray
    indices: np.ndarray | None  # None means identity (k == N)
    original_shape: tuple
    drop_spec: DropSpec = field(default=NO_DROP)

    @property
    def size(self):
        return int(np.prod(self.original_shape))

    @property
    def k(self):
        return int(self.values.size)

    @property
    def dtype(self):
        return self.values.dtype

    def index_array(self):
        if self.indices is None:
            return np.arange(self.k, dtype=INDEX_DTYPE)
        return self.indices

    def validate(self):
        n = self.size
        if self.indices is None:
            if self.k != n:
                raise CacheError(f"implicit index requires k == N ({self.k} != {n})")
            return
        idx = self.indices
        if idx.shape != self.values.shape:
            raise CacheError("values and indices lengths differ")
        if idx.size and int(idx.max()) >= n:
            raise CacheError(f"index {int(idx.max())} out of range for {n} elements")
        if idx.size > 1 and not np.all(idx[1:] > idx[:-1]):
            raise CacheError("indices must be strictly increasing")


def _check_input(a, gamma):
    if a.size == 0:
        raise ShapeError("cannot drop from an empty tensor")
    if a.size >= 2**32:
        raise ShapeError("tensor too large for 32-bit indices")
    return retained_count(a.size, gamma)


def _pack(flat, keep, shape, spec):
    if keep.size == flat.size:
        return SparseActivation(flat.copy(), None, shape, spec)
    keep = np.sort(keep).astype(INDEX_DTYPE)
    return SparseActivation(flat[keep], keep, shape, spec)


def topk_indices(mags, k):
    """Positions of the ``k`` largest ``mags``; ties at the cutoff go to lower positions."""
    n = mags.size
    if k == n:
        return np.arange(n)
    cutoff = np.partition(mags, n - k)[n - k]
    above = np.flatnonzero(mags > cutoff)
    at = np.flatnonzero(mags == cutoff)[: k - above.size]
    return np.concatenate([above, at])


def drop_min_k(a, gamma, spec=None):
    """Drop the ``gamma`` fraction of smallest-magnitude elements of ``a``."""
    k = _check_input(a, gamma)
    spec = spec or DropSpec(Strategy.MIN_K, gamma)
    flat = a.reshape(-1)
    return _pack(flat, topk_indices(np.abs(flat), k), a.shape, spec)


def drop_random(a, gamma, rng, spec=None):
    """Keep a uniformly random k-subset.

    Each element draws one uniform key from ``rng``; the k smallest keys
    (stable order, so ties favour lower positions) are retained. The
    generator advances by exactly N draws, even at gamma = 0.
    """
    k = _check_input(a, gamma)
    spec = spec or DropSpec(Strategy.RANDOM, gamma)
    flat = a.reshape(-1)
    keys = rng.uniform(flat.size)
    keep = np.argsort(keys, kind="stable")[:k]
    return _pack(flat, keep, a.shape, spec)


def drop(a, spec, rng=None):
    if spec.strategy is Strategy.MIN_K:
        return drop_min_k(a, spec.gamma, spec)
    if spec.strategy is Strategy.RANDOM:
        if rng is None:
            raise ValueError("random dropping needs an rng")
        return drop_random(a, spec.gamma, rng, spec)
    raise ValueError("strategy none does not sparsify")


def recover(s):
    """Inflate back to ``original_shape`` with zeros at dropped positions."""
    s.validate()
    if s.indices is None:
        return s.values.reshape(s.original_shape).copy()
    out = np.zeros(s.size, dtype=s.values.dtype)
    out[s.indices] = s.values
    return out.reshape(s.original_shape)


def retained_mask(s):
    mask = np.zeros(s.size, dtype=bool)
    mask[s.index_array()] = True
    return mask.reshape(s.original_shape)


@dataclass(frozen=True)
class MemReport:
    n: int
    k: int
    dense_bytes: int
    payload_value_bytes: int
    payload_index_bytes: int
    reduction_fraction: float
    reduction_fraction_with_index: float

    CSV_COLUMNS = ("n", "k", "dense_bytes", "payload_value_bytes", "payload_index_bytes",
                   "reduction_fraction", "reduction_fraction_with_index")

    def csv_row(self):
        return [getattr(self, c) for c in self.CSV_COLUMNS]


def mem_report(s, bytes_per_scalar=None, bytes_per_index=INDEX_BYTES):
    n = s.size
    k = s.k
    if bytes_per_scalar is None:
        bytes_per_scalar = s.dtype.itemsize
    dense = n * bytes_per_scalar
    values = k * bytes_per_scalar
    index = 0 if s.indices is None else k * bytes_per_index
    device = values + (0 if s.drop_spec.index_on_host else index)
    return MemReport(
        n=n, k=k, dense_bytes=dense,
        payload_value_bytes=values, payload_index_bytes=index,
        reduction_fraction=1.0 - k / n,
        reduction_fraction_with_index=1.0 - device / dense,
    )


def activation_bytes_estimate(layer_kind, B, C_a, C_z, L_a, K=1, bytes_per_scalar=4):
    """``(activation_bytes, parameter_bytes)`` for one conv or fc layer, bias excluded.

    ``L_a`` is the spatial size H*W for conv and the sequence length for fc.
    """
    for name, v in (("B", B), ("C_a", C_a), ("C_z", C_z), ("L_a", L_a), ("K", K)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    if layer_kind == "conv":
        return B * C_a * L_a * bytes_per_scalar, C_a * C_z * K * K * bytes_per_scalar
    if layer_kind == "fc":
        return B * L_a * C_a * bytes_per_scalar, C_a * C_z * bytes_per_scalar
    raise ValueError(f"unknown layer kind {layer_kind!r}")
