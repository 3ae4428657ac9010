"""Dense arrays, the SplitMix64 generator, and the numeric kernels.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of ``float32`` or
``float64``. Nothing here broadcasts beyond what the layers need, and every
reduction that feeds a gradient runs in a fixed order so repeated runs are
bit-identical.

Random numbers
--------------
``Rng`` is SplitMix64 (Steele, Lea & Flood 2014)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

all arithmetic modulo 2**64. With seed 0 the first three outputs are
0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F.

* uniform in [0, 1): ``(z >> 11) * 2**-53``
* normal: Box-Muller on consecutive uniform pairs ``(u0, u1)``:
  ``r = sqrt(-2 ln(1 - u0))``, emitting ``r cos(2 pi u1)`` then
  ``r sin(2 pi u1)``; an odd count discards the final sine.

The integer stream is bit-portable. The float transforms go through the
platform ``log``/``cos``/``sin``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite value in {what}")
    return x


def as_tensor(data, dtype=np.float64):
    """Copy ``data`` into a contiguous tensor, enforcing positive extents and finiteness."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=resolve_dtype(dtype)))
    if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    return check_finite(arr)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_scalar(state):
    """Reference pure-int step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """SplitMix64 stream. ``state`` is the only mutable field."""

    def __init__(self, seed, state=None):
        self.seed = int(seed) & _MASK64
        self.state = self.seed if state is None else int(state) & _MASK64

    def __repr__(self):
        return f"Rng(seed={self.seed}, state={self.state})"

    def getstate(self):
        return {"seed": self.seed, "state": self.state}

    @classmethod
    def fromstate(cls, d):
        return cls(d["seed"], d["state"])

    def copy(self):
        return Rng(self.seed, self.state)

    def derive(self, *keys):
        """Independent child stream keyed on ``keys``; does not advance this one."""
        s = self.seed
        for key in keys:
            _, s = splitmix64_scalar((s ^ (int(key) * 0xD1B54A32D192ED03)) & _MASK64)
        return Rng(s)

    def next_u64(self, n):
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
            out = _mix(np.uint64(self.state) + steps)
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return out

    def uniform(self, n):
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n):
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def integers(self, n, high):
        """``n`` integers uniform on ``[0, high)`` via floor(u * high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n):
        """Uniform permutation: stable argsort of i.i.d. uniform keys."""
        return np.argsort(self.uniform(n), kind="stable")


def rand_uniform(rng, shape, lo=0.0, hi=1.0, dtype=np.float64):
    if not lo < hi:
        raise ValueError("rand_uniform requires lo < hi")
    n = int(np.prod(shape))
    return (lo + (hi - lo) * rng.uniform(n)).reshape(shape).astype(resolve_dtype(dtype))


def rand_normal(rng, shape, mean=0.0, std=1.0, dtype=np.float64):
    if std < 0:
        raise ValueError("rand_normal requires std >= 0")
    n = int(np.prod(shape))
    return (mean + std * rng.normal(n)).reshape(shape).astype(resolve_dtype(dtype))


# -- matmul ---------------------------------------------------------------

# Both paths compute c[i, j] = (((0 + a[i,0] b[0,j]) + a[i,1] b[1,j]) + ...)
# in ascending p and agree bit-for-bit; the choice only trades Python loop
# count against temporary size.
_SCAN_MAX_OUTPUT = 16384
_SCAN_CHUNK_ELEMS = 1 << 22


def _matmul_outer(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), dtype=a.dtype)
    tmp = np.empty((m, n), dtype=a.dtype)
    at = np.ascontiguousarray(a.T)
    for p in range(k):
        np.multiply.outer(at[p], b[p], out=tmp)
        c += tmp
    return c


def _matmul_scan(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.empty((m, n), dtype=a.dtype)
    rows = max(1, _SCAN_CHUNK_ELEMS // max(1, k * n))
    for i0 in range(0, m, rows):
        prod = a[i0:i0 + rows, :, None] * b[None, :, :]
        # accumulate is a strict left-to-right recurrence; + 0.0 turns a
        # leading -0.0 into +0.0 to match the zero-initialised path
        c[i0:i0 + rows] = np.add.accumulate(prod, axis=1)[:, -1, :] + 0.0
    return c


def matmul(a, b, path=None):
    """``a @ b`` for 2-D tensors with ascending-index accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    m, k = a.shape
    n = b.shape[1]
    if path is None:
        path = "scan" if (k > 64 and m * n <= _SCAN_MAX_OUTPUT) else "outer"
    if path == "scan":
        return _matmul_scan(a, b)
    if path == "outer":
        return _matmul_outer(a, b)
    raise ValueError(f"unknown matmul path {path!r}")


# -- convolution ------------------------------------------------------------

def conv_output_extent(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ShapeError(
            f"non-integral output extent: ({size} + 2*{padding} - {k}) / {stride} + 1")
    return span // stride + 1


def pad2d(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x, k, stride, padding):
    """Rows ordered (n, oy, ox); columns ordered (c, ky, kx)."""
    b, c, h, w = x.shape
    oh = conv_output_extent(h, k, stride, padding)
    ow = conv_output_extent(w, k, stride, padding)
    xp = pad2d(x, padding)
    cols = np.empty((b, oh, ow, c, k, k), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
            cols[:, :, :, :, ky, kx] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(b * oh * ow, c * k * k), oh, ow


def col2im(cols, x_shape, k, stride, padding):
    """Adjoint of ``im2col``; scatter-adds in fixed (ky, kx) order."""
    b, c, h, w = x_shape
    oh = conv_output_extent(h, k, stride, padding)
    ow = conv_output_extent(w, k, stride, padding)
    cols = cols.reshape(b, oh, ow, c, k, k)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            xp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += \
                cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if padding:
        xp = xp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(xp)


def _check_conv_shapes(x, kernel):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape}, {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} channels, input has {x.shape[1]}")
    if kernel.shape[2] != kernel.shape[3]:
        raise ShapeError("only square kernels are supported")


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x[B,C_a,H,W]`` with ``kernel[C_z,C_a,K,K]``."""
    _check_conv_shapes(x, kernel)
    cz, _, k, _ = kernel.shape
    cols, oh, ow = im2col(x, k, stride, padding)
    out = matmul(cols, np.ascontiguousarray(kernel.reshape(cz, -1).T))
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, cz).transpose(0, 3, 1, 2))


def conv2d_kernel_grad(x, d_out, k, stride=1, padding=0):
    """d(loss)/d(kernel) given the layer input and upstream gradient."""
    cz = d_out.shape[1]
    cols, _, _ = im2col(x, k, stride, padding)
    dz = np.ascontiguousarray(d_out.transpose(1, 0, 2, 3).reshape(cz, -1))
    return matmul(dz, cols).reshape(cz, x.shape[1], k, k)


def conv2d_input_grad(d_out, kernel, x_shape, stride=1, padding=0):
    """Transposed convolution: uses only the kernel and upstream gradient."""
    cz, _, k, _ = kernel.shape
    dz = np.ascontiguousarray(d_out.transpose(0, 2, 3, 1).reshape(-1, cz))
    d_cols = matmul(dz, np.ascontiguousarray(kernel.reshape(cz, -1)))
    return col2im(d_cols, x_shape, k, stride, padding)


# -- pointwise --------------------------------------------------------------

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_A = 0.044715


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def gelu(x):
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(GELU_A)
    half = x.dtype.type(0.5)
    return half * x * (1 + np.tanh(c * (x + a * x * x * x)))


def gelu_grad(x):
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(GELU_A)
    half = x.dtype.type(0.5)
    t = np.tanh(c * (x + a * x * x * x))
    return half * (1 + t) + half * x * (1 - t * t) * c * (1 + 3 * a * x * x)


def add(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch {x.shape} vs {y.shape}")
    return x + y


def scale(x, s):
    return x * x.dtype.type(s)


_POINTWISE = {"relu": relu, "gelu": gelu, "add": add, "scale": scale}


def elementwise(op, *args):
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)
