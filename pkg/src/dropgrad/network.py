"""Sequential networks, the first/last-layer drop rule, and the cache ledger."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import CacheError, ConfigError, NonFiniteError, ShapeError
from .sparsity import NO_DROP, DropSpec
from .tensor import Rng, conv_output_extent, rand_uniform, resolve_dtype

SPEC_VERSION = 1
APPLICABLE = ("fc", "conv")
KINDS = ("fc", "conv", "relu", "gelu", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    drop: DropSpec | None = None  # None: inherit the network default

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def applicable(self):
        return self.kind in APPLICABLE

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "fc":
            d.update(in_features=self.in_features, out_features=self.out_features)
        elif self.kind == "conv":
            d.update(in_channels=self.in_channels, out_channels=self.out_channels,
                     kernel=self.kernel, stride=self.stride, padding=self.padding)
        if self.drop is not None:
            d["drop"] = self.drop.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        drop = d.pop("drop", None)
        return cls(drop=None if drop is None else DropSpec.from_dict(drop), **d)


def fc(n_in, n_out, drop=None):
    return LayerSpec("fc", in_features=n_in, out_features=n_out, drop=drop)


def conv(c_in, c_out, kernel, stride=1, padding=0, drop=None):
    return LayerSpec("conv", in_channels=c_in, out_channels=c_out, kernel=kernel,
                     stride=stride, padding=padding, drop=drop)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    default_drop: DropSpec = NO_DROP
    skip_first_last: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def applicable_indices(self):
        return [i for i, l in enumerate(self.layers) if l.applicable]

    def effective_drops(self):
        """Per-layer DropSpec after the applicability rules."""
        app = self.applicable_indices()
        forced = {app[0], app[-1]} if (self.skip_first_last and app) else set()
        out = []
        for i, layer in enumerate(self.layers):
            if not layer.applicable or i in forced:
                out.append(NO_DROP)
            else:
                out.append(layer.drop if layer.drop is not None else self.default_drop)
        return out

    def dropping_layers(self):
        return [i for i, d in enumerate(self.effective_drops()) if d.active]

    def effective(self):
        """Copy with every layer's drop spelled out."""
        layers = tuple(replace(l, drop=d) for l, d in zip(self.layers, self.effective_drops()))
        return replace(self, layers=layers)

    def with_drop(self, drop, skip_first_last=None):
        return replace(self, default_drop=drop,
                       skip_first_last=self.skip_first_last if skip_first_last is None
                       else skip_first_last)

    def to_dict(self):
        return {
            "spec_version": SPEC_VERSION,
            "input_shape": list(self.input_shape),
            "default_drop": self.default_drop.to_dict(),
            "skip_first_last": self.skip_first_last,
            "layers": [l.to_dict() for l in self.layers],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        if d.get("spec_version") != SPEC_VERSION:
            raise ConfigError(f"unsupported spec_version {d.get('spec_version')!r}")
        try:
            return cls(
                input_shape=tuple(d["input_shape"]),
                layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                default_drop=DropSpec.from_dict(d.get("default_drop", {})),
                skip_first_last=bool(d.get("skip_first_last", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid network spec: {exc}") from exc

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def layer_shapes(spec):
    """Per-sample input shape of every layer, plus the output shape."""
    shapes = [tuple(spec.input_shape)]
    cur = shapes[0]
    for i, l in enumerate(spec.layers):
        if l.kind == "fc":
            if cur != (l.in_features,):
                raise ShapeError(f"layer {i}: fc expects ({l.in_features},), gets {cur}")
            cur = (l.out_features,)
        elif l.kind == "conv":
            if len(cur) != 3 or cur[0] != l.in_channels:
                raise ShapeError(f"layer {i}: conv expects {l.in_channels} channels, gets {cur}")
            cur = (l.out_channels,
                   conv_output_extent(cur[1], l.kernel, l.stride, l.padding),
                   conv_output_extent(cur[2], l.kernel, l.stride, l.padding))
        elif l.kind == "flatten":
            cur = (math.prod(cur),)
        shapes.append(cur)
    return shapes


def param_shapes(layer):
    if layer.kind == "fc":
        return {"weight": (layer.out_features, layer.in_features), "bias": (layer.out_features,)}
    if layer.kind == "conv":
        return {"weight": (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                "bias": (layer.out_channels,)}
    return {}


def parameter_count(spec):
    return sum(math.prod(s) for l in spec.layers for s in param_shapes(l).values())


def build_preset(name, input_dim=784, classes=10, drop=NO_DROP, skip_first_last=True):
    """Desk-scale networks: ``mlp_small``, ``cnn_small``, ``logreg``."""
    if name == "mlp_small":
        layers = [fc(input_dim, 256), LayerSpec("gelu"), fc(256, 128), LayerSpec("gelu"),
                  fc(128, classes)]
        shape = (input_dim,)
    elif name == "cnn_small":
        side = int(round(math.sqrt(input_dim)))
        if side * side != input_dim:
            raise ConfigError("cnn_small needs a square single-channel input")
        # 3x3 kernels leave an odd span on even sides, so stride 2 never divides it
        h = conv_output_extent(conv_output_extent(side, 3, 1, 0), 3, 1, 0)
        layers = [conv(1, 8, 3), LayerSpec("relu"), conv(8, 16, 3),
                  LayerSpec("relu"), LayerSpec("flatten"), fc(16 * h * h, classes)]
        shape = (1, side, side)
    elif name == "logreg":
        layers = [fc(input_dim, classes)]
        shape = (input_dim,)
    else:
        raise ConfigError(f"unknown preset {name!r}")
    spec = NetworkSpec(shape, tuple(layers), drop, skip_first_last)
    warn_if_inert(spec)
    return spec


def warn_if_inert(spec):
    """Warn when a drop is requested but the first/last rule leaves nothing to drop."""
    if (spec.default_drop.active and spec.skip_first_last
            and len(spec.applicable_indices()) <= 2):
        warnings.warn("network has no drop-applicable layers once the first and final "
                      "fc/conv layers are excluded", stacklevel=3)


# -- state ------------------------------------------------------------------

@dataclass
class TrainState:
    params: list            # per layer: {"weight": ..., "bias": ...} or {}
    velocity: list
    rng: Rng                # feeds random dropping
    t: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    loss_history: list = field(default_factory=list)
    alpha_prev: float = 1.0

    @property
    def dtype(self):
        for p in self.params:
            if p:
                return p["weight"].dtype
        return np.dtype(np.float64)


def init_state(spec, seed=0, precision="f64"):
    dtype = resolve_dtype(precision)
    layer_shapes(spec)
    root = Rng(seed)
    init_rng = root.derive(1)
    params = []
    for layer in spec.layers:
        shapes = param_shapes(layer)
        if not shapes:
            params.append({})
            continue
        w = shapes["weight"]
        bound = 1.0 / math.sqrt(math.prod(w[1:]))
        params.append({"weight": rand_uniform(init_rng, w, -bound, bound, dtype),
                       "bias": np.zeros(shapes["bias"], dtype=dtype)})
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    return TrainState(params, velocity, root.derive(2))


# -- ledger -------------------------------------------------------------------

class CacheLedger:
    """Live per-layer caches plus byte counters.

    ``*_noindex`` counters exclude index bytes entirely. Recovery scratch
    during backward is tracked separately in ``scratch_bytes`` /
    ``peak_total_bytes``.
    """

    def __init__(self, n_layers):
        self.caches = [None] * n_layers
        self.current_bytes = 0
        self.current_bytes_noindex = 0
        self.peak_bytes = 0
        self.peak_bytes_noindex = 0
        self.scratch_bytes = 0
        self.peak_total_bytes = 0
        self.added_bytes = 0
        self.released_bytes = 0
        self.loss = None
        self.logits = None
        self.d_logits = None
        self.d_outputs = None

    def add(self, i, cache):
        if self.caches[i] is not None:
            raise CacheError(f"layer {i} already has a cache")
        self.caches[i] = cache
        with_idx = cache.nbytes(with_index=True)
        self.current_bytes += with_idx
        self.current_bytes_noindex += cache.nbytes(with_index=False)
        self.added_bytes += with_idx
        self._bump()

    def release(self, i):
        cache = self.caches[i]
        if cache is None:
            raise CacheError(f"layer {i} has no live cache")
        with_idx = cache.nbytes(with_index=True)
        self.current_bytes -= with_idx
        self.current_bytes_noindex -= cache.nbytes(with_index=False)
        self.released_bytes += with_idx
        self.caches[i] = None

    def open_scratch(self, nbytes):
        self.scratch_bytes += nbytes
        self._bump()

    def close_scratch(self, nbytes):
        self.scratch_bytes -= nbytes

    def _bump(self):
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self.peak_bytes_noindex = max(self.peak_bytes_noindex, self.current_bytes_noindex)
        self.peak_total_bytes = max(self.peak_total_bytes, self.current_bytes + self.scratch_bytes)

    def live_bytes(self):
        return sum(c.nbytes() for c in self.caches if c is not None)


def _layer_forward(layer, p, a, drop, rng):
    if layer.kind == "fc":
        return L.fc_forward(a, p["weight"], p["bias"], drop, rng)
    if layer.kind == "conv":
        return L.conv_forward(a, p["weight"], p["bias"], layer.stride, layer.padding, drop, rng)
    if layer.kind == "relu":
        return L.relu_forward(a)
    if layer.kind == "gelu":
        return L.gelu_forward(a)
    return L.flatten_forward(a)


def forward(state, spec, x, labels=None, drops=None):
    """Run the network; returns ``(loss, ledger)``.

    ``drops`` overrides the effective per-layer DropSpecs (used to get the
    exact gradient of the same batch). With ``labels=None`` the loss is None
    and only ``ledger.logits`` is filled.
    """
    drops = spec.effective_drops() if drops is None else drops
    b = x.shape[0]
    a = np.ascontiguousarray(x.reshape((b,) + tuple(spec.input_shape)), dtype=state.dtype)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("non-finite network input")
    ledger = CacheLedger(len(spec.layers))
    for i, layer in enumerate(spec.layers):
        a, cache = _layer_forward(layer, state.params[i], a, drops[i], state.rng)
        ledger.add(i, cache)
    ledger.logits = a
    if labels is not None:
        loss, ledger.d_logits = L.softmax_cross_entropy(a, labels)
        if not math.isfinite(loss):
            raise NonFiniteError(f"loss is {loss}")
        ledger.loss = loss
    return ledger.loss, ledger


def backward(state, spec, ledger, d_loss=1.0, first_input_grad=True, trace=False):
    """Consume the ledger's caches back to front; returns per-layer LayerGrads.

    Each sparse cache is inflated into a scratch tensor that is charged
    to the ledger only for the duration of its own layer's backward.
    """
    if ledger.d_logits is None:
        raise CacheError("ledger has no loss gradient; run forward with labels")
    d = ledger.d_logits
    if d_loss != 1.0:
        d = d * d.dtype.type(d_loss)
    grads = [None] * len(spec.layers)
    d_outputs = [None] * len(spec.layers) if trace else None
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = ledger.caches[i]
        if cache is None:
            raise CacheError(f"layer {i}: cache missing or already consumed")
        if trace:
            d_outputs[i] = d
        need = first_input_grad or i > 0
        scratch = cache.dense_equivalent_bytes()
        ledger.open_scratch(scratch)
        p = state.params[i]
        if layer.kind == "fc":
            g = L.fc_backward(cache, p["weight"], d, need)
        elif layer.kind == "conv":
            g = L.conv_backward(cache, p["weight"], d, layer.stride, layer.padding, need)
        elif layer.kind == "relu":
            g = L.relu_backward(cache, d)
        elif layer.kind == "gelu":
            g = L.gelu_backward(cache, d)
        else:
            g = L.flatten_backward(cache, d)
        ledger.close_scratch(scratch)
        ledger.release(i)
        grads[i] = g
        d = g.d_input
    ledger.d_outputs = d_outputs
    return grads


def flat_gradient(grads):
    """Concatenate every parameter gradient (weight then bias, layer order)."""
    parts = []
    for g in grads:
        if g is not None and g.d_theta is not None:
            parts.append(g.d_theta.reshape(-1))
            parts.append(g.d_bias.reshape(-1))
    return np.concatenate(parts)


def layer_gradient_slices(spec):
    """``{layer_index: slice}`` into ``flat_gradient`` output."""
    out, pos = {}, 0
    for i, layer in enumerate(spec.layers):
        shapes = param_shapes(layer)
        if shapes:
            n = sum(math.prod(s) for s in shapes.values())
            out[i] = slice(pos, pos + n)
            pos += n
    return out


def gradient(state, spec, x, labels, drops=None):
    """Loss and flat parameter gradient of one batch."""
    loss, ledger = forward(state, spec, x, labels, drops)
    return loss, flat_gradient(backward(state, spec, ledger, first_input_grad=False))


def predict(state, spec, x, batch_size=1024):
    out = []
    drops = [NO_DROP] * len(spec.layers)
    for i in range(0, x.shape[0], batch_size):
        _, ledger = forward(state, spec, x[i:i + batch_size], None, drops)
        out.append(ledger.logits)
    return np.concatenate(out)
