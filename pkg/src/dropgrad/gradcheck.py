"""Gradient audits.

Three independent checks on a small random batch, always in float64:

1. central finite differences on sampled coordinates of every parameter and
   of the network input, undropped;
2. the dropped backward against the dense backward fed ``recover(cache)``,
   compared bit-for-bit;
3. the dropped weight gradient against a direct loop over the retained
   entries only (the restricted sum), compared to a relative tolerance.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .errors import CacheError, GradCheckError
from .network import NO_DROP, backward, forward, init_state
from .sparsity import DropSpec, Strategy, recover
from .tensor import Rng

FD_TOL = 1e-6
ORACLE_TOL = 1e-12


def rel_err(a, b):
    a = np.asarray(a, np.float64).reshape(-1)
    b = np.asarray(b, np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def random_batch(spec, rng, batch=4, classes=None):
    shape = (batch,) + tuple(spec.input_shape)
    x = rng.normal(int(np.prod(shape))).reshape(shape)
    if classes is None:
        last = [l for l in spec.layers if l.kind == "fc"][-1]
        classes = last.out_features
    return x, rng.integers(batch, classes)


def _loss(state, spec, x, y):
    loss, _ = forward(state, spec, x, y, [NO_DROP] * len(spec.layers))
    return loss


def finite_difference_report(state, spec, x, y, h=1e-6, coords=16, rng=None):
    """``{name: relative error}`` between analytic and central-difference gradients."""
    rng = rng or Rng(0)
    _, ledger = forward(state, spec, x, y, [NO_DROP] * len(spec.layers))
    grads = backward(state, spec, ledger)
    report = {}
    targets = [(f"layer{i}.{k}", state.params[i][k], getattr(grads[i], "d_theta" if k == "weight"
                                                           else "d_bias"))
               for i in range(len(spec.layers)) for k in sorted(state.params[i])]
    targets.append(("input", x, grads[0].d_input))
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        pick = np.unique(rng.integers(min(coords, flat.size) * 2, flat.size))[:coords]
        num = np.empty(pick.size)
        for j, c in enumerate(pick):
            orig = flat[c]
            flat[c] = orig + h
            up = _loss(state, spec, x, y)
            flat[c] = orig - h
            down = _loss(state, spec, x, y)
            flat[c] = orig
            num[j] = (up - down) / (2 * h)
        report[name] = rel_err(analytic.reshape(-1)[pick], num)
    return report


def restricted_fc_grad(s, d_z):
    """sum over retained (n, k) of d_z[n, j] * a[n, k], one entry at a time."""
    b, c_a = s.original_shape
    out = np.zeros((d_z.shape[1], c_a))
    for idx, v in zip(s.index_array(), s.values):
        n, k = divmod(int(idx), c_a)
        out[:, k] += d_z[n, :] * v
    return out


def restricted_conv_grad(s, d_z, k, stride, padding):
    """Kernel gradient summed over retained input entries only."""
    b, c, h, w = s.original_shape
    cz, oh, ow = d_z.shape[1:]
    out = np.zeros((cz, c, k, k))
    for idx, v in zip(s.index_array(), s.values):
        n, rem = divmod(int(idx), c * h * w)
        ch, rem = divmod(rem, h * w)
        yy, xx = divmod(rem, w)
        for u in range(k):
            oy, r = divmod(yy + padding - u, stride)
            if r or not 0 <= oy < oh:
                continue
            for vv in range(k):
                ox, r2 = divmod(xx + padding - vv, stride)
                if r2 or not 0 <= ox < ow:
                    continue
                out[:, ch, u, vv] += d_z[n, :, oy, ox] * v
    return out


def masked_oracle_report(state, spec, x, y, drop, inject_corrupt=False):
    """Per dropping layer: (max |diff| vs dense-on-recovered, rel err vs restricted sum)."""
    drops = spec.with_drop(drop).effective_drops()
    active = [i for i, d in enumerate(drops) if d.active]
    _, ledger = forward(state, spec, x, y, drops)
    recovered = {}
    for i in active:
        s = ledger.caches[i].sparse
        if inject_corrupt:
            if s.indices is None:
                s.indices = np.arange(s.k, dtype=np.uint32)
            s.indices[-1] = s.size + 7
            inject_corrupt = False
        recovered[i] = s
    grads = backward(state, spec, ledger, trace=True)
    out = {}
    for i in active:
        layer, p, d_z, s = spec.layers[i], state.params[i], ledger.d_outputs[i], recovered[i]
        dense = L.LayerCache.of_dense(recover(s))
        if layer.kind == "fc":
            ref = L.fc_backward(dense, p["weight"], d_z)
            loop = restricted_fc_grad(s, d_z)
        else:
            ref = L.conv_backward(dense, p["weight"], d_z, layer.stride, layer.padding)
            loop = restricted_conv_grad(s, d_z, layer.kernel, layer.stride, layer.padding)
        ulp_equal = bool(np.array_equal(ref.d_theta, grads[i].d_theta))
        out[f"layer{i}"] = {
            "bit_identical": ulp_equal,
            "max_abs_diff": float(np.max(np.abs(ref.d_theta - grads[i].d_theta))),
            "restricted_sum_rel_err": rel_err(grads[i].d_theta, loop),
        }
    return out


def run_gradcheck(spec, seed=0, batch=4, gamma=0.5, fd_tol=FD_TOL, oracle_tol=ORACLE_TOL,
                  inject_corrupt=False):
    """Returns the report dict; raises GradCheckError on any breach."""
    state = init_state(spec, seed, "f64")
    rng = Rng(seed).derive(99)
    x, y = random_batch(spec, rng, batch)
    report = {"fd": finite_difference_report(state, spec, x, y, rng=rng)}
    try:
        report["masked"] = masked_oracle_report(
            state, spec, x, y, DropSpec(Strategy.MIN_K, gamma), inject_corrupt)
    except CacheError as exc:
        raise GradCheckError(f"cache failure during masked audit: {exc}") from exc
    failures = [f"{k}: fd rel err {v:.3g}" for k, v in report["fd"].items() if not v <= fd_tol]
    for k, v in report["masked"].items():
        if not v["bit_identical"]:
            failures.append(f"{k}: dropped backward differs from dense-on-recovered")
        if not v["restricted_sum_rel_err"] <= oracle_tol:
            failures.append(f"{k}: restricted-sum rel err {v['restricted_sum_rel_err']:.3g}")
    report["failures"] = failures
    if failures:
        err = GradCheckError("; ".join(failures))
        err.report = report
        raise err
    return report
