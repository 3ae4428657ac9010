"""Empirical bias/noise factors of dropped gradients and convergence-bound telemetry.

Model: a dropped minibatch gradient is ``alpha * g_full + beta * n + r``
with ``g_full`` the full-dataset gradient (the noiseless reference),
``n = g_exact - g_full`` the minibatch noise, and ``r`` a residual.
``(alpha, beta)`` is the least-squares fit onto ``span{g_full, n}``, so
``r`` is orthogonal to both directions and ``||r||`` is the reported bias
norm. This is an estimator of the model, not ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError
from .network import NO_DROP, backward, flat_gradient, forward, gradient, layer_gradient_slices
from .sparsity import DropSpec, Strategy, retained_mask
from .layers import CacheKind

COLLINEAR_TOL = 1e-12
MEAN_EPS = 1e-12


@dataclass
class GradStats:
    t: int = 0
    alpha_hat: float = math.nan
    beta_hat: float = math.nan
    alpha_analytic: float = math.nan
    noise_var_hat: float = math.nan
    bias_norm: float = math.nan
    ratio: float = math.nan
    loss: float = math.nan
    secant_L: float = math.nan


@dataclass
class BoundReport:
    term1: float
    term2_sgd: float
    term2_dropit: float
    L_hat: float
    noise_var: float
    mean_ratio_sq: float


def estimate_alpha_beta(g_exact, g_drop, g_fullbatch):
    """``(alpha, beta, bias_norm)`` from the 2x2 normal equations."""
    e = np.asarray(g_exact, dtype=np.float64).reshape(-1)
    d = np.asarray(g_drop, dtype=np.float64).reshape(-1)
    f = np.asarray(g_fullbatch, dtype=np.float64).reshape(-1)
    if not (e.shape == d.shape == f.shape):
        raise ValueError("gradient vectors differ in length")
    n = e - f
    ff, nn, fn = float(f @ f), float(n @ n), float(f @ n)
    if ff == 0.0:
        raise DegenerateError("full-batch gradient has zero norm")
    if nn == 0.0:
        raise DegenerateError("minibatch noise has zero norm (batch equals full data?)")
    det = ff * nn - fn * fn
    if det <= COLLINEAR_TOL * ff * nn:
        raise DegenerateError("noise is collinear with the full-batch gradient")
    df, dn = float(d @ f), float(d @ n)
    alpha = (df * nn - dn * fn) / det
    beta = (dn * ff - df * fn) / det
    bias = float(np.linalg.norm(d - alpha * f - beta * n))
    return alpha, beta, bias


def estimate_alpha_analytic(a, s):
    """``(mu - c) / mu``: mean of ``a`` versus the mean contribution of dropped entries."""
    a = np.asarray(a, dtype=np.float64)
    n = a.size
    mu = float(a.mean())
    if abs(mu) < MEAN_EPS:
        raise DegenerateError(f"activation mean {mu!r} too close to zero")
    dropped = a.reshape(-1)[~retained_mask(s).reshape(-1)]
    c = float(dropped.sum()) / n
    return (mu - c) / mu


def noise_variance(per_batch_grads, g_fullbatch):
    """Dimension-averaged squared deviation of minibatch gradients from the full gradient."""
    if len(per_batch_grads) < 2:
        raise ValueError("need at least two batch gradients")
    f = np.asarray(g_fullbatch, dtype=np.float64)
    dim = f.size
    return float(np.mean([float(np.sum((np.asarray(g, dtype=np.float64) - f) ** 2)) / dim
                          for g in per_batch_grads]))


def bound_report(loss_initial, loss_best, eta, T, stats_history):
    if not stats_history:
        raise ValueError("empty stats history")
    if T <= 0 or eta <= 0:
        raise ValueError("T and eta must be positive")
    best = min(loss_best, loss_initial)
    term1 = 2.0 * (loss_initial - best) / (T * eta)
    noise = [s.noise_var_hat for s in stats_history if math.isfinite(s.noise_var_hat)]
    xi2 = float(np.mean(noise)) if noise else 0.0
    secants = [s.secant_L for s in stats_history if math.isfinite(s.secant_L)]
    L_hat = max(secants) if secants else 0.0
    ratios = [(s.beta_hat / s.alpha_hat) ** 2 for s in stats_history
              if math.isfinite(s.beta_hat) and math.isfinite(s.alpha_hat) and s.alpha_hat != 0]
    mean_sq = float(np.mean(ratios)) if ratios else 1.0
    term2_sgd = eta * L_hat * xi2
    return BoundReport(term1, term2_sgd, term2_sgd * mean_sq, L_hat, xi2, mean_sq)


def secant_smoothness(x_prev, x_next, g_prev, g_next):
    dx = float(np.linalg.norm(np.asarray(x_next, np.float64) - np.asarray(x_prev, np.float64)))
    if dx == 0.0:
        return math.nan
    return float(np.linalg.norm(np.asarray(g_next, np.float64) - np.asarray(g_prev, np.float64))) / dx


def full_batch_gradient(state, spec, dataset, chunk=2048):
    """Exact gradient and loss of the mean loss over the whole dataset."""
    n = len(dataset)
    drops = [NO_DROP] * len(spec.layers)
    total, loss = None, 0.0
    for i in range(0, n, chunk):
        x, y = dataset.inputs[i:i + chunk], dataset.labels[i:i + chunk]
        w = x.shape[0] / n
        l, g = gradient(state, spec, x, y, drops)
        g = g.astype(np.float64) * w
        total = g if total is None else total + g
        loss += l * w
    return loss, total


def alpha_analytic_from_ledgers(exact_ledger, drop_ledger, layers):
    """Mean analytic alpha over ``layers``, pairing dense and sparse caches."""
    vals = []
    for i in layers:
        dense, sparse = exact_ledger.caches[i], drop_ledger.caches[i]
        if dense is None or sparse is None or sparse.kind is not CacheKind.SPARSE:
            continue
        vals.append(estimate_alpha_analytic(dense.dense, sparse.sparse))
    return float(np.mean(vals)) if vals else 1.0


def batch_stats(t, g_exact, g_drop, g_full, loss=math.nan, alpha_analytic=math.nan):
    alpha, beta, bias = estimate_alpha_beta(g_exact, g_drop, g_full)
    dim = np.asarray(g_full).size
    nv = float(np.sum((np.asarray(g_exact, np.float64) - g_full) ** 2)) / dim
    return GradStats(t=t, alpha_hat=alpha, beta_hat=beta, alpha_analytic=alpha_analytic,
                     noise_var_hat=nv, bias_norm=bias,
                     ratio=beta / alpha if alpha != 0 else math.nan, loss=loss)


def paired_gradients(state, spec, x, y, drops):
    """Exact and dropped gradients of one batch plus the analytic alpha.

    Returns ``(loss, g_exact, drop_grads, alpha_analytic, drop_ledger)``;
    ``drop_grads`` are per-layer LayerGrads of the dropped pass.
    """
    exact_drops = [NO_DROP] * len(spec.layers)
    loss, exact_ledger = forward(state, spec, x, y, exact_drops)
    _, drop_ledger = forward(state, spec, x, y, drops)
    active = [i for i, d in enumerate(drops) if d.active]
    a_an = alpha_analytic_from_ledgers(exact_ledger, drop_ledger, active)
    g_exact = flat_gradient(backward(state, spec, exact_ledger, first_input_grad=False))
    drop_grads = backward(state, spec, drop_ledger, first_input_grad=False)
    return loss, g_exact, drop_grads, a_an, drop_ledger


STATS_COLUMNS = ("gamma", "mean_alpha", "mean_beta", "mean_ratio", "mean_alpha_analytic",
                 "noise_var")
STEP_COLUMNS = ("t", "alpha", "beta", "ratio", "bias_norm", "loss")


@dataclass
class NoiseRow:
    gamma: float
    mean_alpha: float
    mean_beta: float
    mean_ratio: float
    mean_alpha_analytic: float
    noise_var: float
    per_layer: dict = field(default_factory=dict)

    def csv_row(self):
        return [getattr(self, c) for c in STATS_COLUMNS]


def noise_experiment(spec, dataset, gammas, batches, rng, state=None, batch_size=64,
                     strategy=Strategy.MIN_K):
    """Mean alpha/beta/ratio per gamma over the same ``batches`` minibatches.

    Dropping is applied to every fc/conv layer: the first/final-layer rule
    is a peak-memory rule and would leave a one-layer model with nothing to
    measure.
    """
    from .network import init_state

    n = len(dataset)
    if n <= batch_size:
        raise DegenerateError("dataset must be larger than one minibatch")
    if state is None:
        state = init_state(spec, rng.derive(7).seed, "f64")
    _, g_full = full_batch_gradient(state, spec, dataset)
    picks = [rng.permutation(n)[:batch_size] for _ in range(batches)]
    slices = layer_gradient_slices(spec)

    exact = []
    for idx in picks:
        _, g = gradient(state, spec, dataset.inputs[idx], dataset.labels[idx],
                        [NO_DROP] * len(spec.layers))
        exact.append(g.astype(np.float64))
    nv = noise_variance(exact, g_full)

    rows = []
    for gamma in gammas:
        drop = DropSpec(strategy if gamma > 0 else Strategy.MIN_K, gamma)
        drops = spec.with_drop(drop, skip_first_last=False).effective_drops()
        alphas, betas, ratios, analytic = [], [], [], []
        layer_acc = {i: [] for i in slices}
        for idx, g_exact in zip(picks, exact):
            _, _, drop_grads, a_an, _ = paired_gradients(
                state, spec, dataset.inputs[idx], dataset.labels[idx], drops)
            g_drop = flat_gradient(drop_grads)
            s = batch_stats(0, g_exact, g_drop, g_full, alpha_analytic=a_an)
            alphas.append(s.alpha_hat)
            betas.append(s.beta_hat)
            ratios.append(s.ratio)
            analytic.append(a_an)
            if len(slices) > 1:
                for i, sl in slices.items():
                    layer_acc[i].append(estimate_alpha_beta(g_exact[sl], g_drop[sl], g_full[sl])[:2])
        per_layer = {i: tuple(np.mean(v, axis=0)) for i, v in layer_acc.items() if v}
        rows.append(NoiseRow(float(gamma), float(np.mean(alphas)), float(np.mean(betas)),
                             float(np.mean(ratios)), float(np.mean(analytic)), nv, per_layer))
    return rows


def write_stats_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for r in rows:
            w.writerow([repr(v) for v in r.csv_row()])

