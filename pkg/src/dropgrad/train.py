"""Training runs, gamma sweeps and memory reports driven by a RunConfig.

A run directory holds ``metrics.csv`` (one row per step), ``eval.csv`` (one
row per epoch), ``manifest.json`` and ``final.drpt``; ``telemetry.csv`` and
``bound.json`` appear when telemetry is on. Column layouts are listed in
``docs/formats.md``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analysis, checkpoint
from .data import Dataset, batch_iter, batches_per_epoch, load_idx, synth_blobs
from .errors import ConfigError, NonFiniteError
from .network import backward, flat_gradient, forward, init_state, param_shapes, predict
from .optim import grads_by_layer, step
from .sparsity import Strategy, mem_report
from .tensor import Rng, resolve_dtype

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("t", "lr", "loss", "peak_cached_bytes", "peak_cached_bytes_noindex")
EVAL_COLUMNS = ("epoch", "train_loss", "test_loss", "test_accuracy")
SWEEP_COLUMNS = ("strategy", "gamma", "probe_loss", "final_loss", "final_accuracy",
                 "peak_cached_bytes", "peak_cached_bytes_noindex", "flagged")
MEM_COLUMNS = ("layer", "kind", "strategy", "gamma", "param_bytes", "dense_bytes",
               "payload_value_bytes", "payload_index_bytes", "reduction_fraction",
               "reduction_fraction_with_index")

SHUFFLE_KEY = 11
DATA_KEY = 12
ALPHA_FLOOR = 1e-3
PROBE_WINDOW = 10


def fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows, mode="w"):
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def load_datasets(cfg, dtype):
    """``(train, test, info)`` for the configured source."""
    d = cfg["data"]
    if d["source"] == "synth_blobs":
        n = d.get("n", 2000)
        full = synth_blobs(Rng(cfg["seed"]).derive(DATA_KEY), n, d.get("dim", 784),
                           d.get("classes", 10), d.get("separation", 3.0),
                           d.get("nonnegative", False))
        n_test = max(1, int(round(n * d.get("test_fraction", 0.2))))
        train, test = full.split_off(n_test)
    else:
        try:
            train = load_idx(cfg.resolve(d["train_images"]), cfg.resolve(d["train_labels"]))
            test = load_idx(cfg.resolve(d["test_images"]), cfg.resolve(d["test_labels"]))
        except KeyError as exc:
            raise ConfigError(f"idx source needs {exc.args[0]}") from None
        if "limit_train" in d:
            train = train.subset(slice(0, d["limit_train"]))
        if "limit_test" in d:
            test = test.subset(slice(0, d["limit_test"]))
    info = {"source": train.source, "n_train": len(train), "n_test": len(test)}
    if d.get("standardize"):
        mean = float(train.inputs.mean())
        std = float(train.inputs.std()) or 1.0
        train = Dataset((train.inputs - mean) / std, train.labels, train.num_classes,
                        train.source, "train")
        test = Dataset((test.inputs - mean) / std, test.labels, test.num_classes,
                       test.source, "test")
        info.update(standardize_mean=mean, standardize_std=std)
    return train.astype(dtype), test.astype(dtype), info


def build_spec(cfg, train):
    return cfg.network_spec(input_dim=int(np.prod(train.inputs.shape[1:])),
                            classes=train.num_classes)


def evaluate(state, spec, ds, batch_size=1024):
    from .layers import softmax_cross_entropy
    logits = predict(state, spec, ds.inputs, batch_size)
    loss, _ = softmax_cross_entropy(logits.astype(np.float64), ds.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    return loss, acc


def write_manifest(out_dir, cfg, command, **extra):
    manifest = {
        "command": command,
        "code_version": __version__,
        "config_sha256": cfg.digest(),
        "precision": cfg["precision"],
        "seed": cfg["seed"],
        "config": cfg.raw,
        **extra,
    }
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _flat_params(state):
    return np.concatenate([p[k].reshape(-1).astype(np.float64)
                           for p in state.params for k in ("weight", "bias") if p])


@dataclass
class RunResult:
    out_dir: Path
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    telemetry: list = field(default_factory=list)
    peak_bytes: int = 0
    peak_bytes_noindex: int = 0
    completed: bool = True

    @property
    def final_train_loss(self):
        return self.evals[-1][1] if self.evals else math.nan

    @property
    def final_accuracy(self):
        return self.evals[-1][3] if self.evals else math.nan


def run_training(cfg, out_dir=None, resume=None, max_steps=None):
    """Train per ``cfg``; ``max_steps`` stops early after that global step and checkpoints."""
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dtype = resolve_dtype(cfg["precision"])
    train, test, info = load_datasets(cfg, dtype)
    spec = build_spec(cfg, train)
    opt = cfg.optim()
    drops = spec.effective_drops()
    bs = cfg["batch_size"]
    if bs > len(train):
        raise ConfigError(f"batch_size {bs} exceeds {len(train)} training rows")
    per_epoch = batches_per_epoch(len(train), bs)
    T = cfg["epochs"] * per_epoch
    telemetry = cfg["telemetry"]

    metrics_path = out / "metrics.csv"
    eval_path = out / "eval.csv"
    if resume is not None:
        state, ck_spec, _ = checkpoint.load(resume)
        if ck_spec.to_dict() != spec.to_dict():
            raise ConfigError("checkpoint network spec does not match the config")
        _truncate_csv(metrics_path, METRICS_COLUMNS, lambda r: int(r[0]) <= state.t)
        _truncate_csv(eval_path, EVAL_COLUMNS, lambda r: int(r[0]) <= state.epoch)
        if telemetry:
            _truncate_csv(out / "telemetry.csv", analysis.STEP_COLUMNS,
                          lambda r: int(r[0]) <= state.t)
    else:
        state = init_state(spec, cfg["seed"], cfg["precision"])
        write_csv(metrics_path, METRICS_COLUMNS, [])
        write_csv(eval_path, EVAL_COLUMNS, [])
        if telemetry:
            write_csv(out / "telemetry.csv", analysis.STEP_COLUMNS, [])
    write_manifest(out, cfg, "train", data=info, network_spec=spec.effective().to_dict(),
                   resumed_from=str(resume) if resume else None, total_steps=T)

    result = RunResult(out)
    shuffle_root = Rng(cfg["seed"]).derive(SHUFFLE_KEY)
    prev = None  # (flat params, full-batch grad) for the secant estimate
    ckpt_every = cfg["checkpoint_every"]
    with open(metrics_path, "a", newline="") as mfh, open(eval_path, "a", newline="") as efh:
        mw = csv.writer(mfh, lineterminator="\n")
        ew = csv.writer(efh, lineterminator="\n")
        tfh = open(out / "telemetry.csv", "a", newline="") if telemetry else None
        tw = csv.writer(tfh, lineterminator="\n") if tfh else None
        try:
            while state.epoch < cfg["epochs"]:
                rng = shuffle_root.derive(state.epoch)
                for x, y in batch_iter(train, bs, rng, True, start=state.batch_in_epoch):
                    if max_steps is not None and state.t >= max_steps:
                        checkpoint.save(out / f"step{state.t}.drpt", state, spec)
                        result.completed = False
                        return result
                    try:
                        rec = _train_step(state, spec, drops, opt, T, x, y, train, telemetry, prev)
                    except NonFiniteError:
                        checkpoint.save(out / "last_good.drpt", state, spec)
                        raise
                    lr, loss, ledger, stats, prev = rec
                    state.batch_in_epoch += 1
                    state.loss_history.append(loss)
                    result.losses.append(loss)
                    result.peak_bytes = max(result.peak_bytes, ledger.peak_bytes)
                    result.peak_bytes_noindex = max(result.peak_bytes_noindex,
                                                    ledger.peak_bytes_noindex)
                    mw.writerow([fmt(v) for v in (state.t, lr, loss, ledger.peak_bytes,
                                                  ledger.peak_bytes_noindex)])
                    if stats is not None:
                        result.telemetry.append(stats)
                        tw.writerow([fmt(v) for v in (stats.t, stats.alpha_hat, stats.beta_hat,
                                                      stats.ratio, stats.bias_norm, stats.loss)])
                    if ckpt_every and state.t % ckpt_every == 0:
                        checkpoint.save(out / f"step{state.t}.drpt", state, spec)
                state.epoch += 1
                state.batch_in_epoch = 0
                tr_loss, _ = evaluate(state, spec, train)
                te_loss, te_acc = evaluate(state, spec, test)
                row = (state.epoch, tr_loss, te_loss, te_acc)
                result.evals.append(row)
                ew.writerow([fmt(v) for v in row])
                efh.flush()
                log.info("epoch %d train_loss %.4f test_acc %.4f", *row[:2], te_acc)
        finally:
            if tfh:
                tfh.close()
    checkpoint.save(out / "final.drpt", state, spec)
    if telemetry and result.telemetry:
        losses = result.losses
        br = analysis.bound_report(losses[0], min(losses), opt.lr, len(losses), result.telemetry)
        (out / "bound.json").write_text(json.dumps(asdict(br), indent=2))
    return result


def _train_step(state, spec, drops, opt, T, x, y, train, telemetry, prev):
    stats = None
    if telemetry:
        loss, g_exact, layer_grads, a_an, ledger = analysis.paired_gradients(state, spec, x, y, drops)
        _, g_full = analysis.full_batch_gradient(state, spec, train)
        stats = analysis.batch_stats(state.t + 1, g_exact, flat_gradient(layer_grads), g_full,
                                     loss, a_an)
        x_now = _flat_params(state)
        if prev is not None:
            stats.secant_L = analysis.secant_smoothness(prev[0], x_now, prev[1], g_full)
        prev = (x_now, g_full)
    else:
        loss, ledger = forward(state, spec, x, y, drops)
        layer_grads = backward(state, spec, ledger, first_input_grad=False)
    alpha_t = None
    if opt.alpha_scaling == "online":
        alpha_t = min(1.0, max(ALPHA_FLOOR, state.alpha_prev))
    lr = step(state, grads_by_layer(layer_grads), opt, T, alpha_t)
    if stats is not None and math.isfinite(stats.alpha_hat):
        state.alpha_prev = stats.alpha_hat
    return lr, loss, ledger, stats, prev


def _truncate_csv(path, columns, keep):
    path = Path(path)
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r, None)
            rows = [row for row in r if row and keep(row)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


# -- sweep -----------------------------------------------------------------------

def probe_loss(losses, probe_steps):
    """Mean training loss over the ``PROBE_WINDOW`` steps ending at ``probe_steps``."""
    if not losses:
        return math.nan
    end = min(probe_steps, len(losses))
    return float(np.mean(losses[max(0, end - PROBE_WINDOW):end]))


def flag_rows(rows):
    """Flag every row whose probe loss exceeds the gamma = 0 baseline's."""
    base = next(r for r in rows if r["gamma"] == 0.0)
    for r in rows:
        r["flagged"] = int(r["probe_loss"] > base["probe_loss"])
    return rows


def run_sweep(cfg, gammas, probe_steps, strategies=None, out_dir=None):
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if not gammas:
        raise ConfigError("sweep needs at least one gamma")
    if strategies is None:
        s = cfg.drop_spec().strategy
        strategies = [s if s is not Strategy.NONE else Strategy.MIN_K]
    index_on_host = cfg.drop_spec().index_on_host
    jobs = [("none", 0.0)] + [(Strategy.parse(s).value, float(g))
                              for s in strategies for g in gammas if g > 0]
    rows = []
    for strategy, gamma in jobs:
        run_cfg = cfg.override(strategy=strategy, gamma=gamma)
        run_cfg.raw["drop"]["index_on_host"] = index_on_host
        res = run_training(run_cfg, out / f"{strategy}_g{gamma:g}")
        rows.append({"strategy": strategy, "gamma": gamma,
                     "probe_loss": probe_loss(res.losses, probe_steps),
                     "final_loss": res.final_train_loss, "final_accuracy": res.final_accuracy,
                     "peak_cached_bytes": res.peak_bytes,
                     "peak_cached_bytes_noindex": res.peak_bytes_noindex})
    flag_rows(rows)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows])
    write_manifest(out, cfg, "sweep", gammas=list(gammas), probe_steps=probe_steps)
    return rows


# -- memory report ------------------------------------------------------------------

def memory_rows(cfg, train=None):
    """Per-layer cache accounting from one dry-run forward; returns ``(rows, ledger)``."""
    dtype = resolve_dtype(cfg["precision"])
    if train is None:
        train, _, _ = load_datasets(cfg, dtype)
    spec = build_spec(cfg, train)
    state = init_state(spec, cfg["seed"], cfg["precision"])
    bs = min(cfg["batch_size"], len(train))
    _, ledger = forward(state, spec, train.inputs[:bs], train.labels[:bs])
    drops = spec.effective_drops()
    rows = []
    for i, (layer, cache) in enumerate(zip(spec.layers, ledger.caches)):
        pbytes = sum(int(np.prod(s)) for s in param_shapes(layer).values()) * dtype.itemsize
        if cache.kind.value == "sparse":
            r = mem_report(cache.sparse)
            rows.append([i, layer.kind, drops[i].strategy.value, drops[i].gamma, pbytes,
                         r.dense_bytes, r.payload_value_bytes, r.payload_index_bytes,
                         r.reduction_fraction, r.reduction_fraction_with_index])
        else:
            nb = cache.nbytes()
            rows.append([i, layer.kind, "none", 0.0, pbytes, nb, nb, 0, 0.0, 0.0])
    dense = sum(r[5] for r in rows)
    values = sum(r[6] for r in rows)
    device = sum(r[6] + (0 if d.index_on_host else r[7]) for r, d in zip(rows, drops))
    rows.append(["total", "-", "-", "-", sum(r[4] for r in rows), dense, values,
                 sum(r[7] for r in rows), 1 - values / dense if dense else 0.0,
                 1 - device / dense if dense else 0.0])
    return rows, ledger


def run_mem_report(cfg, out_dir=None):
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows, ledger = memory_rows(cfg)
    write_csv(out / "mem.csv", MEM_COLUMNS, rows)
    write_manifest(out, cfg, "mem-report", ledger_peak_bytes=ledger.peak_bytes,
                   ledger_peak_bytes_noindex=ledger.peak_bytes_noindex)
    return rows, ledger
