"""Command-line entry point: ``dropgrad <command> --config PATH [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, analysis, gradcheck, train
from .config import PRECISION_ENV, RunConfig
from .errors import DropGradError
from .sparsity import Strategy
from .tensor import Rng, resolve_dtype

log = logging.getLogger("dropgrad")

EPILOG = f"""\
environment:
  {PRECISION_ENV}={{f32,f64}}  scalar precision when the config does not set one

exit codes:
  0 ok, 2 config error, 3 numeric failure, 4 I/O or data-format error
"""


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _strategies(text):
    try:
        return [Strategy.parse(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser():
    p = argparse.ArgumentParser(prog="dropgrad", description=__doc__, epilog=EPILOG,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="run config JSON")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--gamma", type=float, help="override drop rate")
    common.add_argument("--strategy", choices=["none", "random", "min_k", "min-k"],
                        help="override drop strategy")
    common.add_argument("--out", type=Path, help="override output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, epilog=EPILOG,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    t = add("train", "train one run; writes metrics.csv, eval.csv, final.drpt, manifest.json")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, help="stop and checkpoint after this global step")

    s = add("sweep", "one run per (strategy, gamma) plus the undropped baseline; writes sweep.csv")
    s.add_argument("--gammas", type=_floats, required=True, help="comma-separated drop rates")
    s.add_argument("--probe-steps", type=int, default=100, help="step at which probe loss is read")
    s.add_argument("--strategies", type=_strategies, help="comma-separated, default from config")

    g = add("gradcheck", "finite-difference and masked-oracle gradient audits (float64)")
    g.add_argument("--batch", type=int, default=4, help="audit batch size")
    g.add_argument("--inject-corrupt-cache", action="store_true",
                   help="test hook: corrupt one sparse cache before backward")

    n = add("noise-stats", "alpha/beta noise statistics per gamma; writes stats.csv")
    n.add_argument("--gammas", type=_floats, default=[0.3, 0.5, 0.7])
    n.add_argument("--batches", type=int, default=200, help="minibatches per gamma")

    add("mem-report", "per-layer cache accounting from a dry-run forward; writes mem.csv")
    return p


def _config(args):
    cfg = RunConfig.load(args.config)
    return cfg.override(seed=args.seed, gamma=args.gamma, strategy=args.strategy,
                        out_dir=str(args.out) if args.out else None)


def cmd_train(cfg, args):
    res = train.run_training(cfg, cfg["out_dir"], resume=args.resume, max_steps=args.max_steps)
    if res.evals:
        print(f"epoch {res.evals[-1][0]} train_loss {res.final_train_loss:.6g} "
              f"test_accuracy {res.final_accuracy:.4f}")
    print(f"wrote {res.out_dir}")


def cmd_sweep(cfg, args):
    rows = train.run_sweep(cfg, args.gammas, args.probe_steps, args.strategies)
    for r in rows:
        print(f"{r['strategy']:>6} gamma={r['gamma']:<4g} probe={r['probe_loss']:.4f} "
              f"final={r['final_loss']:.4f} acc={r['final_accuracy']:.4f} flagged={r['flagged']}")


def cmd_gradcheck(cfg, args):
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _, _ = train.load_datasets(cfg, resolve_dtype("f64"))
    spec = train.build_spec(cfg, train_ds)
    drop = cfg.drop_spec()
    gamma = drop.gamma if drop.active else 0.5
    try:
        report = gradcheck.run_gradcheck(spec, cfg["seed"], args.batch, gamma,
                                         inject_corrupt=args.inject_corrupt_cache)
    except DropGradError as exc:
        (out / "gradcheck.json").write_text(json.dumps(
            {"ok": False, "error": str(exc), **getattr(exc, "report", {})}, indent=2))
        raise
    (out / "gradcheck.json").write_text(json.dumps({"ok": True, **report}, indent=2))
    train.write_manifest(out, cfg, "gradcheck", gamma=gamma, precision_used="f64")
    print(f"fd max rel err {max(report['fd'].values()):.3g}; masked oracle "
          f"{len(report['masked'])} layer(s) ok")


def cmd_noise_stats(cfg, args):
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _, _ = train.load_datasets(cfg, resolve_dtype("f64"))
    spec = train.build_spec(cfg, train_ds)
    drop = cfg.drop_spec()
    strategy = drop.strategy if drop.active else Strategy.MIN_K
    rows = analysis.noise_experiment(spec, train_ds, args.gammas, args.batches,
                                     Rng(cfg["seed"]), batch_size=cfg["batch_size"],
                                     strategy=strategy)
    analysis.write_stats_csv(out / "stats.csv", rows)
    train.write_manifest(out, cfg, "noise-stats", gammas=args.gammas, batches=args.batches,
                         strategy=strategy.value)
    for r in rows:
        print(f"gamma={r.gamma:g} alpha={r.mean_alpha:.4f} beta={r.mean_beta:.4f} "
              f"ratio={r.mean_ratio:.4f} alpha_analytic={r.mean_alpha_analytic:.4f}")


def cmd_mem_report(cfg, args):
    rows, _ = train.run_mem_report(cfg, cfg["out_dir"])
    total = rows[-1]
    print(f"dense {total[5]} B, values {total[6]} B, reduction {total[8]:.4f} "
          f"({total[9]:.4f} with device indices)")


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
            "noise-stats": cmd_noise_stats, "mem-report": cmd_mem_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except DropGradError as exc:
        print(f"dropgrad: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dropgrad: I/O error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
