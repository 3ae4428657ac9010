import csv
import json
import math

import pytest

from dropgrad import train
from dropgrad.errors import NonFiniteError


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_artifacts(make_config, tmp_path):
    cfg = make_config()
    res = train.run_training(cfg, tmp_path / "r")
    rows = read_csv(tmp_path / "r" / "metrics.csv")
    assert tuple(rows[0]) == train.METRICS_COLUMNS
    assert len(rows) - 1 == 2 * 10  # 320 training rows in batches of 32, two epochs
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 21))
    evals = read_csv(tmp_path / "r" / "eval.csv")
    assert tuple(evals[0]) == train.EVAL_COLUMNS and len(evals) == 3
    m = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert m["config_sha256"] == cfg.digest() and m["precision"] == "f32"
    assert m["code_version"]
    assert (tmp_path / "r" / "final.drpt").exists()
    assert res.completed and res.peak_bytes >= res.peak_bytes_noindex > 0


def test_same_seed_identical_other_seed_differs(make_config, tmp_path):
    cfg = make_config(epochs=1)
    train.run_training(cfg, tmp_path / "a")
    train.run_training(cfg, tmp_path / "b")
    train.run_training(cfg.override(seed=1), tmp_path / "c")
    a, b, c = ((tmp_path / d / "metrics.csv").read_bytes() for d in "abc")
    assert a == b and a != c


def test_loss_decreases_epoch_over_epoch(make_config, tmp_path):
    res = train.run_training(make_config(epochs=3), tmp_path / "r")
    losses = [e[1] for e in res.evals]
    assert losses[0] > losses[1] > losses[2]


def test_resume_reproduces_uninterrupted_run(make_config, tmp_path):
    cfg = make_config(drop={"strategy": "random", "gamma": 0.5},
                      optim={"lr_schedule": "cosine", "momentum": 0.9})
    train.run_training(cfg, tmp_path / "full")
    part = train.run_training(cfg, tmp_path / "part", max_steps=17)
    assert not part.completed
    train.run_training(cfg, tmp_path / "part", resume=tmp_path / "part" / "step17.drpt")
    for name in ("metrics.csv", "eval.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_telemetry_gamma_zero_is_identity(make_config, tmp_path):
    cfg = make_config(drop={"strategy": "min_k", "gamma": 0.0}, telemetry=True, epochs=1,
                      precision="f64")
    res = train.run_training(cfg, tmp_path / "r")
    assert res.telemetry
    for s in res.telemetry:
        assert abs(s.alpha_hat - 1) <= 1e-10 and abs(s.beta_hat - 1) <= 1e-10
        assert abs(s.ratio - 1) <= 1e-10
    rows = read_csv(tmp_path / "r" / "telemetry.csv")
    assert tuple(rows[0]) == ("t", "alpha", "beta", "ratio", "bias_norm", "loss")
    bound = json.loads((tmp_path / "r" / "bound.json").read_text())
    assert bound["term2_dropit"] == pytest.approx(bound["term2_sgd"], rel=1e-9)


def test_online_alpha_scaling_runs(make_config, tmp_path):
    cfg = make_config(optim={"alpha_scaling": "online"}, epochs=1, precision="f64")
    res = train.run_training(cfg, tmp_path / "r")
    lrs = [float(r[1]) for r in read_csv(tmp_path / "r" / "metrics.csv")[1:]]
    assert lrs[0] == pytest.approx(0.05)  # alpha_prev starts at 1
    assert all(math.isfinite(v) for v in res.losses)
    assert len(set(lrs)) > 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_saves_last_good(make_config, tmp_path):
    cfg = make_config(optim={"lr": 1e30, "momentum": 0.0})
    with pytest.raises(NonFiniteError):
        train.run_training(cfg, tmp_path / "r")
    assert (tmp_path / "r" / "last_good.drpt").exists()


def test_probe_and_flag_rules():
    assert train.probe_loss([5.0] * 5 + list(range(10)), 15) == pytest.approx(4.5)
    assert train.probe_loss([1.0, 3.0], 100) == 2.0
    rows = [{"gamma": 0.0, "probe_loss": 1.0}, {"gamma": 0.5, "probe_loss": 0.9},
            {"gamma": 0.9, "probe_loss": 1.2}, {"gamma": 0.7, "probe_loss": 1.0}]
    assert [r["flagged"] for r in train.flag_rows(rows)] == [0, 0, 1, 0]


def test_partial_final_batch_is_kept(make_config, tmp_path):
    cfg = make_config(epochs=1, data={"n": 410})  # 328 training rows
    train.run_training(cfg, tmp_path / "r")
    assert len(read_csv(tmp_path / "r" / "metrics.csv")) - 1 == 11


def test_sweep_includes_baseline(make_config, tmp_path):
    cfg = make_config(epochs=1)
    rows = train.run_sweep(cfg, [0.5], probe_steps=5, strategies=["min_k", "random"],
                           out_dir=tmp_path / "s")
    assert [(r["strategy"], r["gamma"]) for r in rows] == [
        ("none", 0.0), ("min_k", 0.5), ("random", 0.5)]
    out = read_csv(tmp_path / "s" / "sweep.csv")
    assert tuple(out[0]) == train.SWEEP_COLUMNS and len(out) == 4
    assert rows[1]["peak_cached_bytes_noindex"] < rows[0]["peak_cached_bytes_noindex"]


def test_mem_report_reconciles_with_ledger(make_config, tmp_path):
    cfg = make_config(drop={"strategy": "min_k", "gamma": 0.9})
    rows, ledger = train.run_mem_report(cfg, tmp_path / "m")
    layers = rows[:-1]
    assert sum(r[6] + r[7] for r in layers) == ledger.peak_bytes
    assert sum(r[6] for r in layers) == ledger.peak_bytes_noindex
    mid = layers[2]
    assert mid[2] == "min_k"
    assert mid[8] == pytest.approx(0.9, abs=1 / (32 * 256))
    assert mid[9] == pytest.approx(0.8, abs=2 / (32 * 256))
    out = read_csv(tmp_path / "m" / "mem.csv")
    assert tuple(out[0]) == train.MEM_COLUMNS and out[-1][0] == "total"
