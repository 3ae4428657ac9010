import json

import pytest

from dropgrad.config import RunConfig


def blob_config(**over):
    """A fast mlp_small run on synthetic blobs."""
    d = {
        "config_version": 1,
        "network": {"preset": "mlp_small"},
        "drop": {"strategy": "min_k", "gamma": 0.5},
        "optim": {"lr": 0.05, "momentum": 0.9},
        "data": {"source": "synth_blobs", "n": 400, "dim": 784, "classes": 10, "separation": 1.0},
        "epochs": 2,
        "batch_size": 32,
        "seed": 0,
        "precision": "f32",
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict) and k != "network":
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return d


@pytest.fixture
def make_config(tmp_path):
    def make(**over):
        d = blob_config(**over)
        d.setdefault("out_dir", str(tmp_path / "run"))
        return RunConfig.from_dict(d, tmp_path)
    return make


@pytest.fixture
def config_file(tmp_path):
    def write(name="cfg.json", **over):
        path = tmp_path / name
        d = blob_config(**over)
        d.setdefault("out_dir", str(tmp_path / "out"))
        path.write_text(json.dumps(d))
        return path
    return write


# -- acceptance summary ---------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call" and call.excinfo is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "skipped": False, "details": []})
    if call.excinfo is not None:
        if call.excinfo.errisinstance(pytest.skip.Exception):
            entry["skipped"] = True
        else:
            entry["ok"] = False
    if call.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "FAIL" if not e["ok"] else "SKIP" if e["skipped"] else "PASS"
        line = f"[{status}] {n:>2}. {e['title']}"
        if e["details"]:
            line += " | " + "; ".join(e["details"])
        terminalreporter.write_line(line)
