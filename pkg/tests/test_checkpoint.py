import struct

import numpy as np
import pytest

from dropgrad import checkpoint
from dropgrad.errors import DataFormatError
from dropgrad.network import build_preset, init_state
from dropgrad.sparsity import DropSpec


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_round_trip(tmp_path, precision):
    spec = build_preset("cnn_small", drop=DropSpec("random", 0.4))
    state = init_state(spec, 5, precision)
    state.t, state.epoch, state.batch_in_epoch = 17, 1, 3
    state.loss_history = [2.3, 2.1]
    state.alpha_prev = 0.8125
    state.rng.uniform(9)
    state.velocity[0]["weight"] += 0.5
    checkpoint.save(tmp_path / "c.drpt", state, spec, {"note": "x"})
    back, spec2, extra = checkpoint.load(tmp_path / "c.drpt")
    assert spec2 == spec and extra == {"note": "x"}
    assert (back.t, back.epoch, back.batch_in_epoch) == (17, 1, 3)
    assert back.loss_history == state.loss_history and back.alpha_prev == 0.8125
    assert back.rng.getstate() == state.rng.getstate()
    for a, b in zip(state.params + state.velocity, back.params + back.velocity):
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k])


def test_layout_header(tmp_path):
    spec = build_preset("mlp_small")
    checkpoint.save(tmp_path / "c.drpt", init_state(spec, 0, "f32"), spec)
    raw = (tmp_path / "c.drpt").read_bytes()
    assert raw[:4] == b"DRPT"
    version, hlen = struct.unpack("<IQ", raw[4:16])
    assert version == 1
    n_scalars = 2 * 235_146  # params plus momentum slots
    assert len(raw) == 16 + hlen + 4 * n_scalars


def test_corrupt_files(tmp_path):
    spec = build_preset("mlp_small")
    p = tmp_path / "c.drpt"
    checkpoint.save(p, init_state(spec, 0, "f32"), spec)
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-10])
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    for name in ("magic", "short", "ver", "missing"):
        with pytest.raises(DataFormatError):
            checkpoint.load(tmp_path / name)
