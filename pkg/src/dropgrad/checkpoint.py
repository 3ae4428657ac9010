"""Binary checkpoints.

Layout::

    b"DRPT"                 magic
    uint32 LE               format version (1)
    uint64 LE               header length H
    H bytes                 UTF-8 JSON header
    arrays                  little-endian scalars, in header["arrays"] order

The header carries the NetworkSpec, step/epoch counters, the drop-RNG state,
the previous alpha estimate and the loss history, plus one
``{"name", "shape"}`` entry per stored array. Arrays are every parameter
tensor followed by every momentum slot.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .network import NetworkSpec, TrainState
from .tensor import Rng

MAGIC = b"DRPT"
VERSION = 1


def _arrays(state):
    for kind, groups in (("param", state.params), ("velocity", state.velocity)):
        for i, group in enumerate(groups):
            for name in sorted(group):
                yield f"{kind}.{i}.{name}", group[name]


def save(path, state, spec, extra=None):
    dtype = state.dtype
    entries, blobs = [], []
    for name, arr in _arrays(state):
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())
    header = {
        "network_spec": spec.to_dict(),
        "dtype": "f32" if dtype == np.float32 else "f64",
        "t": state.t,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "rng": state.rng.getstate(),
        "alpha_prev": state.alpha_prev,
        "loss_history": state.loss_history,
        "arrays": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load(path):
    """Returns ``(state, spec, extra)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header") from exc
    dtype = np.dtype(np.float32 if header["dtype"] == "f32" else np.float64)
    le = dtype.newbyteorder("<")
    pos = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"]))
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(raw):
            raise DataFormatError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=le, count=count, offset=pos) \
            .astype(dtype).reshape(e["shape"])
        pos += nbytes
    spec = NetworkSpec.from_dict(header["network_spec"])
    n = len(spec.layers)
    params = [{} for _ in range(n)]
    velocity = [{} for _ in range(n)]
    for name, arr in arrays.items():
        kind, i, pname = name.split(".")
        (params if kind == "param" else velocity)[int(i)][pname] = arr
    state = TrainState(params, velocity, Rng.fromstate(header["rng"]), t=header["t"],
                       epoch=header["epoch"], batch_in_epoch=header["batch_in_epoch"],
                       loss_history=list(header["loss_history"]),
                       alpha_prev=header["alpha_prev"])
    return state, spec, header.get("extra", {})
