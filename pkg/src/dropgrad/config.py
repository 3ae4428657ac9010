"""Run configuration: JSON document, schema-checked before any work starts."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .network import NetworkSpec, build_preset, warn_if_inert
from .optim import OptimConfig
from .sparsity import DropSpec

CONFIG_VERSION = 1
PRECISION_ENV = "DROPGRAD_PRECISION"

_DROP = {
    "type": "object",
    "properties": {
        "strategy": {"enum": ["none", "random", "min_k", "min-k"]},
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "index_on_host": {"type": "boolean"},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["config_version", "network", "data"],
    "properties": {
        "config_version": {"const": CONFIG_VERSION},
        "network": {
            "type": "object",
            "oneOf": [{"required": ["preset"]}, {"required": ["spec_path"]}, {"required": ["spec"]}],
            "properties": {
                "preset": {"enum": ["mlp_small", "cnn_small", "logreg"]},
                "spec_path": {"type": "string"},
                "spec": {"type": "object"},
            },
            "additionalProperties": False,
        },
        "drop": _DROP,
        "layer_overrides": {"type": "object", "patternProperties": {"^[0-9]+$": _DROP},
                            "additionalProperties": False},
        "skip_first_last": {"type": "boolean"},
        "optim": {
            "type": "object",
            "properties": {
                "kind": {"const": "sgd"},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "lr_schedule": {"enum": ["constant", "cosine"]},
                "alpha_scaling": {"enum": ["off", "fixed", "online"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "data": {
            "type": "object",
            "required": ["source"],
            "properties": {
                "source": {"enum": ["synth_blobs", "idx"]},
                "n": {"type": "integer", "minimum": 2},
                "dim": {"type": "integer", "minimum": 1},
                "classes": {"type": "integer", "minimum": 2},
                "separation": {"type": "number", "exclusiveMinimum": 0},
                "nonnegative": {"type": "boolean"},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "limit_train": {"type": "integer", "minimum": 1},
                "limit_test": {"type": "integer", "minimum": 1},
                "standardize": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "precision": {"enum": ["f32", "f64"]},
        "out_dir": {"type": "string"},
        "telemetry": {"type": "boolean"},
        "checkpoint_every": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "drop": {"strategy": "none", "gamma": 0.0, "index_on_host": False},
    "layer_overrides": {},
    "skip_first_last": True,
    "optim": {},
    "epochs": 1,
    "batch_size": 64,
    "seed": 0,
    "out_dir": "runs/default",
    "telemetry": False,
    "checkpoint_every": 0,
}


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d, base_dir=None):
        try:
            jsonschema.validate(d, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {path}: {exc.message}") from None
        merged = copy.deepcopy(DEFAULTS)
        for k, v in d.items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict) and k != "layer_overrides":
                merged[k] = {**merged[k], **v}
            else:
                merged[k] = copy.deepcopy(v)
        if "precision" not in d:
            env = os.environ.get(PRECISION_ENV)
            if env is not None and env not in ("f32", "f64"):
                raise ConfigError(f"{PRECISION_ENV} must be f32 or f64, got {env!r}")
            merged["precision"] = env or "f32"
        cfg = cls(merged, Path(base_dir) if base_dir else Path.cwd())
        cfg.optim()  # surface optimizer errors early
        if cfg.raw["optim"].get("alpha_scaling") == "online":
            cfg.raw["telemetry"] = True
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not JSON ({exc})") from exc
        return cls.from_dict(d, path.parent)

    def override(self, **kw):
        """Apply CLI overrides (``seed``, ``gamma``, ``strategy``, ``out_dir``, ``precision``)."""
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if v is None:
                continue
            if k in ("gamma", "strategy"):
                raw["drop"][k] = v
            else:
                raw[k] = v
        d = {k: v for k, v in raw.items() if k in SCHEMA["properties"]}
        return RunConfig.from_dict(d, self.base_dir)

    def __getitem__(self, key):
        return self.raw[key]

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def drop_spec(self):
        try:
            return DropSpec.from_dict(self.raw["drop"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def optim(self):
        try:
            return OptimConfig.from_dict(self.raw["optim"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def network_spec(self, input_dim=None, classes=None):
        net = self.raw["network"]
        if "preset" in net:
            kw = {}
            if input_dim is not None:
                kw["input_dim"] = input_dim
            if classes is not None:
                kw["classes"] = classes
            spec = build_preset(net["preset"], **kw)
        else:
            doc = net["spec"] if "spec" in net else json.loads(self.resolve(net["spec_path"]).read_text())
            spec = NetworkSpec.from_dict(doc)
        spec = spec.with_drop(self.drop_spec(), self.raw["skip_first_last"])
        warn_if_inert(spec)
        if self.raw["layer_overrides"]:
            from dataclasses import replace
            layers = list(spec.layers)
            for key, d in self.raw["layer_overrides"].items():
                i = int(key)
                if i >= len(layers):
                    raise ConfigError(f"layer override {i} beyond {len(layers)} layers")
                layers[i] = replace(layers[i], drop=DropSpec.from_dict(d))
            spec = replace(spec, layers=tuple(layers))
        return spec

    def canonical_json(self):
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
