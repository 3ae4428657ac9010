"""SGD with momentum, cosine/constant schedules, and 1/alpha step scaling.

Update rule, per parameter tensor::

    v <- momentum * v + g + weight_decay * theta
    theta <- theta - (lr / alpha) * schedule(t, T) * v

``alpha`` is 1 when scaling is off, the configured constant for ``fixed``,
and the caller-supplied value for ``online``. The trainer feeds ``online``
with the previous step's alpha estimate: the current step's estimate needs
the exact gradient that the scaling is meant to stand in for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    alpha_scaling: str = "off"  # off | fixed | online
    alpha: float = 1.0          # used when alpha_scaling == "fixed"
    kind: str = "sgd"

    def __post_init__(self):
        if self.kind != "sgd":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.alpha_scaling not in ("off", "fixed", "online"):
            raise ConfigError(f"unknown alpha_scaling {self.alpha_scaling!r}")
        if self.alpha_scaling == "fixed" and not 0 < self.alpha <= 1:
            raise ConfigError("fixed alpha must lie in (0, 1]")

    def to_dict(self):
        return {"kind": self.kind, "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "lr_schedule": self.lr_schedule,
                "alpha_scaling": self.alpha_scaling, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def schedule_factor(config, t, T):
    if not 1 <= t <= T:
        raise ValueError(f"step {t} outside [1, {T}]")
    if config.lr_schedule == "constant":
        return 1.0
    return (1.0 + math.cos(math.pi * (t - 1) / T)) / 2.0


def lr_at(config, t, T):
    return config.lr * schedule_factor(config, t, T)


def effective_alpha(config, alpha_t=None):
    if config.alpha_scaling == "off":
        return 1.0
    if config.alpha_scaling == "fixed":
        return config.alpha
    if alpha_t is None:
        raise ConfigError("online alpha scaling needs alpha_t")
    if not 0 < alpha_t <= 1:
        raise ValueError(f"alpha_t must lie in (0, 1], got {alpha_t}")
    return float(alpha_t)


def step(state, grads, config, T, alpha_t=None):
    """Apply one update in place; ``grads`` is ``[{"weight": g, "bias": g}, ...]``.

    Returns the learning rate actually applied.
    """
    for g in grads:
        for v in g.values():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError("non-finite gradient")
    t = state.t + 1
    rate = (config.lr / effective_alpha(config, alpha_t)) * schedule_factor(config, t, T)
    for p, v, g in zip(state.params, state.velocity, grads):
        for name, theta in p.items():
            dt = theta.dtype.type
            upd = g[name].astype(theta.dtype, copy=False)
            if config.weight_decay:
                upd = upd + dt(config.weight_decay) * theta
            if config.momentum:
                v[name] *= dt(config.momentum)
                v[name] += upd
            else:
                v[name][...] = upd
            theta -= dt(rate) * v[name]
    state.t = t
    return rate


def grads_by_layer(layer_grads):
    """LayerGrads list -> the ``[{"weight":..., "bias":...}, ...]`` form ``step`` wants."""
    return [{} if g is None or g.d_theta is None else {"weight": g.d_theta, "bias": g.d_bias}
            for g in layer_grads]
