"""Decoupled-weight-decay Adam over flat parameter dictionaries.

Update order is sorted by parameter name so accumulation is
reproducible regardless of dictionary construction order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """One in-place update; returns (params, state) for chaining.

    p <- p - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p), with the
    decay term using the pre-update p.
    """
    if set(params) != set(grads):
        raise ConfigError("gradient keys do not match parameters")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ConfigError(f"shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay != 0.0:
            step = step + weight_decay * p
        p -= lr * step
    return params, state
