"""Adam optimizer over a ParamSet."""

from __future__ import annotations

import numpy as np

from .autodiff import Array
from .errors import StateError
from .numerics import ParamSet


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}


def adam_step(params: ParamSet, state: AdamState, lr: float) -> None:
    """One in-place Adam update; requires every gradient slot to be filled."""
    for name, p in params.items():
        if p.grad is None:
            raise StateError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
