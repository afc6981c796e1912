"""Adam optimizer over a ParameterSet."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ParameterSet
from .errors import GradientError


@dataclass
class AdamState:
    """First/second moment estimates, one pair of arrays per parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        m = {name: np.zeros_like(t.data) for name, t in params.items()}
        v = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(m=m, v=v, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParameterSet, state: AdamState, lr: float) -> None:
    """One Adam update with bias correction; zeroes gradients afterward."""
    for name, p in params.items():
        if p.grad is None:
            raise GradientError(f"parameter '{name}' has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()
