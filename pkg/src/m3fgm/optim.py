"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """One Adam update of ``params`` in place, then zero their gradients."""
    if len(params) != len(state.m):
        raise ValueError(f"adam_step: state tracks {len(state.m)} parameters, got {len(params)}")
    for p, m in zip(params, state.m):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter of shape {p.shape} has no gradient")
        if m.shape != p.data.shape:
            raise ValueError(f"adam_step: moment shape {m.shape} does not match parameter {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr:
            p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)
