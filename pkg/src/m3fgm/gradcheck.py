"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(inputs)`` against central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        backward(f(inputs))
        analytic = [t.grad.copy() for t in inputs]
        errs = []
        with no_grad():
            for t, a in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                num = np.empty(flat.size)
                for k in range(flat.size):
                    orig = flat[k]
                    flat[k] = orig + h
                    fp = f(inputs).item()
                    flat[k] = orig - h
                    fm = f(inputs).item()
                    flat[k] = orig
                    num[k] = (fp - fm) / (2.0 * h)
                a = a.reshape(-1)
                denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
                errs.append(float(np.max(np.abs(a - num) / denom)) if a.size else 0.0)
    finally:
        for t, (flag, g) in zip(inputs, saved):
            t.requires_grad = flag
            t.grad = g
    return GradCheckReport(max(errs, default=0.0), tol, errs)
