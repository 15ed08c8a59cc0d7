"""Adam with bias correction, operating in place on parameter arrays."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor, ShapeError


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One Adam update; mutates param and the moment buffers."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, state {m.shape}/{v.shape} must agree")
    one = param.dtype.type(1)
    b1 = param.dtype.type(beta1)
    b2 = param.dtype.type(beta2)
    m *= b1
    m += (one - b1) * grad
    v *= b2
    v += (one - b2) * grad * grad
    mhat = m / (one - b1 ** t)
    vhat = v / (one - b2 ** t)
    param -= param.dtype.type(lr) * mhat / (np.sqrt(vhat) + param.dtype.type(eps))


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        """Apply one update to every parameter that has a gradient."""
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
