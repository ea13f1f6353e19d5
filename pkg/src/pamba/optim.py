"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DomainError


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
               lr: float = 1e-3, betas: tuple = (0.9, 0.999), weight_decay: float = 0.01,
               eps: float = 1e-8) -> tuple[list, AdamState]:
    """One AdamW update. Returns new parameter arrays and the advanced state."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DomainError("params, grads and optimizer state must have the same length")
    b1, b2 = betas
    t = state.t + 1
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise DomainError("shape mismatch between parameter, gradient and state")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * weight_decay)
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append(p.astype(g.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class AdamW:
    """Stateful wrapper updating :class:`Tensor` parameters in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, tuple(betas), weight_decay, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, grads: Sequence[np.ndarray]) -> None:
        new, self.state = adamw_step([p.data for p in self.params], list(grads), self.state,
                                     self.lr, self.betas, self.weight_decay, self.eps)
        for p, value in zip(self.params, new):
            p.data = value.astype(p.data.dtype, copy=False)
