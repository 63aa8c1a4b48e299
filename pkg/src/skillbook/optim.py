"""AdamW with decoupled weight decay over Parameter objects.

Frozen parameters and masked-out elements (``grad_mask == 0``) are never
updated, not even by weight decay; their bytes stay bit-identical across
steps. One optimizer instance is created per task so moment buffers never
leak across task boundaries.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autograd import Parameter


class AdamW:
    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        seen = set()
        for p in self.params:
            if id(p) in seen:
                raise ValueError(f"parameter {p.name!r} passed twice")
            seen.add(id(p))
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.frozen or not p.trainable:
                continue
            g = p.grad
            if p.grad_mask is not None:
                g = g * p.grad_mask
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            # biases, gains and other sub-matrix params follow the usual
            # no-decay convention; modules may also opt a param out explicitly
            if self.weight_decay and p.decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            if p.grad_mask is not None:
                update = update * p.grad_mask
            p.data[...] -= self.lr * update


def clip_grad_norm(params: Iterable["Parameter"], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    params = list(params)
    total = 0.0
    for p in params:
        g = p.grad
        if p.grad_mask is not None:
            g = g * p.grad_mask
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm
