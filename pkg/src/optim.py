#!/usr/bin/env python3
"""
RCTrans Desk - Optimizer

AdamW (decoupled weight decay) with a one-cycle learning-rate schedule and
global gradient-norm clipping.
"""

import logging
import math
from typing import Dict, List, Sequence

import numpy as np

from .nn import Parameter

logger = logging.getLogger(__name__)


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.1,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Cosine warm-up to ``max_lr`` over ``pct_start`` of training, then cosine annealing."""
    if total_steps <= 1 or max_lr == 0.0:
        return max_lr
    initial = max_lr / div_factor
    final = initial / final_div_factor
    warmup = max(1, int(round(pct_start * total_steps)))
    if step < warmup:
        frac = step / warmup
        return initial + (max_lr - initial) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = min(1.0, (step - warmup) / max(1, total_steps - 1 - warmup))
    return final + (max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 2e-3,
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        if lr == 0.0:
            return
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(i)
            v = self.v.get(i)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[i], self.v[i] = m, v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * update
