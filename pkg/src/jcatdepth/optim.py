"""AdamW with decoupled weight decay, global-norm clipping and a step schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .nn import Parameter
from .tensor import NonFiniteError


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adam with weight decay applied straight to the parameters.

    Parameters are addressed by path so the moments survive a checkpoint
    round trip independent of object identity.
    """

    def __init__(self, named_params: Iterable[tuple[str, Parameter]], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(named_params)
        self.state = OptimState(lr, tuple(betas), eps, weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in {name}")
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            if st.weight_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            if p.grad is None:
                continue
            g = p.grad
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.data.dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def lr_schedule(epoch: int, base_lr: float, milestones: Sequence[int], factor: float) -> float:
    """``base_lr * factor ** (number of milestones <= epoch)``."""
    return base_lr * factor ** sum(1 for m in milestones if m <= epoch)
