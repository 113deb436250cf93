"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    passed: bool

    def __bool__(self) -> bool:
        return self.passed


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, max_entries: int | None = None, seed: int = 0,
               abs_floor: float = 1e-6, order: int = 2) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Entries are perturbed in place. ``max_entries`` limits the number of
    perturbed coordinates per input (a seeded random subset); the relative
    error uses ``max(|analytic|, |numeric|, abs_floor)`` as denominator so
    entries whose true gradient is ~0 do not blow up the ratio.

    ``order=4`` uses the five-point central stencil, whose O(eps^4) truncation
    error allows a larger ``eps`` and hence less round-off in deep graphs.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    rng = np.random.default_rng(seed)

    with default_dtype(np.float64):
        for t in inputs:
            t.grad = None
            t.requires_grad = True
        out = f(*inputs)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        worst_rel = 0.0
        worst_abs = 0.0
        count = 0
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(idx.size)
            for n, i in enumerate(idx):
                orig = flat[i]

                def at(h):
                    flat[i] = orig + h
                    return f(*inputs).item()

                d1 = at(eps) - at(-eps)
                if order == 2:
                    num[n] = d1 / (2 * eps)
                else:
                    num[n] = (8 * d1 - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                flat[i] = orig
            a = ga.reshape(-1)[idx]
            if idx.size:
                worst_rel = max(worst_rel, float(_rel_err(a, num, abs_floor).max()))
                worst_abs = max(worst_abs, float(np.abs(a - num).max()))
            count += idx.size
    return GradCheckReport(worst_rel, worst_abs, count, worst_rel < tol)
