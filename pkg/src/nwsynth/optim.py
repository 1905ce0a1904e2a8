"""Optimisation helpers and the finite-difference gradient check."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as G


class NonFiniteGradient(FloatingPointError):
    pass


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


class Adam:
    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros(p.shape, dtype=np.float64) for p in self.params}
        self.v = {p.name: np.zeros(p.shape, dtype=np.float64) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {p.name}; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad.astype(np.float64)
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        return [f"{k}\t{e:.3e}\t{'ok' if e < self.tolerance else 'FAIL'}" for k, e in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Block-wise max|a-n| / max(max|a|, max|n|, floor).

    Errors are measured against the block's gradient scale, so entries far
    below it do not amplify the O(step^2) truncation error of the oracle.
    """
    if not analytic.size:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def grad_check(loss_fn, params, tolerance: float = 1e-4, step: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backprop gradients with central differences in float64.

    ``loss_fn()`` must rebuild the graph from the current parameter values and
    return a scalar Tensor. Params are promoted to float64 for the check and
    restored afterwards. ``max_entries`` samples that many coordinates per block.
    """
    params = list(params)
    saved = [(p.data, p.grad) for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        G.backward(loss_fn(), params)
        report = GradCheckReport(tolerance)
        for p in params:
            analytic = p.grad.astype(np.float64).reshape(-1).copy()
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            numeric = np.empty(coords.size)
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                up = float(loss_fn().data)
                flat[i] = orig - step
                down = float(loss_fn().data)
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
            report.errors[p.name] = relative_error(analytic[coords], numeric)
        return report
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data, p.grad = data, grad
