"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import NumericsError, Tensor


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One Adam update in place. Parameters without a gradient entry are skipped."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} of shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return state


class LrSchedule:
    """Multiplicative decay steps: factors applied when their epoch is reached."""

    def __init__(self, base_lr: float, milestones: list[tuple[int, float]]):
        self.base_lr = base_lr
        self.milestones = sorted(milestones)

    def lr_at(self, epoch: int) -> float:
        lr = self.base_lr
        for at, factor in self.milestones:
            if epoch >= at:
                lr *= factor
        return lr
