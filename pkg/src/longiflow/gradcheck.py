"""Central-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NondeterministicFunctionError(RuntimeError):
    """The function under test returned different values on repeat evaluation."""


def gradcheck(fn, params: dict[str, Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    fn maps the parameter dict to a scalar Tensor and must be deterministic;
    it is evaluated twice up front and any bitwise difference is an error.
    Runs only in 64-bit mode. Returns the maximum relative error
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12) over all
    parameter coordinates.
    """
    if T.precision() != "f64":
        raise RuntimeError("gradcheck requires 64-bit mode")
    for p in params.values():
        if p.data.dtype != np.float64:
            raise RuntimeError("gradcheck requires float64 parameters")

    first = fn(params).item()
    second = fn(params).item()
    if first != second:
        raise NondeterministicFunctionError(
            f"fn returned {first!r} then {second!r} at the same point")

    loss = fn(params)
    T.backward(loss, leaves=list(params.values()))
    analytic = {k: p.grad.copy() for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(params).item()
            flat[i] = orig - h
            fm = fn(params).item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        ana = analytic[name].reshape(-1)
        rel = np.abs(ana - num) / (np.abs(ana) + np.abs(num) + 1e-12)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst
