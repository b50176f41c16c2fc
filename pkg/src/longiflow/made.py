"""Masked autoregressive network with shift and gate heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _degrees(d: int, hidden_units: int, n_hidden: int):
    """Input degrees 1..d; hidden degrees cycle 1..d-1 (all 1 when d == 1)."""
    inp = np.arange(1, d + 1)
    top = max(1, d - 1)
    hid = [1 + (np.arange(hidden_units) % top) for _ in range(n_hidden)]
    out = np.tile(np.arange(1, d + 1), 2)
    return inp, hid, out


def build_masks(d: int, hidden_units: int, n_hidden: int):
    """Connectivity masks, one per weight matrix, shaped (fan_in, fan_out).

    Hidden units pass degrees non-strictly; the output layer is strict, so
    output coordinate t (either head) never sees inputs t' >= t.
    """
    inp, hid, out = _degrees(d, hidden_units, n_hidden)
    masks = []
    prev = inp
    for h in hid:
        masks.append((h[None, :] >= prev[:, None]).astype(np.float64))
        prev = h
    masks.append((out[None, :] > prev[:, None]).astype(np.float64))
    return masks


class MadeNet:
    """MADE with n_hidden masked tanh layers and a masked linear output layer.

    The output layer holds both heads side by side: columns 0..d-1 are the
    shift m, columns d..2d-1 the gate pre-activation s.
    """

    def __init__(self, d: int, n_hidden: int, hidden_units: int,
                 rng: np.random.Generator):
        if d < 1:
            raise ValueError("d must be >= 1")
        if n_hidden < 1:
            raise ValueError("need at least one hidden layer")
        self.d = d
        self.n_hidden = n_hidden
        self.hidden_units = hidden_units
        self.masks = build_masks(d, hidden_units, n_hidden)

        self.weights = []
        self.biases = []
        sizes = [d] + [hidden_units] * n_hidden + [2 * d]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = 1.0 / np.sqrt(fan_in)
            if i == n_hidden:
                scale *= 0.01  # small output head keeps the flow near identity at init
            w = rng.standard_normal((fan_in, fan_out)) * scale
            self.weights.append(T.parameter(w))
            self.biases.append(T.parameter(np.zeros(fan_out)))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = x
        for i in range(self.n_hidden):
            mask = Tensor(self.masks[i].astype(self.weights[i].data.dtype))
            h = T.ttanh(h @ (self.weights[i] * mask) + self.biases[i])
        mask = Tensor(self.masks[-1].astype(self.weights[-1].data.dtype))
        out = h @ (self.weights[-1] * mask) + self.biases[-1]
        return out[:, : self.d], out[:, self.d:]
