"""Gated inverse-autoregressive flow blocks and the per-timestep chain.

A chain of T transitions links T+1 latent states: z_l = f_l(z_{l-1}).
Each transition composes a few IAF blocks whose variable order alternates
between identity and reversal so that no coordinate stays first forever.
Forward evaluation is one network pass; inversion solves coordinates
sequentially and therefore costs d passes, which the chain counts for
instrumentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from . import tensor as T
from .made import MadeNet
from .tensor import Tensor

GATE_FLOOR = 1e-12


class SingularFlowError(RuntimeError):
    """A gate collapsed to zero, so the block cannot be inverted."""


class _InversionCounter:
    """Counts coordinate-sequential block inversions, test instrumentation."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


INVERSIONS = _InversionCounter()


class IafBlock:
    """One gated autoregressive map z' = g(z)*z + (1-g(z))*m(z).

    g = sigmoid(s + s0) with m, s autoregressive in the block's variable
    order, so the Jacobian is triangular and log|det| = sum(log g).
    s0 starts at 2.0, which puts every gate near 0.9 and the whole map
    near the identity.
    """

    def __init__(self, d: int, n_hidden: int, hidden_units: int,
                 rng: np.random.Generator, reverse: bool = False,
                 s0_init: float = 2.0):
        self.d = d
        self.reverse = reverse
        self.net = MadeNet(d, n_hidden, hidden_units, rng)
        self.s0 = T.parameter(np.full(d, s0_init))

    def params(self) -> dict[str, Tensor]:
        out = {f"made.{k}": v for k, v in self.net.params().items()}
        out["s0"] = self.s0
        return out

    def _perm(self, z: Tensor) -> Tensor:
        return T.flip(z, axis=1) if self.reverse else z

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (z', logdet) with logdet shaped (batch,)."""
        u = self._perm(z)
        m, s = self.net(u)
        g = T.sigmoid(s + self.s0)
        u2 = g * u + (1.0 - g) * m
        logdet = T.tsum(T.tlog(g), axis=1)
        return self._perm(u2), logdet

    def inverse(self, z2: Tensor) -> tuple[Tensor, Tensor]:
        """Solve z from z' coordinate by coordinate.

        Returns (z, logdet) where logdet is the FORWARD log-determinant
        of this block evaluated at the recovered input. Gradients flow
        through the solve. Gates below GATE_FLOOR abort the inversion.
        """
        INVERSIONS.count += 1
        u2 = self._perm(z2)
        n = u2.data.shape[0]
        dtype = u2.data.dtype
        cols: list[Tensor] = []
        log_parts: list[Tensor] = []
        for t in range(self.d):
            if t == 0:
                x_in = Tensor(np.zeros((n, self.d), dtype=dtype))
            else:
                pad = Tensor(np.zeros((n, self.d - t), dtype=dtype))
                x_in = T.concat(cols + [pad], axis=1)
            m, s = self.net(x_in)
            g_t = T.sigmoid(s[:, t:t + 1] + self.s0[t:t + 1])
            if np.any(g_t.data < GATE_FLOOR):
                raise SingularFlowError(
                    f"gate underflow at coordinate {t}: min {g_t.data.min():.3e}")
            m_t = m[:, t:t + 1]
            u_t = (u2[:, t:t + 1] - (1.0 - g_t) * m_t) / g_t
            cols.append(u_t)
            log_parts.append(T.tlog(g_t))
        u = T.concat(cols, axis=1) if self.d > 1 else cols[0]
        logdet = T.tsum(T.concat(log_parts, axis=1), axis=1)
        return self._perm(u), logdet


@dataclass
class Trajectory:
    """Latents filled in by propagation plus the forward log-dets used.

    latents maps timestep index to a (batch, d) Tensor; logdets maps
    transition index l to the forward log-determinant of f_l along this
    trajectory, shaped (batch,).
    """

    origin: int
    latents: dict[int, Tensor] = field(default_factory=dict)
    logdets: dict[int, Tensor] = field(default_factory=dict)


class FlowChain:
    """T transitions, each a stack of IAF blocks with alternating order."""

    def __init__(self, n_transitions: int, d: int, blocks_per_transition: int = 2,
                 made_layers: int = 3, made_hidden: int = 128, seed: int = 0):
        if n_transitions < 0:
            raise ValueError("n_transitions must be >= 0")
        self.d = d
        self.n_transitions = n_transitions
        self.transitions: list[list[IafBlock]] = []
        for l in range(1, n_transitions + 1):
            blocks = []
            for b in range(blocks_per_transition):
                rng = seeding.stream(seed, seeding.INIT,
                                     (l - 1) * blocks_per_transition + b)
                blocks.append(IafBlock(d, made_layers, made_hidden, rng,
                                       reverse=(b % 2 == 1)))
            self.transitions.append(blocks)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for l, blocks in enumerate(self.transitions, start=1):
            for b, block in enumerate(blocks):
                for k, v in block.params().items():
                    out[f"t{l}.block{b}.{k}"] = v
        return out

    def transition_forward(self, l: int, z: Tensor) -> tuple[Tensor, Tensor]:
        self._check_index(l)
        logdet = None
        for block in self.transitions[l - 1]:
            z, ld = block.forward(z)
            logdet = ld if logdet is None else logdet + ld
        return z, logdet

    def transition_inverse(self, l: int, z: Tensor) -> tuple[Tensor, Tensor]:
        self._check_index(l)
        logdet = None
        for block in reversed(self.transitions[l - 1]):
            z, ld = block.inverse(z)
            logdet = ld if logdet is None else logdet + ld
        return z, logdet

    def _check_index(self, l: int) -> None:
        if not 1 <= l <= self.n_transitions:
            raise IndexError(
                f"transition {l} outside 1..{self.n_transitions}")

    def propagate(self, z: Tensor, j: int, k: int) -> Trajectory:
        """Fill latents from timestep j out to timestep k (either direction).

        Every transition crossed records its forward log-det, including
        inverse steps, where the determinant comes out of the solve for free.
        """
        if not 0 <= j <= self.n_transitions or not 0 <= k <= self.n_transitions:
            raise IndexError(
                f"timesteps ({j}, {k}) outside 0..{self.n_transitions}")
        traj = Trajectory(origin=j)
        traj.latents[j] = z
        cur = z
        if k >= j:
            for l in range(j + 1, k + 1):
                cur, ld = self.transition_forward(l, cur)
                traj.latents[l] = cur
                traj.logdets[l] = ld
        else:
            for l in range(j, k, -1):
                cur, ld = self.transition_inverse(l, cur)
                traj.latents[l - 1] = cur
                traj.logdets[l] = ld
        return traj

    def fill(self, z: Tensor, j: int, t_last: int) -> Trajectory:
        """Full trajectory 0..t_last conditioned at j: inverse to 0, forward to t_last."""
        past = self.propagate(z, j, 0)
        future = self.propagate(z, j, t_last)
        past.latents.update(future.latents)
        past.logdets.update(future.logdets)
        return past


def chain_log_prior(log_p_z0: Tensor, traj: Trajectory, j: int) -> Tensor:
    """log p(z_j) = log p(z_0) - sum of forward log-dets of transitions 1..j."""
    out = log_p_z0
    for l in range(1, j + 1):
        if l not in traj.logdets:
            raise KeyError(f"trajectory is missing the log-det of transition {l}")
        out = out - traj.logdets[l]
    return out
