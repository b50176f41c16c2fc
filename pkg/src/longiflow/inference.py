"""Imputation, likelihood estimation, and sequence generation.

Everything here runs outside the tape. Per-sequence randomness comes from
a stream keyed by the sequence index, so results do not depend on worker
scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import seeding
from . import tensor as T
from .datasets import SequenceBatch
from .flows import FlowChain, chain_log_prior
from .model import DecoderOutput, LongitudinalModel, PosteriorOutput, obs_loglik
from .tensor import NumericsError, Tensor
from .training import draw_conditioning_index

POLICIES = ("fixed-j", "average-j")


@dataclass
class ImputationResult:
    """Completed frames plus the conditioning-index search trace."""

    completed: np.ndarray
    j_opt: int
    scores: dict
    samples_per_index: int


@dataclass
class NllEstimate:
    value: float
    importance_samples: int
    policy: str


def _broadcast_post(post: PosteriorOutput, n: int) -> PosteriorOutput:
    d = post.mu.data.shape[1]
    return PosteriorOutput(mu=T.broadcast_to(post.mu, (n, d)),
                           logvar=T.broadcast_to(post.logvar, (n, d)))


def _trajectory_scores(model, chain, x_flat, pmask_flat, observed, z, j,
                       want_means: bool = True):
    """Decode a whole trajectory for each draw and score observed frames.

    Returns (scores (draws,), means (draws, frames, data_dim) or None,
    trajectory). One decoder pass serves both outputs.
    """
    draws = z.data.shape[0]
    frames = x_flat.shape[0]
    traj = chain.fill(z, j, frames - 1)
    z_all = T.concat([traj.latents[l] for l in range(frames)], axis=0)
    out = model.decode(z_all)
    means = None
    if want_means:
        means = out.mean().data.reshape(frames, draws, -1)
        means = np.swapaxes(means, 0, 1)
    scores = np.zeros(draws)
    for l in observed:
        sub = DecoderOutput(out.family, out.raw[l * draws:(l + 1) * draws],
                            out.sigma2)
        tiled_x = np.broadcast_to(x_flat[l], sub.raw.data.shape)
        tiled_m = np.broadcast_to(pmask_flat[l], sub.raw.data.shape)
        scores += obs_loglik(tiled_x, sub, tiled_m).data.astype(np.float64)
    return scores, means, traj


def impute_sequence(model: LongitudinalModel, chain: FlowChain,
                    batch: SequenceBatch, i: int, samples_per_index: int,
                    rng: np.random.Generator) -> ImputationResult:
    """Complete one sequence from its best conditioning index.

    Every observed index j is tried: the latent is sampled from q(.|x_j),
    carried across the whole sequence, and scored by the masked
    log-likelihood of all observed frames. The candidate with the highest
    score wins; ties go to the smallest index and earliest draw.
    """
    t = int(batch.lengths[i])
    x_flat = batch.flat()[i, :t].astype(T.active_dtype())
    pm_flat = batch.flat_pixel_mask()[i, :t]
    observed = np.flatnonzero(batch.obs_mask[i, :t])
    d = model.latent_dim
    scores: dict[int, float] = {}
    best = None
    with T.no_grad():
        for j in observed:
            post = model.encode(Tensor(x_flat[j:j + 1]))
            noise = rng.standard_normal((samples_per_index, d))
            z, _ = model.posterior_sample(
                _broadcast_post(post, samples_per_index), noise)
            draw_scores, means, _ = _trajectory_scores(
                model, chain, x_flat, pm_flat, observed, z, int(j))
            s_best = int(np.argmax(draw_scores))
            scores[int(j)] = float(draw_scores[s_best])
            if best is None or draw_scores[s_best] > best[0]:
                best = (float(draw_scores[s_best]), int(j), means[s_best])
    completed = best[2].reshape(t, *batch.frame_shape).astype(np.float32)
    return ImputationResult(completed=completed, j_opt=best[1],
                            scores=scores, samples_per_index=samples_per_index)


def naive_impute_sequence(model: LongitudinalModel, chain: FlowChain,
                          batch: SequenceBatch, i: int,
                          rng: np.random.Generator) -> ImputationResult:
    """Baseline: one random observed index, one posterior draw."""
    t = int(batch.lengths[i])
    x_flat = batch.flat()[i, :t].astype(T.active_dtype())
    pm_flat = batch.flat_pixel_mask()[i, :t]
    observed = np.flatnonzero(batch.obs_mask[i, :t])
    j = draw_conditioning_index(batch.obs_mask[i, :t], rng)
    with T.no_grad():
        post = model.encode(Tensor(x_flat[j:j + 1]))
        noise = rng.standard_normal((1, model.latent_dim))
        z, _ = model.posterior_sample(_broadcast_post(post, 1), noise)
        draw_scores, means, _ = _trajectory_scores(
            model, chain, x_flat, pm_flat, observed, z, j)
    completed = means[0].reshape(t, *batch.frame_shape).astype(np.float32)
    return ImputationResult(completed=completed, j_opt=j,
                            scores={j: float(draw_scores[0])},
                            samples_per_index=1)


def estimate_nll_sequence(model: LongitudinalModel, chain: FlowChain,
                          batch: SequenceBatch, i: int, S: int,
                          policy: str, rng: np.random.Generator) -> NllEstimate:
    """Importance-weighted negative log-likelihood per frame.

    Weights combine the masked observation log-likelihood of every observed
    frame, the flow-chain prior at the conditioning index, and the
    posterior density of the draw; the log-mean-exp is divided by the
    nominal frame count. fixed-j conditions all S draws on one uniformly
    drawn observed index; average-j averages the per-index estimates.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if S < 1:
        raise ValueError("S must be >= 1")
    t = int(batch.lengths[i])
    x_flat = batch.flat()[i, :t].astype(T.active_dtype())
    pm_flat = batch.flat_pixel_mask()[i, :t]
    observed = np.flatnonzero(batch.obs_mask[i, :t])
    if policy == "fixed-j":
        js = [int(observed[rng.integers(observed.size)])]
    else:
        js = [int(j) for j in observed]

    d = model.latent_dim
    vals = []
    with T.no_grad():
        for j in js:
            post = model.encode(Tensor(x_flat[j:j + 1]))
            noise = rng.standard_normal((S, d))
            z, logq = model.posterior_sample(_broadcast_post(post, S), noise)
            loglik, _, traj = _trajectory_scores(
                model, chain, x_flat, pm_flat, observed, z, j,
                want_means=False)
            logp0 = model.prior_log_prob(traj.latents[0])
            logpj = chain_log_prior(logp0, traj, j)
            logw = loglik + logpj.data.astype(np.float64) \
                - logq.data.astype(np.float64)
            if not np.any(np.isfinite(logw)):
                raise NumericsError("all importance weights vanished")
            c = logw.max()
            lse = c + np.log(np.exp(logw - c).mean())
            vals.append(-lse / t)
    return NllEstimate(value=float(np.mean(vals)), importance_samples=S,
                       policy=policy)


def generate_unconditional(model: LongitudinalModel, chain: FlowChain,
                           n: int, n_steps: int, rng: np.random.Generator,
                           frame_shape: tuple) -> np.ndarray:
    """Sample fresh sequences: prior draw at timestep 0, flows forward only."""
    with T.no_grad():
        z0 = model.prior_sample(n, rng)
        traj = chain.propagate(z0, 0, n_steps - 1)
        z_all = T.concat([traj.latents[l] for l in range(n_steps)], axis=0)
        means = model.decode(z_all).mean().data
    # gaussian decoder means are unbounded; frames are pixel data
    frames = np.clip(means, 0.0, 1.0).reshape(n_steps, n, -1).swapaxes(0, 1)
    return frames.reshape(n, n_steps, *frame_shape).astype(np.float32)


def generate_conditional(model: LongitudinalModel, chain: FlowChain,
                         frame: np.ndarray, j: int, n: int, n_steps: int,
                         rng: np.random.Generator,
                         frame_shape: tuple) -> np.ndarray:
    """Sample n futures (and pasts) consistent with one observed frame at j."""
    flat = np.asarray(frame, dtype=T.active_dtype()).reshape(1, -1)
    with T.no_grad():
        post = model.encode(Tensor(flat))
        noise = rng.standard_normal((n, model.latent_dim))
        z, _ = model.posterior_sample(_broadcast_post(post, n), noise)
        traj = chain.fill(z, j, n_steps - 1)
        z_all = T.concat([traj.latents[l] for l in range(n_steps)], axis=0)
        means = model.decode(z_all).mean().data
    frames = np.clip(means, 0.0, 1.0).reshape(n_steps, n, -1).swapaxes(0, 1)
    return frames.reshape(n, n_steps, *frame_shape).astype(np.float32)


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over mask-selected entries."""
    if pred.shape != target.shape or mask.shape != target.shape:
        raise ValueError("masked_mse needs matching shapes")
    total = float(mask.sum())
    if total == 0:
        raise ValueError("empty mask")
    diff = (pred.astype(np.float64) - target.astype(np.float64)) ** 2
    return float((diff * mask).sum() / total)


def _pool_map(fn, count: int, threads: int):
    if threads <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def nll_dataset(model, chain, batch: SequenceBatch, S: int, policy: str,
                seed: int, threads: int = 1) -> np.ndarray:
    """Per-sequence NLL estimates with independent per-sequence streams."""
    def one(i):
        rng = seeding.stream(seed, seeding.EVAL, i)
        return estimate_nll_sequence(model, chain, batch, i, S, policy, rng).value
    return np.array(_pool_map(one, batch.n, threads))


def impute_dataset(model, chain, batch: SequenceBatch, samples_per_index: int,
                   seed: int, threads: int = 1) -> list[ImputationResult]:
    def one(i):
        rng = seeding.stream(seed, seeding.EVAL, i)
        return impute_sequence(model, chain, batch, i, samples_per_index, rng)
    return _pool_map(one, batch.n, threads)


def naive_impute_dataset(model, chain, batch: SequenceBatch, seed: int,
                         threads: int = 1) -> list[ImputationResult]:
    def one(i):
        rng = seeding.stream(seed, seeding.EVAL, i)
        return naive_impute_sequence(model, chain, batch, i, rng)
    return _pool_map(one, batch.n, threads)
