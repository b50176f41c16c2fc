"""Single-index variational training of the flow-chain model.

Each sequence contributes one conditioning timestep j per step, drawn
uniformly from its observed frames. The latent is sampled at j, carried to
every other timestep through the transition flows (inverse toward 0,
forward toward the end), and all observed frames are decoded. The loss is

    total = -recon_avg + log q(z_j | x_j) - log p(z_j)

where recon_avg averages the masked frame log-likelihoods over the nominal
sequence length and log p(z_j) comes from the prior at timestep 0 minus
the forward log-determinants of the transitions up to j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import seeding
from .checkpoint import save_checkpoint
from .datasets import SequenceBatch
from .flows import FlowChain, chain_log_prior
from .model import LOG_2PI, LongitudinalModel, obs_loglik
from .optim import AdamState, LrSchedule, adam_step
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; the last good checkpoint survives."""


def draw_conditioning_index(obs_row: np.ndarray, rng: np.random.Generator) -> int:
    """Uniform draw over the observed indices of one sequence."""
    observed = np.flatnonzero(obs_row)
    if observed.size == 0:
        raise ValueError("sequence has no observed frames")
    return int(observed[rng.integers(observed.size)])


@dataclass
class LossBreakdown:
    """Per-sequence terms; total = -recon_avg + log_q - log_prior."""

    j: int
    recon_avg: float
    log_q: float
    log_prior: float

    @property
    def total(self) -> float:
        return -self.recon_avg + self.log_q - self.log_prior


@dataclass
class BatchLoss:
    loss: Tensor
    recon_avg: float
    log_q: float
    log_prior: float
    per_sequence: list = field(default_factory=list)


def sequence_loss(batch: SequenceBatch, model: LongitudinalModel,
                  chain: FlowChain, rng: np.random.Generator,
                  recon_divisor: str = "nominal") -> BatchLoss:
    """Alg-style single-index loss over a batch of sequences.

    Draw order per call is fixed: one conditioning index per sequence in
    batch order, then one (n, d) noise block. recon_divisor selects the
    averaging constant: 'nominal' divides by the frame count t_i + 1,
    'observed' by the number of observed frames.
    """
    if recon_divisor not in ("nominal", "observed"):
        raise ValueError(f"unknown recon divisor {recon_divisor!r}")
    n = batch.n
    dtype = T.active_dtype()
    flat = batch.flat()
    pmask = batch.flat_pixel_mask()
    obs = batch.obs_mask
    lengths = batch.lengths

    js = np.array([
        draw_conditioning_index(obs[i, :lengths[i]], rng) for i in range(n)])
    noise = rng.standard_normal((n, model.latent_dim))

    x_j = flat[np.arange(n), js].astype(dtype)
    post = model.encode(Tensor(x_j))
    z, logq = model.posterior_sample(post, noise)

    if recon_divisor == "nominal":
        divisors = lengths.astype(np.float64)
    else:
        divisors = obs.sum(axis=1).astype(np.float64)

    z_rows: list[Tensor] = []
    x_rows: list[np.ndarray] = []
    m_rows: list[np.ndarray] = []
    w_rows: list[np.ndarray] = []
    seq_of_row: list[np.ndarray] = []
    logprior_parts: list[Tensor] = []
    logprior_sel: list[np.ndarray] = []

    for jv in sorted(set(js.tolist())):
        sel = np.flatnonzero(js == jv)
        zg = T.gather(z, sel)
        t_last = int(lengths[sel].max()) - 1
        traj = chain.fill(zg, jv, t_last)
        logp0 = model.prior_log_prob(traj.latents[0])
        logprior_parts.append(chain_log_prior(logp0, traj, jv))
        logprior_sel.append(sel)
        for l in range(t_last + 1):
            live = np.flatnonzero((obs[sel, l] == 1) & (l < lengths[sel]))
            if live.size == 0:
                continue
            rows = sel[live]
            z_rows.append(T.gather(traj.latents[l], live))
            x_rows.append(flat[rows, l])
            m_rows.append(pmask[rows, l])
            w_rows.append(1.0 / divisors[rows])
            seq_of_row.append(rows)

    z_all = T.concat(z_rows, axis=0)
    x_all = np.concatenate(x_rows, axis=0).astype(dtype)
    m_all = np.concatenate(m_rows, axis=0)
    w_all = np.concatenate(w_rows, axis=0)
    rows_all = np.concatenate(seq_of_row, axis=0)

    decoded = model.decode(z_all)
    loglik = obs_loglik(x_all, decoded, m_all)

    recon_mean = T.tsum(loglik * Tensor(w_all.astype(dtype))) * (1.0 / n)
    logprior = T.concat(logprior_parts, axis=0)
    loss = -recon_mean + T.tmean(logq) - T.tmean(logprior)

    recon_seq = np.zeros(n)
    np.add.at(recon_seq, rows_all, loglik.data * w_all)
    logprior_seq = np.zeros(n)
    logprior_seq[np.concatenate(logprior_sel)] = logprior.data
    per_sequence = [
        LossBreakdown(j=int(js[i]), recon_avg=float(recon_seq[i]),
                      log_q=float(logq.data[i]), log_prior=float(logprior_seq[i]))
        for i in range(n)]
    return BatchLoss(loss=loss, recon_avg=float(recon_seq.mean()),
                     log_q=float(logq.data.mean()),
                     log_prior=float(logprior_seq.mean()),
                     per_sequence=per_sequence)


def warmup_loss(batch: SequenceBatch, model: LongitudinalModel,
                rng: np.random.Generator) -> BatchLoss:
    """Per-frame VAE objective over all observed frames.

    Every observed frame gets its own latent with a standard-normal prior;
    no transition or posterior flows touch the tape, so their parameters
    receive exactly zero gradient during warm-up.
    """
    dtype = T.active_dtype()
    flat = batch.flat()
    pmask = batch.flat_pixel_mask()
    live = [(i, l) for i in range(batch.n)
            for l in range(int(batch.lengths[i]))
            if batch.obs_mask[i, l] == 1]
    idx = np.array([i for i, _ in live])
    steps = np.array([l for _, l in live])
    x = flat[idx, steps].astype(dtype)
    masks = pmask[idx, steps]

    post = model.encode(Tensor(x))
    eps = rng.standard_normal(x.shape[0] * model.latent_dim) \
        .reshape(x.shape[0], model.latent_dim).astype(dtype)
    z = post.mu + T.texp(post.logvar * 0.5) * Tensor(eps)
    d = model.latent_dim
    logq = T.tsum(post.logvar, axis=1) * -0.5 \
        + Tensor(-0.5 * (eps * eps).sum(axis=1) - 0.5 * d * LOG_2PI)
    logp = T.tsum(z * z + LOG_2PI, axis=1) * -0.5
    loglik = obs_loglik(x, model.decode(z), masks)
    loss = T.tmean(-loglik + logq - logp)
    per_frame = [
        LossBreakdown(j=int(steps[k]), recon_avg=float(loglik.data[k]),
                      log_q=float(logq.data[k]), log_prior=float(logp.data[k]))
        for k in range(len(live))]
    return BatchLoss(loss=loss, recon_avg=float(loglik.data.mean()),
                     log_q=float(logq.data.mean()),
                     log_prior=float(logp.data.mean()),
                     per_sequence=per_frame)


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    lr_milestones: tuple = ((50, 0.5), (75, 0.5), (90, 0.5))
    seed: int = 0
    recon_divisor: str = "nominal"


@dataclass
class TrainResult:
    metrics: list
    best_path: Path
    final_path: Path
    best_epoch: int
    best_val: float


METRICS_HEADER = "epoch,split,loss,recon,logq,logprior,lr"


def all_params(model: LongitudinalModel, chain: FlowChain) -> dict[str, Tensor]:
    out = dict(model.params())
    for k, v in chain.params().items():
        out[f"flow.{k}"] = v
    return out


def train(model: LongitudinalModel, chain: FlowChain, splits: dict,
          cfg: TrainConfig, out_dir, config_hash: str = "") -> TrainResult:
    """Warm-up then flow training with Adam; tracks the best validation loss.

    Writes best.lfc, final.lfc and metrics.csv into out_dir. Validation
    uses one fixed random stream so its numbers are comparable across
    epochs. Raises TrainingDiverged on a non-finite loss or gradient,
    leaving the newest good checkpoints in place.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_batch: SequenceBatch = splits["train"]
    val_batch: SequenceBatch = splits.get("val")
    params = all_params(model, chain)
    leaves = list(params.values())
    names = list(params.keys())
    state = AdamState(params, lr=cfg.lr)
    schedule = LrSchedule(cfg.lr, list(cfg.lr_milestones))

    metrics: list[tuple] = []
    best_val = np.inf
    best_epoch = -1
    best_path = out_dir / "best.lfc"
    final_path = out_dir / "final.lfc"

    def evaluate_val(epoch: int) -> float:
        if val_batch is None:
            return np.nan
        rng = seeding.stream(cfg.seed, seeding.VALIDATION, 0)
        with T.no_grad():
            bl = sequence_loss(val_batch, model, chain, rng,
                               recon_divisor=cfg.recon_divisor)
        metrics.append((epoch, "val", bl.loss.item(), bl.recon_avg,
                        bl.log_q, bl.log_prior, state.lr))
        return bl.loss.item()

    if cfg.epochs == 0:
        save_checkpoint(best_path, params, state, 0, cfg.seed, config_hash)
        save_checkpoint(final_path, params, state, 0, cfg.seed, config_hash)
        _write_metrics(out_dir / "metrics.csv", metrics)
        return TrainResult(metrics, best_path, final_path, 0, np.nan)

    n = train_batch.n
    for epoch in range(cfg.epochs):
        state.lr = schedule.lr_at(epoch)
        order = seeding.stream(cfg.seed, seeding.SHUFFLE, epoch).permutation(n)
        warm = epoch < cfg.warmup_epochs
        sums = np.zeros(4)
        count = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            sub = train_batch.subset(sel)
            rng = seeding.stream(cfg.seed, seeding.LOSS_DRAWS,
                                 (epoch << 16) + b)
            if warm:
                bl = warmup_loss(sub, model, rng)
            else:
                bl = sequence_loss(sub, model, chain, rng,
                                   recon_divisor=cfg.recon_divisor)
            loss_val = bl.loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; best checkpoint is "
                    f"from epoch {best_epoch}")
            T.backward(bl.loss, leaves=leaves)
            grads = {name: p.grad for name, p in zip(names, leaves)}
            adam_step(params, grads, state)
            sums += np.array([loss_val, bl.recon_avg, bl.log_q, bl.log_prior]) \
                * len(sel)
            count += len(sel)
        avg = sums / count
        metrics.append((epoch, "train", *avg.tolist(), state.lr))
        val = evaluate_val(epoch)
        if val_batch is not None and val < best_val:
            best_val = val
            best_epoch = epoch
            save_checkpoint(best_path, params, state, epoch, cfg.seed,
                            config_hash)
    save_checkpoint(final_path, params, state, cfg.epochs, cfg.seed,
                    config_hash)
    if val_batch is None:
        save_checkpoint(best_path, params, state, cfg.epochs, cfg.seed,
                        config_hash)
        best_epoch = cfg.epochs
    _write_metrics(out_dir / "metrics.csv", metrics)
    return TrainResult(metrics, best_path, final_path, best_epoch, best_val)


def _write_metrics(path: Path, rows: list[tuple]) -> None:
    lines = [METRICS_HEADER]
    for epoch, split, loss, recon, logq, logprior, lr in rows:
        lines.append(f"{epoch},{split},{loss:.10g},{recon:.10g},"
                     f"{logq:.10g},{logprior:.10g},{lr:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")
