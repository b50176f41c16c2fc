"""Encoder, decoder, priors and the assembled latent-variable model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from . import tensor as T
from .flows import IafBlock
from .tensor import NumericsError, Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
LOG_2PI = float(np.log(2.0 * np.pi))


class DenseNet:
    """Fully connected tanh network; no activation on the output layer."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(T.parameter(w))
            self.biases.append(T.parameter(np.zeros(fan_out)))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = T.ttanh(h)
        return h


@dataclass
class PosteriorOutput:
    """Diagonal Gaussian stats of q(z|x) before any posterior flow."""

    mu: Tensor
    logvar: Tensor


class Encoder:
    """Maps flattened frames to per-frame posterior statistics."""

    def __init__(self, data_dim: int, hidden: tuple[int, ...], latent_dim: int,
                 rng: np.random.Generator):
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.net = DenseNet([data_dim, *hidden, 2 * latent_dim], rng)

    def params(self) -> dict[str, Tensor]:
        return self.net.params()

    def __call__(self, x: Tensor) -> PosteriorOutput:
        if not np.all(np.isfinite(x.data)):
            raise NumericsError("non-finite encoder input")
        out = self.net(x)
        out.check_finite("encoder activations")
        d = self.latent_dim
        mu = out[:, :d]
        logvar = T.clamp(out[:, d:], LOGVAR_MIN, LOGVAR_MAX)
        return PosteriorOutput(mu=mu, logvar=logvar)


@dataclass
class DecoderOutput:
    """Per-pixel observation distribution parameters.

    For the bernoulli family raw holds logits; for gaussian it holds means
    with fixed variance sigma2.
    """

    family: str
    raw: Tensor
    sigma2: float = 1.0

    def mean(self) -> Tensor:
        if self.family == "bernoulli":
            return T.sigmoid(self.raw)
        return self.raw


class Decoder:
    """Maps latents to observation distribution parameters."""

    def __init__(self, latent_dim: int, hidden: tuple[int, ...], data_dim: int,
                 rng: np.random.Generator, family: str = "bernoulli",
                 sigma2: float = 0.05):
        if family not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown observation family {family!r}")
        self.family = family
        self.sigma2 = float(sigma2)
        self.net = DenseNet([latent_dim, *hidden, data_dim], rng)

    def params(self) -> dict[str, Tensor]:
        return self.net.params()

    def __call__(self, z: Tensor) -> DecoderOutput:
        if not np.all(np.isfinite(z.data)):
            raise NumericsError("non-finite decoder input")
        raw = self.net(z)
        raw.check_finite("decoder activations")
        return DecoderOutput(family=self.family, raw=raw, sigma2=self.sigma2)


def obs_loglik(x, out: DecoderOutput, pixel_mask=None) -> Tensor:
    """Per-row log-likelihood of flattened frames, masked pixels excluded.

    Masked pixels contribute exactly zero value and zero gradient. Returns
    a (batch,) tensor.
    """
    xv = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xv.shape != out.raw.data.shape:
        raise ValueError(
            f"data shape {xv.shape} does not match decoder output "
            f"{out.raw.data.shape}")
    if out.family == "bernoulli" and (xv.min() < 0.0 or xv.max() > 1.0):
        raise ValueError("bernoulli family needs data in [0, 1]")
    xt = x if isinstance(x, Tensor) else Tensor(xv.astype(out.raw.data.dtype))
    if pixel_mask is not None:
        mv = pixel_mask.data if isinstance(pixel_mask, Tensor) else np.asarray(pixel_mask)
        if mv.shape != xv.shape:
            raise ValueError("pixel mask shape does not match data")
        if not np.all(mv.any(axis=tuple(range(1, mv.ndim)))):
            warnings.warn("fully masked frame scored; its log-likelihood is 0",
                          RuntimeWarning, stacklevel=2)
        mt = Tensor(mv.astype(out.raw.data.dtype))
    else:
        mt = None

    if out.family == "bernoulli":
        a = out.raw
        per_pixel = xt * a - T.softplus(a)
    else:
        diff = xt - out.raw
        per_pixel = diff * diff * (-0.5 / out.sigma2) \
            - 0.5 * (LOG_2PI + np.log(out.sigma2))
    if mt is not None:
        per_pixel = per_pixel * mt
    return T.tsum(per_pixel, axis=1)


def gaussian_logpdf(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """Diagonal Gaussian log-density, summed over the last axis."""
    diff = z - mu
    var = T.texp(logvar)
    return T.tsum(diff * diff / var + logvar + LOG_2PI, axis=-1) * -0.5


class StandardNormalPrior:
    kind = "standard"

    def params(self) -> dict[str, Tensor]:
        return {}

    def log_prob(self, z0: Tensor, encoder: Encoder | None = None) -> Tensor:
        return T.tsum(z0 * z0 + LOG_2PI, axis=1) * -0.5

    def sample(self, n: int, d: int, rng: np.random.Generator,
               encoder: Encoder | None = None) -> Tensor:
        return Tensor(rng.standard_normal((n, d)).astype(T.active_dtype()))


class VampPrior:
    """Mixture of encoder posteriors at learnable pseudo-inputs.

    log p(z) = logsumexp_k log q(z | u_k) - log K, evaluated with the same
    encoder the posterior uses.
    """

    kind = "vamp"

    def __init__(self, pseudo_init: np.ndarray):
        self.pseudo = T.parameter(np.asarray(pseudo_init))
        self.k = self.pseudo.data.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"pseudo": self.pseudo}

    def _components(self, encoder: Encoder) -> PosteriorOutput:
        return encoder(self.pseudo)

    def log_prob(self, z0: Tensor, encoder: Encoder) -> Tensor:
        comp = self._components(encoder)
        z_e = z0[:, None, :]
        mu_e = comp.mu[None, :, :]
        lv_e = comp.logvar[None, :, :]
        diff = z_e - mu_e
        comp_lp = T.tsum(diff * diff / T.texp(lv_e) + lv_e + LOG_2PI, axis=2) * -0.5
        return T.logsumexp(comp_lp, axis=1) - np.log(self.k)

    def sample(self, n: int, d: int, rng: np.random.Generator,
               encoder: Encoder = None) -> Tensor:
        with T.no_grad():
            comp = self._components(encoder)
        ks = rng.integers(self.k, size=n)
        mu = comp.mu.data[ks]
        std = np.exp(0.5 * comp.logvar.data[ks])
        eps = rng.standard_normal((n, d))
        return Tensor((mu + std * eps).astype(T.active_dtype()))


@dataclass
class ModelSpec:
    """Architecture switches for one assembled model."""

    latent_dim: int = 8
    enc_hidden: tuple[int, ...] = (256, 256)
    dec_hidden: tuple[int, ...] = (256, 256)
    family: str = "bernoulli"
    sigma2: float = 0.05
    prior: str = "standard"
    vamp_components: int = 16
    posterior: str = "gaussian"
    post_flow_blocks: int = 3
    post_made_layers: int = 2
    post_made_hidden: int = 128


class LongitudinalModel:
    """Encoder, decoder, z0 prior and optional posterior flow stack."""

    def __init__(self, encoder: Encoder, decoder: Decoder, prior,
                 post_flows: list[IafBlock] | None = None):
        self.encoder = encoder
        self.decoder = decoder
        self.prior = prior
        self.post_flows = post_flows or []
        self.latent_dim = encoder.latent_dim
        self.data_dim = encoder.data_dim

    def params(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.encoder.params().items():
            out[f"enc.{k}"] = v
        for k, v in self.decoder.params().items():
            out[f"dec.{k}"] = v
        for k, v in self.prior.params().items():
            out[f"prior.{k}"] = v
        for i, block in enumerate(self.post_flows):
            for k, v in block.params().items():
                out[f"postflow.{i}.{k}"] = v
        return out

    def encode(self, x: Tensor) -> PosteriorOutput:
        return self.encoder(x)

    def decode(self, z: Tensor) -> DecoderOutput:
        return self.decoder(z)

    def posterior_sample(self, post: PosteriorOutput, noise) -> tuple[Tensor, Tensor]:
        """Reparameterized draw and its log-density under q.

        noise is a fixed (batch, d) standard-normal array; the density is
        written in terms of it, which keeps gradients exact without
        re-deriving (z - mu) / sigma on the tape.
        """
        eps = np.asarray(noise, dtype=post.mu.data.dtype)
        if eps.shape != post.mu.data.shape:
            raise ValueError("noise shape does not match posterior")
        z = post.mu + T.texp(post.logvar * 0.5) * Tensor(eps)
        d = eps.shape[1]
        logq = T.tsum(post.logvar, axis=1) * -0.5 \
            + Tensor(-0.5 * (eps * eps).sum(axis=1) - 0.5 * d * LOG_2PI)
        for block in self.post_flows:
            z, ld = block.forward(z)
            logq = logq - ld
        return z, logq

    def posterior_log_prob(self, post: PosteriorOutput, z: Tensor) -> Tensor:
        """Density of q at an arbitrary point, inverting posterior flows if any."""
        ld_total = None
        for block in reversed(self.post_flows):
            z, ld = block.inverse(z)
            ld_total = ld if ld_total is None else ld_total + ld
        logq = gaussian_logpdf(z, post.mu, post.logvar)
        if ld_total is not None:
            logq = logq - ld_total
        return logq

    def prior_log_prob(self, z0: Tensor) -> Tensor:
        return self.prior.log_prob(z0, self.encoder)

    def prior_sample(self, n: int, rng: np.random.Generator) -> Tensor:
        return self.prior.sample(n, self.latent_dim, rng, self.encoder)


def build_model(spec: ModelSpec, data_dim: int, seed: int,
                pseudo_init: np.ndarray | None = None) -> LongitudinalModel:
    """Assemble a model from its spec with seeded initialization.

    VAMP pseudo-inputs start at the given frames; callers normally pass a
    random selection of training observations.
    """
    enc = Encoder(data_dim, tuple(spec.enc_hidden), spec.latent_dim,
                  seeding.stream(seed, seeding.INIT, 100))
    dec = Decoder(spec.latent_dim, tuple(spec.dec_hidden), data_dim,
                  seeding.stream(seed, seeding.INIT, 101),
                  family=spec.family, sigma2=spec.sigma2)
    if spec.prior == "standard":
        prior = StandardNormalPrior()
    elif spec.prior == "vamp":
        if pseudo_init is None:
            rng = seeding.stream(seed, seeding.PSEUDO_INIT)
            pseudo_init = 0.5 + 0.01 * rng.standard_normal(
                (spec.vamp_components, data_dim))
        if pseudo_init.shape != (spec.vamp_components, data_dim):
            raise ValueError("pseudo-input init has the wrong shape")
        prior = VampPrior(pseudo_init)
    else:
        raise ValueError(f"unknown prior {spec.prior!r}")
    post_flows = []
    if spec.posterior == "iaf":
        for b in range(spec.post_flow_blocks):
            rng = seeding.stream(seed, seeding.INIT, 200 + b)
            post_flows.append(IafBlock(spec.latent_dim, spec.post_made_layers,
                                       spec.post_made_hidden, rng,
                                       reverse=(b % 2 == 1)))
    elif spec.posterior != "gaussian":
        raise ValueError(f"unknown posterior {spec.posterior!r}")
    return LongitudinalModel(enc, dec, prior, post_flows)
