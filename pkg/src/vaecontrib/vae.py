"""Gaussian-decoder variational autoencoder used as the anomaly detector.

The encoder emits ``(mu_z, log_sigma_z)`` and the decoder emits
``(mu_x, log_sigma_x)``, both diagonal Gaussians.  Log standard deviations are
clipped to ``[log SIGMA_FLOOR, log SIGMA_CEIL]``; the clip has zero gradient
outside the band.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .neural import AdamState, Mlp, adam_step
from .numcore import Rng, ShapeError, as_matrix

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
SIGMA_CEIL = 1e3
LOG_SIGMA_MIN = math.log(SIGMA_FLOOR)
LOG_SIGMA_MAX = math.log(SIGMA_CEIL)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


@dataclass
class VaeConfig:
    """Hyperparameters.  Defaults follow the reference setup (5 layers with
    width ratios 0.7/0.5/0.1/0.5/0.7, tanh, 100 epochs, weight decay 1e-3,
    dropout 0.2 on the input and 0.5 on hidden layers)."""

    hidden_ratios: tuple = (0.7, 0.5)
    latent_ratio: float = 0.1
    activation: str = "tanh"
    epochs: int = 100
    batch_size: int = 64
    weight_decay: float = 1e-3
    lr: float = 1e-3
    dropout: bool = True
    input_dropout: float = 0.2
    hidden_dropout: float = 0.5
    l_eval: int = 16

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        if "hidden_ratios" in d:
            d["hidden_ratios"] = tuple(d["hidden_ratios"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_ratios"] = list(self.hidden_ratios)
        return d


def hidden_sizes(n: int, ratios) -> list[int]:
    # guard against 0.7 * 20 == 14.000000000000002
    return [max(1, math.ceil(r * n - 1e-9)) for r in ratios]


def latent_size(n: int, ratio: float = 0.1) -> int:
    return max(1, int(round(ratio * n)))


@dataclass
class LatentGaussian:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != self.log_sigma.shape:
            raise ShapeError("mu and log_sigma must have the same shape")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_sigma))):
            raise ValueError("latent parameters must be finite")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def copy(self) -> "LatentGaussian":
        return LatentGaussian(self.mu.copy(), self.log_sigma.copy())


@dataclass
class VaeModel:
    encoder: Mlp
    decoder: Mlp
    input_dim: int
    latent_dim: int
    config: VaeConfig = field(default_factory=VaeConfig)
    gamma: float = float("nan")
    beta: float = float("nan")
    detect_threshold: float = float("nan")
    train_score_mean: float = float("nan")
    train_score_std: float = float("nan")
    seed: int | None = None

    @classmethod
    def create(cls, input_dim: int, config: VaeConfig | None = None,
               rng: Rng | None = None) -> "VaeModel":
        config = config or VaeConfig()
        rng = rng or Rng(0)
        n = input_dim
        h = hidden_sizes(n, config.hidden_ratios)
        dz = latent_size(n, config.latent_ratio)
        act = config.activation
        n_hidden = len(h)
        enc_drop = [config.input_dropout] + [config.hidden_dropout] * n_hidden
        dec_drop = [0.0] + [config.hidden_dropout] * n_hidden
        if not config.dropout:
            enc_drop = [0.0] * len(enc_drop)
            dec_drop = [0.0] * len(dec_drop)
        encoder = Mlp.build([n, *h, 2 * dz], [act] * n_hidden + ["identity"], rng, enc_drop)
        decoder = Mlp.build([dz, *reversed(h), 2 * n], [act] * n_hidden + ["identity"], rng, dec_drop)
        return cls(encoder, decoder, n, dz, config, seed=rng.seed)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    @property
    def calibrated(self) -> bool:
        return all(np.isfinite([self.gamma, self.beta, self.detect_threshold]))

    def encode(self, x) -> LatentGaussian:
        """Posterior parameters for each row of ``x`` (eval mode)."""
        x = np.asarray(x, dtype=np.float64)
        out = self.encoder(x)
        mu, ls = out[:, : self.latent_dim], out[:, self.latent_dim:]
        ls = np.clip(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        if x.ndim == 1:
            return LatentGaussian(mu[0], ls[0])
        return LatentGaussian(mu, ls)

    def decode(self, z):
        """Decoder mean and log standard deviation for latent codes ``z``."""
        out = self.decoder(z)
        n = self.input_dim
        return out[:, :n], np.clip(out[:, n:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def gaussian_log_density(x, mu, sigma):
    """Elementwise log N(x; mu, sigma^2)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    r = (np.asarray(x, dtype=np.float64) - mu) / sigma
    out = -HALF_LOG_2PI - np.log(sigma) - 0.5 * r * r
    return float(out) if np.ndim(out) == 0 else out


def kl_diag_gaussians(q: LatentGaussian) -> float | np.ndarray:
    """KL(q || N(0, I)), summed over the last axis."""
    kl = _kl(q.mu, q.log_sigma)
    return float(kl) if np.ndim(kl) == 0 else kl


def _kl(mu, ls):
    # expm1 keeps sigma^2 - 1 - 2 log sigma >= 0 in floating point
    return 0.5 * np.sum(np.expm1(2.0 * ls) - 2.0 * ls + mu * mu, axis=-1)


# -- decoder likelihood with explicit backward ------------------------------------


@dataclass
class DecoderPass:
    logp: np.ndarray  # (M, N) per-dimension log density
    mu_x: np.ndarray
    log_sigma_x: np.ndarray
    resid: np.ndarray  # (x - mu_x) / sigma_x
    clip_mask: np.ndarray
    tape: object


def decoder_pass(model: VaeModel, x, z, train: bool = False, rng: Rng | None = None) -> DecoderPass:
    """Per-dimension ``log p(x | z)`` for latent rows ``z``; ``x`` broadcasts to (M, N)."""
    out, tape = model.decoder.forward(z, train, rng)
    n = model.input_dim
    mu_x = out[:, :n]
    raw = out[:, n:]
    ls_x = np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    resid = (x - mu_x) * np.exp(-ls_x)
    logp = -HALF_LOG_2PI - ls_x - 0.5 * resid * resid
    mask = (raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)
    return DecoderPass(logp, mu_x, ls_x, resid, mask, tape)


def decoder_backward(model: VaeModel, dp: DecoderPass, dlogp: np.ndarray):
    """Back-propagate ``d(obj)/d(logp)`` to decoder params and the latent input."""
    g_mu = dlogp * dp.resid * np.exp(-dp.log_sigma_x)
    g_ls = dlogp * (dp.resid * dp.resid - 1.0) * dp.clip_mask
    return model.decoder.backward(dp.tape, np.hstack([g_mu, g_ls]))


def _reparam(mu, ls, eps):
    """z = mu + sigma * eps for eps of shape (B, L, dz); returns (B*L, dz)."""
    z = mu[:, None, :] + np.exp(ls)[:, None, :] * eps
    return z.reshape(-1, mu.shape[-1])


def elbo_with_noise(model: VaeModel, x, eps, train: bool = False, rng: Rng | None = None,
                    with_grad: bool = False):
    """ELBO of each row of ``x`` using fixed reparameterisation noise.

    ``eps`` has shape ``(B, L, d_z)``.  With ``with_grad`` also returns the
    gradient of ``mean_b ELBO_b`` w.r.t. ``model.params()``.
    """
    x = as_matrix(x)
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"expected {model.input_dim} features, got {x.shape[1]}")
    b = x.shape[0]
    eps = np.asarray(eps, dtype=np.float64).reshape(b, -1, model.latent_dim)
    n_s = eps.shape[1]
    dz = model.latent_dim

    enc_out, etape = model.encoder.forward(x, train, rng)
    mu_z = enc_out[:, :dz]
    raw_ls = enc_out[:, dz:]
    ls_z = np.clip(raw_ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    z = _reparam(mu_z, ls_z, eps)
    xr = np.repeat(x, n_s, axis=0)
    dp = decoder_pass(model, xr, z, train, rng)
    rec = dp.logp.sum(axis=1).reshape(b, n_s).mean(axis=1)
    elbo = rec - _kl(mu_z, ls_z)
    if not with_grad:
        return elbo

    # objective = mean_b elbo_b
    dlogp = np.full_like(dp.logp, 1.0 / (b * n_s))
    dec_grads, gz = decoder_backward(model, dp, dlogp)
    gz = gz.reshape(b, n_s, dz)
    sig_z = np.exp(ls_z)
    g_mu = gz.sum(axis=1) - mu_z / b
    g_ls = (gz * eps).sum(axis=1) * sig_z - (sig_z * sig_z - 1.0) / b
    g_ls = g_ls * ((raw_ls > LOG_SIGMA_MIN) & (raw_ls < LOG_SIGMA_MAX))
    enc_grads, _ = model.encoder.backward(etape, np.hstack([g_mu, g_ls]))
    return elbo, enc_grads + dec_grads


def elbo(model: VaeModel, x, rng: Rng, n_samples: int | None = None):
    """Monte-Carlo ELBO with ``n_samples`` reparameterised draws per row."""
    if n_samples is None:
        n_samples = model.config.l_eval
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    xm = as_matrix(x)
    eps = rng.normal((xm.shape[0], n_samples, model.latent_dim))
    out = elbo_with_noise(model, xm, eps)
    return float(out[0]) if x.ndim == 1 else out


def anomaly_score(model: VaeModel, x, rng: Rng, n_samples: int | None = None):
    """Negative ELBO."""
    return -elbo(model, x, rng, n_samples)


def detect(model: VaeModel, x, rng: Rng):
    return anomaly_score(model, x, rng) > model.detect_threshold


def expected_probs_with_noise(model: VaeModel, x, q: LatentGaussian, eps):
    """Per-dimension ``E_q[p(x_i | z)]`` for fixed noise ``eps`` (B, L, dz)."""
    x = as_matrix(x)
    mu = np.atleast_2d(q.mu)
    ls = np.atleast_2d(q.log_sigma)
    b = x.shape[0]
    eps = np.asarray(eps).reshape(b, -1, model.latent_dim)
    n_s = eps.shape[1]
    dp = decoder_pass(model, np.repeat(x, n_s, axis=0), _reparam(mu, ls, eps))
    return np.exp(dp.logp).reshape(b, n_s, -1).mean(axis=1)


def expected_dim_probability(model: VaeModel, x, q: LatentGaussian, rng: Rng,
                             n_samples: int | None = None) -> np.ndarray:
    """Monte-Carlo estimate of the expected density of each input dimension under ``q``."""
    if n_samples is None:
        n_samples = model.config.l_eval
    x = np.asarray(x, dtype=np.float64)
    b = 1 if x.ndim == 1 else x.shape[0]
    eps = rng.normal((b, n_samples, model.latent_dim))
    p = expected_probs_with_noise(model, x, q, eps)
    return p[0] if x.ndim == 1 else p


def train(model: VaeModel, data, rng: Rng, config: VaeConfig | None = None,
          epochs: int | None = None):
    """Fit encoder and decoder by minibatch ascent on the single-sample ELBO.

    Returns ``(model, losses)`` where ``losses[e]`` is the mean negative ELBO
    over epoch ``e``.  The model is updated in place.
    """
    config = config or model.config
    x = as_matrix(getattr(data, "matrix", data))
    if x.shape[0] == 0:
        raise TrainingError("empty training set")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"expected {model.input_dim} features, got {x.shape[1]}")
    epochs = config.epochs if epochs is None else epochs
    params = model.params()
    state = AdamState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)
    n = x.shape[0]
    bs = min(config.batch_size, n)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            batch = x[order[start:start + bs]]
            eps = rng.normal((batch.shape[0], 1, model.latent_dim))
            values, grads = elbo_with_noise(model, batch, eps, train=True, rng=rng, with_grad=True)
            loss = -float(values.mean())
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}; "
                    f"last epoch losses: {losses[-3:]}")
            adam_step(params, [-g for g in grads], state)
            total += loss * batch.shape[0]
        losses.append(total / n)
        log.debug("epoch %d  -ELBO %.4f", epoch, losses[-1])
    return model, losses


def calibrate_thresholds(model: VaeModel, train_data, rng: Rng):
    """Set gamma (mean train ELBO), beta (1st percentile of pooled expected
    per-dimension probabilities) and the mean + 3 std score threshold."""
    x = as_matrix(getattr(train_data, "matrix", train_data))
    elbos = elbo(model, x, rng)
    elbos = np.atleast_1d(elbos)
    scores = -elbos
    q = model.encode(x)
    probs = expected_dim_probability(model, x, q, rng)
    pooled = np.asarray(probs).ravel()
    if pooled.size < 100:
        warnings.warn(f"only {pooled.size} pooled probabilities; using the minimum as beta")
        beta = float(pooled.min())
    else:
        beta = float(np.percentile(pooled, 1.0))
    model.gamma = float(elbos.mean())
    model.beta = beta
    model.train_score_mean = float(scores.mean())
    model.train_score_std = float(scores.std())
    model.detect_threshold = model.train_score_mean + 3.0 * model.train_score_std
    return model.gamma, model.beta, model.detect_threshold
