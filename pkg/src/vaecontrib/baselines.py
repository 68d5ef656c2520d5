"""Comparison methods: encoder-posterior attribution, sparse attribution on a plain
autoencoder, and residual-subspace PCA detection."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .neural import AdamState, Mlp, adam_step
from .numcore import Rng, ShapeError, as_matrix
from .vae import VaeConfig, VaeModel, TrainingError, expected_dim_probability, hidden_sizes, latent_size

log = logging.getLogger(__name__)


def vae_rec_attribution(model: VaeModel, x_anom, rng: Rng):
    """Threshold expected densities under the encoder posterior (no exploration).

    Returns ``(psi, probs)``.
    """
    x = np.asarray(x_anom, dtype=np.float64)
    probs = expected_dim_probability(model, x, model.encode(x), rng)
    return [int(i) for i in np.flatnonzero(probs < model.beta)], probs


# -- plain autoencoder ---------------------------------------------------------------


@dataclass
class AeModel:
    net: Mlp
    input_dim: int
    config: VaeConfig = field(default_factory=lambda: VaeConfig(activation="relu"))
    detect_threshold: float = float("nan")
    train_score_mean: float = float("nan")
    train_score_std: float = float("nan")
    seed: int | None = None

    @classmethod
    def create(cls, input_dim: int, config: VaeConfig | None = None, rng: Rng | None = None) -> "AeModel":
        config = config or VaeConfig(activation="relu")
        rng = rng or Rng(0)
        n = input_dim
        h = hidden_sizes(n, config.hidden_ratios)
        sizes = [n, *h, latent_size(n, config.latent_ratio), *reversed(h), n]
        acts = [config.activation] * len(h) + ["identity"] + [config.activation] * len(h) + ["identity"]
        n_layers = len(sizes) - 1
        drops = [config.input_dropout] + [config.hidden_dropout] * (n_layers - 1)
        if not config.dropout:
            drops = [0.0] * n_layers
        # the bottleneck feeds the decoder directly; no dropout on it
        drops[len(h) + 1] = 0.0
        return cls(Mlp.build(sizes, acts, rng, drops), n, config, seed=rng.seed)

    def reconstruct(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = self.net(x)
        return out[0] if x.ndim == 1 else out


def ae_anomaly_score(model: AeModel, x):
    """Per-dimension mean squared reconstruction error."""
    x = np.asarray(x, dtype=np.float64)
    err = ((as_matrix(x) - model.net(x)) ** 2).mean(axis=1)
    return float(err[0]) if x.ndim == 1 else err


def train_ae(data, rng: Rng, config: VaeConfig | None = None, model: AeModel | None = None):
    """Fit an autoencoder by Adam on the mean squared error; returns ``(model, losses)``."""
    x = as_matrix(getattr(data, "matrix", data))
    if x.shape[0] == 0:
        raise TrainingError("empty training set")
    model = model or AeModel.create(x.shape[1], config, rng)
    config = model.config
    params = model.net.params()
    state = AdamState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)
    n = x.shape[0]
    bs = min(config.batch_size, n)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            batch = x[order[start:start + bs]]
            out, tape = model.net.forward(batch, True, rng)
            diff = out - batch
            loss = float((diff * diff).mean())
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite AE loss at epoch {epoch}")
            grads, _ = model.net.backward(tape, 2.0 * diff / diff.size)
            adam_step(params, grads, state)
            total += loss * batch.shape[0]
        losses.append(total / n)
    scores = ae_anomaly_score(model, x)
    model.train_score_mean = float(scores.mean())
    model.train_score_std = float(scores.std())
    model.detect_threshold = model.train_score_mean + 3.0 * model.train_score_std
    return model, losses


def soft_threshold(v, t):
    """Proximal operator of ``t * |.|_1``."""
    v = np.asarray(v, dtype=np.float64)
    out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    return float(out) if out.ndim == 0 else out


def _ae_mse_and_grad(model: AeModel, u):
    """MSE between ``u`` and its reconstruction, and the gradient w.r.t. ``u``."""
    out, tape = model.net.forward(u[None, :])
    r = u - out[0]
    n = u.size
    _, g_in = model.net.backward(tape, (-2.0 / n * r)[None, :])
    return float(r @ r / n), 2.0 / n * r + g_in[0]


@dataclass
class SparseResult:
    eta: np.ndarray
    psi: list
    objective: float
    converged: bool
    n_iter: int
    history: list


def ae_so_attribution(model: AeModel, x_anom, lam: float = 0.1, threshold: float = 0.1,
                      max_iter: int = 1000, tol: float = 1e-8, step0: float = 1.0) -> SparseResult:
    """Sparse correction ``eta`` minimising ``MSE(x - eta) + lam * |eta|_1``.

    Proximal gradient with backtracking on the smooth part; network weights
    are fixed.  Dimensions with ``|eta_i| > threshold`` are reported.
    """
    x = np.asarray(x_anom, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise ShapeError(f"expected a vector of length {model.input_dim}")
    eta = np.zeros_like(x)
    f, g_u = _ae_mse_and_grad(model, x - eta)
    obj = f + lam * np.abs(eta).sum()
    history = [obj]
    step = step0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = -g_u  # d/d(eta) of MSE(x - eta)
        while True:
            cand = soft_threshold(eta - step * grad, step * lam)
            d = cand - eta
            f_c, g_c = _ae_mse_and_grad(model, x - cand)
            if f_c <= f + grad @ d + (d @ d) / (2.0 * step) or step < 1e-12:
                break
            step *= 0.5
        new_obj = f_c + lam * np.abs(cand).sum()
        eta, f, g_u = cand, f_c, g_c
        history.append(new_obj)
        if abs(obj - new_obj) <= tol * max(1.0, abs(obj)):
            obj = new_obj
            converged = True
            break
        obj = new_obj
        step *= 2.0  # let the step grow back
    psi = [int(i) for i in np.flatnonzero(np.abs(eta) > threshold)]
    return SparseResult(eta, psi, float(obj), converged, it, history)


# -- PCA --------------------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, N), orthonormal rows
    detect_threshold: float = float("nan")
    explained_variance: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_anomaly_score(model: PcaModel, x):
    """Squared norm of the part of ``x - mean`` outside the principal subspace."""
    x = np.asarray(x, dtype=np.float64)
    c = as_matrix(x) - model.mean
    resid = c - (c @ model.components.T) @ model.components
    s = np.einsum("ij,ij->i", resid, resid)
    return float(s[0]) if x.ndim == 1 else s


def fit_pca(data, k: int, rank_tol: float = 1e-10) -> PcaModel:
    """Top-``k`` eigenvectors of the sample covariance.

    Each component's largest-magnitude entry is made positive.  If the data
    has rank below ``k`` a warning is emitted and ``k`` is reduced.
    """
    x = as_matrix(getattr(data, "matrix", data))
    n = x.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, bias=True).reshape(n, n)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rank = int(np.sum(vals > rank_tol * max(vals[0], 1e-300)))
    if rank < k:
        warnings.warn(f"data rank {rank} is below k={k}; using k={max(rank, 1)}")
        k = max(rank, 1)
    comps = vecs[:, :k].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    model = PcaModel(mean, comps, explained_variance=vals[:k])
    scores = pca_anomaly_score(model, x)
    model.detect_threshold = float(scores.mean() + 3.0 * scores.std())
    return model
