"""Estimate which input dimensions make a detected point anomalous.

The latent Gaussian ``q(z)`` of the anomalous point is re-optimised so that the
decoder explains every dimension *except* an ignored set ``phi`` of the ``K``
least likely ones.  The log-likelihood of the kept dimensions is rescaled by
``N / (N - K)`` so the objective stays on the scale of a full ELBO:

    N/(N-K) * E_q[ sum_{i not in phi} log p(x_i | z) ] - KL(q || N(0, I))

If the search settles below the training mean ELBO ``gamma``, ``K`` grows by
``k_inc`` and the search restarts from the encoder posterior.  Dimensions whose
expected density under the final ``q`` falls below ``beta`` are reported as
contributing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import Rng, ShapeError
from .vae import (
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    LatentGaussian,
    VaeModel,
    decoder_backward,
    decoder_pass,
    expected_dim_probability,
    expected_probs_with_noise,
    kl_diag_gaussians,
)

log = logging.getLogger(__name__)


@dataclass
class AttributionConfig:
    k_inc: int | None = None  # None -> ceil(0.1 * N)
    lr: float = 0.05
    max_iters: int = 500  # gradient steps per K phase
    max_total_iters: int = 5000
    convergence_window: int = 10
    convergence_rel_tol: float = 1e-4
    l_samples: int = 16
    k_max: int | None = None  # None -> N - 1
    backtrack: int = 30

    def resolved(self, n: int) -> "AttributionConfig":
        k_inc = self.k_inc if self.k_inc is not None else max(1, math.ceil(0.1 * n - 1e-9))
        k_max = self.k_max if self.k_max is not None else n - 1
        if not 1 <= k_inc <= n:
            raise ValueError(f"k_inc must lie in [1, {n}]")
        if not 0 <= k_max < n:
            raise ValueError(f"k_max must lie in [0, {n - 1}]")
        return AttributionConfig(k_inc, self.lr, self.max_iters, self.max_total_iters,
                                 self.convergence_window, self.convergence_rel_tol,
                                 self.l_samples, k_max, self.backtrack)


@dataclass
class AttributionResult:
    psi: list
    contribution_degrees: np.ndarray
    final_k: int
    final_objective: float
    converged: bool
    per_dim_expected_prob: np.ndarray
    latent: LatentGaussian
    initial_k: int = 0
    trace: list = field(default_factory=list)  # (k, objective) per gradient step

    @property
    def empty(self) -> bool:
        """True when no dimension could be attributed."""
        return len(self.psi) == 0


def _check_x(model: VaeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise ShapeError(f"expected a vector of length {model.input_dim}, got {x.shape}")
    return x


def initial_latent(model: VaeModel, x_anom) -> LatentGaussian:
    return model.encode(_check_x(model, x_anom))


def initial_k(model: VaeModel, x_anom, rng: Rng) -> int:
    """Number of dimensions below beta under the encoder posterior."""
    x = _check_x(model, x_anom)
    probs = expected_dim_probability(model, x, initial_latent(model, x), rng)
    return int(np.sum(probs < model.beta))


def _objective_terms(model: VaeModel, x, q: LatentGaussian, eps, k: int | None = None,
                     phi=None, with_grad: bool = False):
    """Objective, refreshed phi and optional gradient for fixed noise ``eps`` (L, dz).

    Exactly one of ``k`` (phi recomputed as the k least likely dims) or ``phi``
    must be given.
    """
    n = model.input_dim
    sigma = q.sigma
    z = q.mu + sigma * eps
    dp = decoder_pass(model, x, z)
    probs = np.exp(dp.logp).mean(axis=0)
    if phi is None:
        phi = _k_smallest(probs, k)
    kk = len(phi)
    if kk >= n:
        raise ValueError(f"ignored set of size {kk} leaves no dimensions (N={n})")
    keep = np.ones(n, dtype=bool)
    keep[list(phi)] = False
    scale = n / (n - kk)
    n_s = eps.shape[0]
    rec = scale * dp.logp[:, keep].sum(axis=1).mean()
    value = rec - kl_diag_gaussians(q)
    if not with_grad:
        return value, phi, probs, None
    dlogp = np.zeros_like(dp.logp)
    dlogp[:, keep] = scale / n_s
    _, gz = decoder_backward(model, dp, dlogp)
    g_mu = gz.sum(axis=0) - q.mu
    g_ls = (gz * eps).sum(axis=0) * sigma - (sigma * sigma - 1.0)
    return value, phi, probs, (g_mu, g_ls)


def _k_smallest(values, k: int) -> list:
    if k <= 0:
        return []
    # stable sort: ties go to the lower index
    return sorted(int(i) for i in np.argsort(values, kind="stable")[:k])


def objective(model: VaeModel, x_anom, q: LatentGaussian, phi, rng: Rng | None = None,
              eps=None, n_samples: int | None = None) -> float:
    """Rescaled partial ELBO with the dimensions in ``phi`` ignored."""
    x = _check_x(model, x_anom)
    if eps is None:
        n_samples = n_samples or model.config.l_eval
        eps = rng.normal((n_samples, model.latent_dim))
    return float(_objective_terms(model, x, q, np.asarray(eps), phi=list(phi))[0])


def objective_gradient(model: VaeModel, x_anom, q: LatentGaussian, phi, eps):
    """Objective value and its gradient w.r.t. ``(mu, log_sigma)`` for fixed noise."""
    x = _check_x(model, x_anom)
    value, _, _, grad = _objective_terms(model, x, q, np.asarray(eps), phi=list(phi), with_grad=True)
    return float(value), grad


def update_phi(model: VaeModel, x_anom, q: LatentGaussian, k: int, rng: Rng,
               n_samples: int | None = None) -> list:
    """Indices of the ``k`` dimensions with the smallest expected density under ``q``."""
    x = _check_x(model, x_anom)
    if not 0 <= k < model.input_dim:
        raise ValueError(f"k must lie in [0, {model.input_dim})")
    return _k_smallest(expected_dim_probability(model, x, q, rng, n_samples), k)


def _window_converged(trace_vals, window: int, tol: float) -> bool:
    if len(trace_vals) <= window:
        return False
    recent = np.asarray(trace_vals[-(window + 1):])
    rel = np.abs(np.diff(recent)) / np.maximum(np.abs(recent[:-1]), 1.0)
    return float(rel.mean()) < tol


def explore_latent(model: VaeModel, x_anom, cfg: AttributionConfig | None, rng: Rng,
                   k0: int | None = None):
    """Gradient ascent on the latent Gaussian with a growing ignored set.

    Returns ``(latent, final_k, trace, converged, final_objective)``.  Within a
    phase the noise batch is fixed, so the objective is deterministic; a step
    is halved until it does not decrease the objective for the current ignored
    set.  ``converged`` is False when ``K`` hit ``k_max`` or the total step
    budget ran out before the objective cleared ``gamma``.
    """
    x = _check_x(model, x_anom)
    n = model.input_dim
    cfg = (cfg or AttributionConfig()).resolved(n)
    init = initial_latent(model, x)
    k = initial_k(model, x, rng) if k0 is None else k0
    k = min(k, cfg.k_max)
    if cfg.max_iters == 0:
        eps = rng.normal((cfg.l_samples, model.latent_dim))
        value = _objective_terms(model, x, init, eps, k=k)[0]
        return init, k, [], value >= model.gamma, float(value)
    trace = []
    total = 0
    while True:
        q = init.copy()
        eps = rng.normal((cfg.l_samples, model.latent_dim))
        values = []
        best_val, best_q = -math.inf, q
        for _ in range(cfg.max_iters):
            val, phi, _, (g_mu, g_ls) = _objective_terms(model, x, q, eps, k=k, with_grad=True)
            if not math.isfinite(val):
                raise FloatingPointError(f"non-finite objective at K={k}; trace tail {trace[-5:]}")
            values.append(val)
            trace.append((k, val))
            if val > best_val:
                best_val, best_q = val, q
            total += 1
            if _window_converged(values, cfg.convergence_window, cfg.convergence_rel_tol):
                break
            if total >= cfg.max_total_iters:
                break
            step = cfg.lr
            for _ in range(cfg.backtrack):
                cand = LatentGaussian(q.mu + step * g_mu,
                                      np.clip(q.log_sigma + step * g_ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
                cand_val = _objective_terms(model, x, cand, eps, phi=phi)[0]
                if cand_val >= val:
                    q = cand
                    break
                step *= 0.5
            else:
                # no ascent step for this phi: stationary
                break
        # best_val was evaluated with phi refreshed at best_q
        final_val = best_val
        if final_val >= model.gamma:
            return best_q, k, trace, True, float(final_val)
        if total >= cfg.max_total_iters or k + cfg.k_inc > cfg.k_max:
            return best_q, k, trace, False, float(final_val)
        k += cfg.k_inc
        log.debug("objective %.3f below gamma %.3f; K -> %d", final_val, model.gamma, k)


def estimate_psi(model: VaeModel, x_anom, q_final: LatentGaussian, rng: Rng,
                 n_samples: int | None = None):
    """Dimensions whose expected density under ``q_final`` is below beta.

    Returns ``(psi, probs)``.
    """
    x = _check_x(model, x_anom)
    probs = expected_dim_probability(model, x, q_final, rng, n_samples)
    psi = [int(i) for i in np.flatnonzero(probs < model.beta)]
    return psi, probs


def contribution_degree(model: VaeModel, x_anom, q_final: LatentGaussian, rng: Rng,
                        n_samples: int | None = None) -> np.ndarray:
    """Signed deviation ``(x_i - mean_mu_i) / mean_sigma_i`` under ``q_final``."""
    x = _check_x(model, x_anom)
    n_samples = n_samples or model.config.l_eval
    eps = rng.normal((n_samples, model.latent_dim))
    mu_x, ls_x = model.decode(q_final.mu + q_final.sigma * eps)
    return (x - mu_x.mean(axis=0)) / np.exp(ls_x).mean(axis=0)


def attribute(model: VaeModel, x_anom, rng: Rng, cfg: AttributionConfig | None = None) -> AttributionResult:
    """Full pipeline: explore the latent, then threshold and score each dimension.

    One noise batch, drawn first from ``rng``, is shared by the initial ``K``,
    the final threshold test and the contribution degrees, so with no
    exploration steps the result coincides with plain encoder-posterior
    thresholding under the same seed.
    """
    if not model.calibrated:
        raise ValueError("model must be calibrated (gamma, beta, threshold) before attribution")
    x = _check_x(model, x_anom)
    eps0 = rng.normal((model.config.l_eval, model.latent_dim))
    init = initial_latent(model, x)
    p0 = expected_probs_with_noise(model, x, init, eps0)[0]
    k0 = int(np.sum(p0 < model.beta))
    q, k, trace, converged, final_obj = explore_latent(model, x, cfg, rng, k0=k0)
    probs = expected_probs_with_noise(model, x, q, eps0)[0]
    psi = [int(i) for i in np.flatnonzero(probs < model.beta)]
    mu_x, ls_x = model.decode(q.mu + q.sigma * eps0)
    degrees = (x - mu_x.mean(axis=0)) / np.exp(ls_x).mean(axis=0)
    return AttributionResult(psi, degrees, k, final_obj, converged, probs, q, k0, trace)
