import numpy as np
import pytest

from vaecontrib.attribution import (
    AttributionConfig,
    attribute,
    estimate_psi,
    explore_latent,
    initial_latent,
    objective,
    objective_gradient,
    update_phi,
)
from vaecontrib.baselines import vae_rec_attribution
from vaecontrib.neural import relative_error
from vaecontrib.numcore import Rng, ShapeError
from vaecontrib.vae import (
    LatentGaussian,
    elbo_with_noise,
    expected_dim_probability,
    gaussian_log_density,
    kl_diag_gaussians,
)


def _clean_points(model, x, count, seed=0):
    from vaecontrib.vae import elbo

    e = elbo(model, x, Rng(seed))
    return x[e > model.gamma][:count]


def test_empty_phi_matches_elbo(fresh_vae):
    x = Rng(1).normal(20)
    q = initial_latent(fresh_vae, x)
    eps = Rng(2).normal((16, fresh_vae.latent_dim))
    got = objective(fresh_vae, x, q, [], eps=eps)
    want = float(elbo_with_noise(fresh_vae, x[None, :], eps[None])[0])
    assert got == pytest.approx(want, rel=1e-12)


def test_ignored_dims_are_rescaled(fresh_vae):
    x = Rng(3).normal(20)
    q = initial_latent(fresh_vae, x)
    eps = Rng(4).normal((8, fresh_vae.latent_dim))
    phi = [0, 5, 7]
    z = q.mu + q.sigma * eps
    mu_x, ls_x = fresh_vae.decode(z)
    logp = gaussian_log_density(x, mu_x, np.exp(ls_x))
    keep = [i for i in range(20) if i not in phi]
    want = 20 / 17 * logp[:, keep].sum(axis=1).mean() - kl_diag_gaussians(q)
    assert objective(fresh_vae, x, q, phi, eps=eps) == pytest.approx(want, rel=1e-12)


def test_objective_matches_quadrature(latent1_model):
    """Monte-Carlo objective with many samples vs a dense 1-D integral."""
    model, data = latent1_model
    x = data[5].copy()
    x[2] += 3.0
    q = LatentGaussian(np.array([0.3]), np.array([np.log(0.6)]))
    phi = [2, 6]
    keep = [i for i in range(10) if i not in phi]
    grid = np.linspace(-8, 8, 4001)
    z = q.mu[0] + q.sigma[0] * grid
    mu_x, ls_x = model.decode(z[:, None])
    rec = gaussian_log_density(x, mu_x, np.exp(ls_x))[:, keep].sum(axis=1) * 10 / 8
    w = np.exp(-0.5 * grid**2) / np.sqrt(2 * np.pi)
    exact = np.trapezoid(w * rec, grid) - kl_diag_gaussians(q)
    mc = objective(model, x, q, phi, Rng(0), n_samples=20000)
    assert abs(mc - exact) / abs(exact) < 1e-2


def test_latent_gradient_finite_difference(fresh_vae):
    x = Rng(5).normal(20)
    q = LatentGaussian(Rng(6).normal(2) * 0.5, np.array([-0.3, 0.2]))
    eps = Rng(7).normal((16, 2))
    phi = [1, 4]
    _, (g_mu, g_ls) = objective_gradient(fresh_vae, x, q, phi, eps)
    h = 1e-5
    for j in range(2):
        for which, g in (("mu", g_mu), ("ls", g_ls)):
            vals = []
            for s in (h, -h):
                mu, ls = q.mu.copy(), q.log_sigma.copy()
                (mu if which == "mu" else ls)[j] += s
                vals.append(objective(fresh_vae, x, LatentGaussian(mu, ls), phi, eps=eps))
            num = (vals[0] - vals[1]) / (2 * h)
            assert relative_error(g[j], num) < 1e-5


def test_update_phi_picks_least_likely(toy_vae, toy_split):
    _, te = toy_split
    x = te[0].copy()
    x[[3, 11]] = [6.0, -5.0]
    q = initial_latent(toy_vae, x)
    probs = expected_dim_probability(toy_vae, x, q, Rng(1))
    phi = update_phi(toy_vae, x, q, 4, Rng(1))
    assert phi == sorted(np.argsort(probs, kind="stable")[:4].tolist())
    assert {3, 11} <= set(phi)
    assert update_phi(toy_vae, x, q, 0, Rng(1)) == []
    with pytest.raises(ValueError):
        update_phi(toy_vae, x, q, 20, Rng(1))


def test_update_phi_tie_break_by_index(fresh_vae):
    from vaecontrib.attribution import _k_smallest

    assert _k_smallest(np.array([0.5, 0.1, 0.1, 0.1, 0.9]), 2) == [1, 2]
    assert _k_smallest(np.array([0.2, 0.2, 0.2]), 1) == [0]


def test_normal_point_barely_moves(toy_vae, toy_split):
    _, te = toy_split
    x = _clean_points(toy_vae, te, 1)[0]
    eps = Rng(3).normal((16, toy_vae.latent_dim))
    q0 = initial_latent(toy_vae, x)
    before = objective(toy_vae, x, q0, [], eps=eps)
    q, k, _, converged, _ = explore_latent(toy_vae, x, AttributionConfig(), Rng(3), k0=0)
    after = objective(toy_vae, x, q, [], eps=eps)
    assert converged and k == 0
    assert after >= before - 1e-9
    assert (after - before) / abs(before) < 0.05


def test_explore_trace_and_k_monotone(toy_vae, toy_split):
    _, te = toy_split
    x = _clean_points(toy_vae, te, 1)[0].copy()
    x[[2, 9, 15]] = [4.5, -4.0, 5.0]
    q, k, trace, converged, final = explore_latent(toy_vae, x, None, Rng(8))
    ks = [t[0] for t in trace]
    assert ks == sorted(ks)
    assert k == ks[-1]
    assert np.all(np.isfinite([t[1] for t in trace]))
    if converged:
        assert final >= toy_vae.gamma


def test_injection_is_recovered(toy_vae, toy_split):
    _, te = toy_split
    x = _clean_points(toy_vae, te, 3)[2].copy()
    x[[4, 13]] = 4.0
    res = attribute(toy_vae, x, Rng(21))
    assert res.psi == [4, 13]
    top2 = np.argsort(-np.abs(res.contribution_degrees))[:2]
    assert set(top2.tolist()) == {4, 13}
    assert np.all(res.contribution_degrees[[4, 13]] > 0)
    assert res.final_k >= res.initial_k


def test_psi_is_sorted_subset(toy_vae, toy_split):
    _, te = toy_split
    for i in range(5):
        x = te[i].copy()
        x[i] = -5.0
        res = attribute(toy_vae, x, Rng(i))
        assert res.psi == sorted(set(res.psi))
        assert all(0 <= d < 20 for d in res.psi)
        assert res.per_dim_expected_prob.shape == (20,)
        assert res.empty == (res.psi == [])


def test_degree_sign_follows_deviation(toy_vae, toy_split):
    _, te = toy_split
    x = _clean_points(toy_vae, te, 2)[1].copy()
    x[7] = -5.0
    res = attribute(toy_vae, x, Rng(2))
    assert res.contribution_degrees[7] < -2.0


def test_zero_iterations_equal_encoder_thresholding(toy_vae, toy_split):
    _, te = toy_split
    for i in range(5):
        x = te[i].copy()
        x[i + 3] = 4.5
        res = attribute(toy_vae, x, Rng(40 + i), AttributionConfig(max_iters=0))
        psi, probs = vae_rec_attribution(toy_vae, x, Rng(40 + i))
        assert res.psi == psi
        np.testing.assert_array_equal(res.per_dim_expected_prob, probs)


def test_estimate_psi_at_initial_latent(toy_vae, toy_split):
    _, te = toy_split
    x = te[3]
    a = estimate_psi(toy_vae, x, initial_latent(toy_vae, x), Rng(9))
    b = vae_rec_attribution(toy_vae, x, Rng(9))
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_attribute_is_deterministic(toy_vae, toy_split):
    _, te = toy_split
    x = te[10].copy()
    x[[0, 1]] = 4.0
    a = attribute(toy_vae, x, Rng(5))
    b = attribute(toy_vae, x, Rng(5))
    assert a.psi == b.psi and a.final_k == b.final_k
    np.testing.assert_array_equal(a.contribution_degrees, b.contribution_degrees)


def test_k_capped_at_k_max(toy_vae, toy_split):
    _, te = toy_split
    x = te[0] + 8.0
    res = attribute(toy_vae, x, Rng(0), AttributionConfig(k_max=5))
    assert res.final_k <= 5


def test_errors(toy_vae, fresh_vae):
    with pytest.raises(ShapeError):
        attribute(toy_vae, np.zeros(19), Rng(0))
    with pytest.raises(ValueError):
        attribute(fresh_vae, np.zeros(20), Rng(0))  # not calibrated
    with pytest.raises(ValueError):
        AttributionConfig(k_inc=0).resolved(20)
    with pytest.raises(ValueError):
        objective(toy_vae, np.zeros(20), initial_latent(toy_vae, np.zeros(20)), list(range(20)),
                  eps=np.zeros((2, 2)))
