# %% [markdown]
# # Comparison methods
#
# A plain autoencoder with a sparse input correction, and PCA scored by the
# energy left outside the principal subspace.

# %%
import numpy as np

from vaecontrib import Rng, VaeConfig
from vaecontrib.baselines import ae_anomaly_score, ae_so_attribution, fit_pca, pca_anomaly_score, train_ae
from vaecontrib.bench import make_correlated_gaussian

x = make_correlated_gaussian(2000, 20, rank=2, noise=0.5, seed=0)
train_x, test_x = x[:1800], x[1800:]
mean, std = train_x.mean(0), train_x.std(0)
train_x, test_x = (train_x - mean) / std, (test_x - mean) / std

row = test_x[0].copy()
row[[4, 13]] = 4.0

# %% [markdown]
# The sparse correction solves min_eta MSE(x - eta) + lambda |eta|_1 with
# the network frozen.  Dims with |eta_i| > 0.1 are reported, which tends to
# catch a few extra dims that merely absorb reconstruction slack.

# %%
ae, _ = train_ae(train_x, Rng(9), VaeConfig(activation="relu", dropout=False))
print(f"AE score {ae_anomaly_score(ae, row):.3f} vs threshold {ae.detect_threshold:.3f}")
res = ae_so_attribution(ae, row, lam=0.1, threshold=0.1)
print("sparse correction flags:", res.psi, f"after {res.n_iter} iterations")

# %%
pca = fit_pca(train_x, k=2)
print("explained variance:", np.round(pca.explained_variance, 3))
print(f"PCA residual score {pca_anomaly_score(pca, row):.2f} vs threshold {pca.detect_threshold:.2f}")
