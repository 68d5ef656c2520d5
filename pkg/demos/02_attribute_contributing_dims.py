# %% [markdown]
# # Which dimensions made this row anomalous?
#
# Take a normal row, push two dimensions to +4 standard deviations, and ask
# both the encoder-posterior baseline and the latent-exploration method which
# dimensions are to blame.

# %%
import numpy as np

from vaecontrib import Rng, VaeConfig, VaeModel, attribute, calibrate_thresholds, train
from vaecontrib.baselines import vae_rec_attribution
from vaecontrib.bench import make_correlated_gaussian, pick_clean_test_point

x = make_correlated_gaussian(2000, 20, rank=2, noise=0.5, seed=0)
train_x, test_x = x[:1800], x[1800:]
mean, std = train_x.mean(0), train_x.std(0)
train_x, test_x = (train_x - mean) / std, (test_x - mean) / std

rng = Rng(7)
model = VaeModel.create(20, VaeConfig(dropout=False), rng)
train(model, train_x, rng)
calibrate_thresholds(model, train_x, Rng(8))

# %%
_, row = pick_clean_test_point(model, test_x, Rng(3))
row[[4, 13]] = 4.0

baseline, _ = vae_rec_attribution(model, row, Rng(5))
print("encoder-posterior baseline:", baseline)

# %% [markdown]
# The exploration re-fits the latent Gaussian while ignoring the K least
# likely dimensions, growing K until the fit looks like a normal row.  The
# corrupted dims then stand out because the decoder no longer bends towards
# them.

# %%
res = attribute(model, row, Rng(5))
print("latent exploration:", res.psi)
print(f"K went from {res.initial_k} to {res.final_k}; converged={res.converged}")

order = np.argsort(-np.abs(res.contribution_degrees))
for d in order[:4]:
    print(f"  dim {d:2d}: degree {res.contribution_degrees[d]:+.2f}")
