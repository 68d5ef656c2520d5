"""Variational-autoencoder anomaly detection with per-dimension attribution."""

from .attribution import AttributionConfig, AttributionResult, attribute, explore_latent
from .baselines import AeModel, PcaModel, ae_so_attribution, fit_pca, pca_anomaly_score, train_ae, vae_rec_attribution
from .bench import BenchmarkConfig, BenchmarkReport, make_correlated_gaussian, run_benchmark
from .dataio import Dataset, fit_transform, load_csv, load_model, save_model, transform
from .numcore import Rng
from .vae import LatentGaussian, VaeConfig, VaeModel, anomaly_score, calibrate_thresholds, elbo, train

__version__ = "0.1.0"
