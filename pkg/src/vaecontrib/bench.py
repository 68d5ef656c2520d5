"""Synthetic-anomaly benchmark.

Each run: split the normal rows 90/10 into training and candidate rows, fit the
VAE and the autoencoder on the training part, pick a candidate whose ELBO is
above the training mean, corrupt ``M`` random eligible dimensions by setting
them to ``r`` with ``|r|`` in [3, 5] (standardised units), and score every
attribution method by false positives, false negatives and F1 against the
known corrupted set.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attribution import AttributionConfig, attribute
from .baselines import ae_so_attribution, train_ae, vae_rec_attribution
from .dataio import Dataset, canonical_json
from .numcore import Rng, derive_seed
from .vae import VaeConfig, VaeModel, calibrate_thresholds, elbo, train

log = logging.getLogger(__name__)

METHODS = ("proposed", "vae_rec", "ae_so")
DEFAULT_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)


def make_correlated_gaussian(n_rows: int = 2000, n_dims: int = 20, rank: int = 2,
                             noise: float = 0.5, seed: int = 0) -> np.ndarray:
    """Rows ``A z + noise * e`` with ``z ~ N(0, I_rank)`` and fixed random loadings ``A``."""
    g = np.random.Generator(np.random.PCG64(seed))
    loadings = g.standard_normal((n_dims, rank))
    z = g.standard_normal((n_rows, rank))
    return z @ loadings.T + noise * g.standard_normal((n_rows, n_dims))


@dataclass
class InjectionSpec:
    m: int
    eligible_dims: list
    r_ranges: tuple = ((3.0, 5.0), (-5.0, -3.0))
    additive: bool = False

    def __post_init__(self):
        if self.m < 0 or self.m > len(self.eligible_dims):
            raise ValueError(f"cannot corrupt {self.m} of {len(self.eligible_dims)} eligible dims")


def split_train_candidate(data, rng: Rng, train_frac: float = 0.9):
    """Uniform random partition; returns ``(train_idx, candidate_idx)``."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    n = len(data)
    n_train = int(round(train_frac * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} rows at {train_frac} leaves an empty part")
    order = rng.permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def pick_clean_test_point(model: VaeModel, candidates, rng: Rng):
    """Random candidate whose ELBO exceeds gamma; returns ``(row_index, x)``."""
    x = np.asarray(getattr(candidates, "matrix", candidates), dtype=np.float64)
    ok = np.flatnonzero(np.atleast_1d(elbo(model, x, rng)) > model.gamma)
    if ok.size == 0:
        raise RuntimeError("no candidate has ELBO above gamma; train longer or add data")
    i = int(ok[rng.integers(0, ok.size)])
    return i, x[i].copy()


def inject_anomaly(x, spec: InjectionSpec, rng: Rng):
    """Corrupt ``spec.m`` distinct eligible dims; returns ``(x_corrupted, truth)``."""
    x = np.array(x, dtype=np.float64, copy=True)
    if spec.m == 0:
        return x, []
    eligible = np.asarray(spec.eligible_dims)
    dims = eligible[rng.choice(eligible.size, spec.m)]
    for d in dims:
        lo, hi = spec.r_ranges[int(rng.integers(0, len(spec.r_ranges)))]
        r = float(rng.uniform(lo, hi))
        x[d] = x[d] + r if spec.additive else r
    return x, sorted(int(d) for d in dims)


def score_attribution(estimated, truth, n_dims: int | None = None):
    """``(fp, fn, f1)`` of an estimated dimension set against the truth."""
    est, tru = set(estimated), set(truth)
    if n_dims is not None and any(not 0 <= i < n_dims for i in est | tru):
        raise ValueError("indices out of range")
    tp = len(est & tru)
    fp = len(est - tru)
    fn = len(tru - est)
    if tp == 0:
        return fp, fn, 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return fp, fn, 2 * p * r / (p + r)


@dataclass
class BenchmarkConfig:
    ratios: tuple = DEFAULT_RATIOS
    n_runs: int = 20
    methods: tuple = METHODS
    train_frac: float = 0.9
    vae: VaeConfig = field(default_factory=VaeConfig)
    ae: VaeConfig = field(default_factory=lambda: VaeConfig(activation="relu"))
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    ae_so_lambda: float = 0.1
    ae_so_threshold: float = 0.1
    additive: bool = False
    # not faithful: one training on run 0's split shared by every run
    shared_models: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vae"] = self.vae.to_dict()
        d["ae"] = self.ae.to_dict()
        d["ratios"] = list(self.ratios)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "vae" in d:
            d["vae"] = VaeConfig.from_dict(d["vae"])
        if "ae" in d:
            d["ae"] = VaeConfig.from_dict(d["ae"])
        if "attribution" in d:
            d["attribution"] = AttributionConfig(**d["attribution"])
        for key in ("ratios", "methods"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class BenchmarkReport:
    records: list  # dicts: method, ratio, run, fp, fn, f1 (+ detected, m)
    seed: int
    config: dict
    run_seeds: list

    def summary(self) -> dict:
        """``{method: {ratio: {"fp", "fn", "f1"}}}`` of means over runs."""
        out = {}
        for method in self.config["methods"]:
            out[method] = {}
            for ratio in self.config["ratios"]:
                rows = [r for r in self.records if r["method"] == method and r["ratio"] == ratio]
                if rows:
                    out[method][ratio] = {k: float(np.mean([r[k] for r in rows])) for k in ("fp", "fn", "f1")}
        return out

    def to_json(self) -> str:
        summary = {m: {repr(r): v for r, v in by.items()} for m, by in self.summary().items()}
        return canonical_json({"seed": self.seed, "config": self.config, "run_seeds": self.run_seeds,
                               "n_runs": len(self.run_seeds), "records": self.records,
                               "summary": summary}) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "ratio", "run", "fp", "fn", "f1"])
        for r in self.records:
            w.writerow([r["method"], repr(float(r["ratio"])), r["run"], r["fp"], r["fn"], repr(float(r["f1"]))])
        return buf.getvalue()

    def to_markdown(self) -> str:
        ratios = self.config["ratios"]
        summ = self.summary()
        lines = ["| Method | Metric | " + " | ".join(f"{round(100 * r)}%" for r in ratios) + " |",
                 "|---|---|" + "---|" * len(ratios)]
        labels = {"fp": "# of FPs", "fn": "# of FNs", "f1": "F1"}
        for method in self.config["methods"]:
            for key, label in labels.items():
                cells = [f"{summ[method][r][key]:.3g}" if r in summ[method] else "-" for r in ratios]
                lines.append(f"| {method} | {label} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _standardise(x, train_idx, eligible):
    """Standardise continuous columns on the training rows; returns the matrix
    and the dims still eligible (non-constant on this training split)."""
    x = x.copy()
    tr = x[train_idx]
    keep = []
    for d in eligible:
        mean = tr[:, d].mean()
        std = tr[:, d].std()
        x[:, d] -= mean
        if std > 0:
            x[:, d] /= std
            keep.append(d)
    return x, keep


def _fit_models(x, train_idx, cfg: BenchmarkConfig, seed: int):
    tr = x[train_idx]
    models = {}
    if {"proposed", "vae_rec"} & set(cfg.methods):
        rng = Rng(derive_seed(seed, 1))
        vae = VaeModel.create(x.shape[1], cfg.vae, rng)
        train(vae, tr, rng)
        calibrate_thresholds(vae, tr, Rng(derive_seed(seed, 2)))
        models["vae"] = vae
    if "ae_so" in cfg.methods:
        ae, _ = train_ae(tr, Rng(derive_seed(seed, 3)), cfg.ae)
        models["ae"] = ae
    return models


def run_single(x, eligible, cfg: BenchmarkConfig, run: int, run_seed: int, shared=None) -> list:
    """All ratios and methods for one run; returns record dicts."""
    rng = Rng(derive_seed(run_seed, 0))
    train_idx, cand_idx = split_train_candidate(np.arange(x.shape[0]), rng, cfg.train_frac)
    if shared is not None:
        xs, elig, models = shared
    else:
        xs, elig = _standardise(x, train_idx, eligible)
        models = _fit_models(xs, train_idx, cfg, run_seed)
    # ELBO-based selection needs the VAE; AE-only runs pick uniformly
    pick_rng = Rng(derive_seed(run_seed, 4))
    if "vae" in models:
        _, x_clean = pick_clean_test_point(models["vae"], xs[cand_idx], pick_rng)
    else:
        x_clean = xs[cand_idx[pick_rng.integers(0, cand_idx.size)]].copy()
    records = []
    for ri, ratio in enumerate(cfg.ratios):
        m = int(math.floor(ratio * len(elig) + 0.5))
        spec = InjectionSpec(m, elig, additive=cfg.additive)
        x_bad, truth = inject_anomaly(x_clean, spec, Rng(derive_seed(run_seed, 10, ri)))
        for mi, method in enumerate(cfg.methods):
            mrng = Rng(derive_seed(run_seed, 20, ri, mi))
            if method == "proposed":
                psi = attribute(models["vae"], x_bad, mrng, cfg.attribution).psi
            elif method == "vae_rec":
                psi = vae_rec_attribution(models["vae"], x_bad, mrng)[0]
            elif method == "ae_so":
                psi = ae_so_attribution(models["ae"], x_bad, cfg.ae_so_lambda, cfg.ae_so_threshold).psi
            else:
                raise ValueError(f"unknown method {method!r}")
            fp, fn, f1 = score_attribution(psi, truth, x.shape[1])
            records.append({"method": method, "ratio": float(ratio), "run": run, "m": m,
                            "fp": fp, "fn": fn, "f1": f1, "truth": truth, "psi": list(psi)})
    return records


def _run_task(args):
    return run_single(*args)


def run_benchmark(data, config: BenchmarkConfig | None = None, seed: int = 0, workers: int = 1,
                  ratios=None, n_runs=None, methods=None) -> BenchmarkReport:
    """Run the full protocol.  Results depend only on ``(data, config, seed)``;
    run ``i`` uses a seed derived from ``(seed, i)`` regardless of scheduling."""
    cfg = replace(config) if config is not None else BenchmarkConfig()
    if ratios is not None:
        cfg.ratios = tuple(ratios)
    if n_runs is not None:
        cfg.n_runs = n_runs
    if methods is not None:
        cfg.methods = tuple(methods)
    unknown = set(cfg.methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if isinstance(data, Dataset):
        x, eligible = data.matrix, data.eligible_dims
    else:
        x = np.asarray(data, dtype=np.float64)
        eligible = list(range(x.shape[1]))
    run_seeds = [derive_seed(seed, run) for run in range(cfg.n_runs)]

    shared = None
    if cfg.shared_models:
        rng = Rng(derive_seed(run_seeds[0], 0))
        train_idx, _ = split_train_candidate(np.arange(x.shape[0]), rng, cfg.train_frac)
        xs, elig = _standardise(x, train_idx, eligible)
        shared = (xs, elig, _fit_models(xs, train_idx, cfg, run_seeds[0]))

    tasks = [(x, eligible, cfg, run, s, shared) for run, s in enumerate(run_seeds)]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for run, recs in enumerate(pool.map(_run_task, tasks)):
                results.append(recs)
    else:
        for run, task in enumerate(tasks):
            try:
                results.append(_run_task(task))
            except Exception as exc:
                raise RuntimeError(f"benchmark run {run} failed: {exc}") from exc
            log.info("run %d done", run)
    records = [r for recs in results for r in recs]
    return BenchmarkReport(records, seed, cfg.to_dict(), run_seeds)
