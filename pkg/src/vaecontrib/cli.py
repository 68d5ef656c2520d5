"""Command-line entry point: ``train``, ``detect``, ``attribute``, ``benchmark``.

Data goes to files under ``--out``; diagnostics go to stderr.  Every command
is a function of (config file, input files, seed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attribution import AttributionConfig, attribute, contribution_degree, initial_latent
from .baselines import ae_anomaly_score, ae_so_attribution, train_ae, vae_rec_attribution
from .bench import BenchmarkConfig, run_benchmark
from .dataio import (
    canonical_json,
    fit_transform,
    load_csv,
    load_model,
    load_schema,
    save_model,
    transform,
    write_attribution_report,
)
from .numcore import Rng, derive_seed
from .vae import VaeConfig, VaeModel, anomaly_score, calibrate_thresholds, train

log = logging.getLogger("vaecontrib")


@dataclass
class RunConfig:
    seed: int = 0
    vae: VaeConfig = field(default_factory=VaeConfig)
    ae: VaeConfig = field(default_factory=lambda: VaeConfig(activation="relu"))
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    benchmark: dict = field(default_factory=dict)
    schema: str | None = None
    ae_so_lambda: float = 0.1
    ae_so_threshold: float = 0.1

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        cfg.seed = int(d.get("seed", cfg.seed))
        if "vae" in d:
            cfg.vae = VaeConfig.from_dict(d["vae"])
        if "ae" in d:
            cfg.ae = VaeConfig.from_dict({"activation": "relu", **d["ae"]})
        if "attribution" in d:
            cfg.attribution = AttributionConfig(**d["attribution"])
        cfg.benchmark = dict(d.get("benchmark", {}))
        cfg.schema = d.get("schema")
        cfg.ae_so_lambda = float(d.get("ae_so_lambda", cfg.ae_so_lambda))
        cfg.ae_so_threshold = float(d.get("ae_so_threshold", cfg.ae_so_threshold))
        return cfg


def _setup(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "no_dropout", False):
        cfg.vae.dropout = False
        cfg.ae.dropout = False
    return cfg


def _read(path, cfg: RunConfig):
    schema = load_schema(cfg.schema) if cfg.schema else None
    return load_csv(path, schema)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _setup(args)
    raw = _read(args.data, cfg)
    ds, stats = fit_transform(raw)
    out = _out(args)
    rng = Rng(derive_seed(cfg.seed, 1))
    vae = VaeModel.create(ds.n_dims, cfg.vae, rng)
    _, losses = train(vae, ds, rng)
    gamma, beta, thr = calibrate_thresholds(vae, ds, Rng(derive_seed(cfg.seed, 2)))
    save_model(vae, out / "model.json", stats)
    ae, ae_losses = train_ae(ds, Rng(derive_seed(cfg.seed, 3)), cfg.ae)
    save_model(ae, out / "ae_model.json", stats)
    (out / "train_log.json").write_text(canonical_json({
        "seed": cfg.seed, "n_rows": len(ds), "input_dim": ds.n_dims, "latent_dim": vae.latent_dim,
        "vae_loss": losses, "ae_loss": ae_losses,
        "calibration": {"gamma": gamma, "beta": beta, "detect_threshold": thr,
                        "ae_detect_threshold": ae.detect_threshold}}) + "\n", encoding="utf-8")
    log.info("trained on %d rows x %d dims; gamma=%.4f beta=%.4g threshold=%.4f",
             len(ds), ds.n_dims, gamma, beta, thr)
    return 0


def _load_vae(path):
    model, stats, _ = load_model(path)
    if not isinstance(model, VaeModel):
        raise ValueError(f"{path} does not hold a VAE model")
    if stats is None:
        raise ValueError(f"{path} has no fitted column statistics")
    return model, stats


def cmd_detect(args) -> int:
    cfg = _setup(args)
    model, stats = _load_vae(args.model)
    ds = transform(_read(args.data, cfg), stats)
    scores = np.atleast_1d(anomaly_score(model, ds.matrix, Rng(derive_seed(cfg.seed, 5))))
    flags = scores > model.detect_threshold
    out = _out(args)
    rows = [{"point_id": i, "anomaly_score": float(s), "detected": bool(f)}
            for i, (s, f) in enumerate(zip(scores, flags))]
    (out / "scores.json").write_text(canonical_json({
        "detect_threshold": model.detect_threshold, "n_rows": len(rows),
        "n_detected": int(flags.sum()), "rows": rows}) + "\n", encoding="utf-8")
    with (out / "scores.csv").open("w", encoding="utf-8") as fh:
        fh.write("point_id,anomaly_score,detected\n")
        for r in rows:
            fh.write(f"{r['point_id']},{r['anomaly_score']!r},{int(r['detected'])}\n")
    log.info("%d of %d rows above threshold %.4f", flags.sum(), len(rows), model.detect_threshold)
    return 0


def cmd_attribute(args) -> int:
    cfg = _setup(args)
    method = args.method
    model, stats = _load_vae(args.model)
    ae = None
    if method == "ae_so":
        if not args.ae_model:
            raise ValueError("--method ae_so needs --ae-model")
        ae = load_model(args.ae_model)[0]
    ds = transform(_read(args.data, cfg), stats)
    records = []
    for i, x in enumerate(ds.matrix):
        rng = Rng(derive_seed(cfg.seed, 6, i))
        if method == "ae_so":
            score = ae_anomaly_score(ae, x)
            detected = score > ae.detect_threshold
        else:
            score = float(anomaly_score(model, x, Rng(derive_seed(cfg.seed, 5, i))))
            detected = score > model.detect_threshold
        rec = {"point_id": i, "anomaly_score": float(score), "detected": bool(detected),
               "method": method, "psi": [], "contribution_degrees": None,
               "final_k": None, "converged": None}
        if not detected:
            rec.update(status="skipped", reason="below detection threshold")
            records.append(rec)
            continue
        if method == "proposed":
            res = attribute(model, x, rng, cfg.attribution)
            rec.update(psi=res.psi, contribution_degrees=res.contribution_degrees.tolist(),
                       final_k=res.final_k, converged=res.converged)
        elif method == "vae_rec":
            psi, _ = vae_rec_attribution(model, x, rng)
            # reuse the threshold test's noise, as the proposed method does
            deg = contribution_degree(model, x, initial_latent(model, x), Rng(derive_seed(cfg.seed, 6, i)))
            rec.update(psi=psi, contribution_degrees=deg.tolist(), final_k=len(psi))
        else:
            res = ae_so_attribution(ae, x, cfg.ae_so_lambda, cfg.ae_so_threshold)
            rec.update(psi=res.psi, contribution_degrees=res.eta.tolist(), converged=res.converged)
        rec["status"] = "attributed" if rec["psi"] else "empty"
        records.append(rec)
    out = _out(args)
    write_attribution_report(records, out / "attribution.json", out / "attribution.csv",
                             [c.name for c in stats.columns])
    n_att = sum(r["status"] != "skipped" for r in records)
    log.info("%s: attributed %d of %d rows", method, n_att, len(records))
    return 0


def cmd_benchmark(args) -> int:
    cfg = _setup(args)
    raw = _read(args.data, cfg)
    ds, _ = fit_transform(raw)
    bcfg = BenchmarkConfig.from_dict(cfg.benchmark)
    bcfg.vae, bcfg.ae, bcfg.attribution = cfg.vae, cfg.ae, cfg.attribution
    bcfg.ae_so_lambda, bcfg.ae_so_threshold = cfg.ae_so_lambda, cfg.ae_so_threshold
    report = run_benchmark(ds, bcfg, seed=cfg.seed, workers=args.workers)
    out = _out(args)
    (out / "benchmark.json").write_text(report.to_json(), encoding="utf-8")
    (out / "benchmark.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "benchmark.md").write_text(report.to_markdown(), encoding="utf-8")
    log.info("benchmark finished: %d records", len(report.records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaecontrib", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("train", help="train and calibrate the VAE (and the AE baseline)")
    sp.add_argument("data")
    sp.add_argument("--no-dropout", action="store_true", help="disable dropout in both models")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("detect", help="score rows and flag anomalies")
    sp.add_argument("model")
    sp.add_argument("data")
    common(sp)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("attribute", help="estimate contributing dimensions of detected rows")
    sp.add_argument("model")
    sp.add_argument("data")
    sp.add_argument("--method", choices=("proposed", "vae_rec", "ae_so"), default="proposed")
    sp.add_argument("--ae-model", help="AE model file (for --method ae_so)")
    common(sp)
    sp.set_defaults(func=cmd_attribute)

    sp = sub.add_parser("benchmark", help="synthetic-anomaly benchmark on normal data")
    sp.add_argument("data")
    sp.add_argument("--no-dropout", action="store_true")
    sp.add_argument("--workers", type=int, default=1)
    common(sp)
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
