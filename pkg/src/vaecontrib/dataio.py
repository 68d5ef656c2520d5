"""CSV ingestion, standardisation / one-hot encoding, and JSON persistence.

Model files are canonical JSON: keys sorted, floats written with 17
significant digits, so a save -> load -> save cycle is byte-identical and every
float64 round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neural import Layer, Mlp
from .vae import VaeConfig, VaeModel

SCHEMA_VERSION = 1
COLUMN_ROLES = ("numeric", "symbolic", "ignore", "label")


class DataError(ValueError):
    pass


class EmptyInputError(DataError):
    pass


class ModelFileError(ValueError):
    pass


@dataclass
class RawTable:
    names: list  # feature columns in file order
    kinds: dict  # name -> "numeric" | "symbolic"
    values: dict  # name -> np.ndarray (float) or list[str]
    labels: list | None = None
    n_rows: int = 0

    def categories(self, name: str) -> list:
        seen = {}
        for v in self.values[name]:
            seen.setdefault(v, None)
        return list(seen)


@dataclass
class ColumnMeta:
    name: str
    kind: str  # "continuous" | "onehot"
    source_column: str
    mean: float = 0.0
    std: float = 1.0
    constant: bool = False
    onehot_group: int | None = None
    category: str | None = None

    @property
    def eligible(self) -> bool:
        """Usable as an injection target: continuous and non-constant."""
        return self.kind == "continuous" and not self.constant


@dataclass
class FittedStats:
    source_columns: list  # (name, kind) of raw feature columns in order
    columns: list  # ColumnMeta for every output dimension
    categories: dict  # symbolic column -> categories in first-appearance order

    def to_dict(self) -> dict:
        return {
            "source_columns": [list(c) for c in self.source_columns],
            "columns": [vars(c).copy() for c in self.columns],
            "categories": {k: list(v) for k, v in self.categories.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedStats":
        cols = []
        for c in d["columns"]:
            c = dict(c)
            c["mean"] = float(c["mean"])
            c["std"] = float(c["std"])
            cols.append(ColumnMeta(**c))
        return cls([tuple(c) for c in d["source_columns"]], cols, dict(d["categories"]))


@dataclass
class Dataset:
    matrix: np.ndarray
    columns: list = field(default_factory=list)
    labels: list | None = None
    unseen_categories: int = 0

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_dims(self) -> int:
        return self.matrix.shape[1]

    @property
    def eligible_dims(self) -> list:
        if not self.columns:
            return list(range(self.n_dims))
        return [i for i, c in enumerate(self.columns) if c.eligible]

    def subset(self, rows) -> "Dataset":
        labels = None if self.labels is None else [self.labels[i] for i in rows]
        return Dataset(self.matrix[rows], self.columns, labels)


def load_schema(path) -> dict:
    schema = json.loads(Path(path).read_text(encoding="utf-8"))
    bad = {k: v for k, v in schema.items() if v not in COLUMN_ROLES}
    if bad:
        raise DataError(f"unknown column roles in schema: {bad}")
    return schema


def _parse_float(cell: str):
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_csv(path, schema: dict | None = None) -> RawTable:
    """Read a headed, comma-separated UTF-8 file.

    Without a schema, a column is numeric when every cell parses as a float
    and symbolic otherwise.  Empty or unparseable numeric cells are errors.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise EmptyInputError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    if not body:
        raise EmptyInputError(f"{path}: header but no data rows")
    ragged = [i + 2 for i, r in enumerate(body) if len(r) != len(header)]
    if ragged:
        raise DataError(f"{path}: rows with wrong field count at lines {ragged[:10]}")
    schema = schema or {}
    missing = set(schema) - set(header)
    if missing:
        raise DataError(f"schema names columns not in the file: {sorted(missing)}")

    names, kinds, values, labels = [], {}, {}, None
    for j, name in enumerate(header):
        cells = [r[j].strip() for r in body]
        role = schema.get(name)
        if role == "ignore":
            continue
        if role == "label":
            labels = cells
            continue
        parsed = [_parse_float(c) for c in cells]
        if role is None:
            role = "numeric" if all(p is not None for p in parsed) else "symbolic"
        if role == "numeric":
            bad = [i + 2 for i, p in enumerate(parsed) if p is None]
            if bad:
                raise DataError(f"{path}: column {name!r} has missing/non-numeric cells at lines {bad[:10]}")
            values[name] = np.asarray(parsed, dtype=np.float64)
        else:
            if any(c == "" for c in cells):
                raise DataError(f"{path}: column {name!r} has empty cells")
            values[name] = cells
        names.append(name)
        kinds[name] = role
    return RawTable(names, kinds, values, labels, len(body))


def table_from_array(x, names=None) -> RawTable:
    x = np.asarray(x, dtype=np.float64)
    names = names or [f"x{i}" for i in range(x.shape[1])]
    return RawTable(list(names), {n: "numeric" for n in names},
                    {n: x[:, j].copy() for j, n in enumerate(names)}, None, x.shape[0])


def fit_transform(raw: RawTable):
    """Fit standardisation and one-hot encoding on ``raw``; returns ``(Dataset, stats)``.

    Continuous columns use the population standard deviation; constant columns
    are only centred.  Categories are ordered by first appearance.
    """
    if raw.n_rows == 0 or not raw.names:
        raise EmptyInputError("cannot fit on an empty table")
    columns, categories = [], {}
    group = 0
    for name in raw.names:
        if raw.kinds[name] == "numeric":
            v = raw.values[name]
            mean = float(v.mean())
            std = float(v.std())
            constant = std == 0.0
            columns.append(ColumnMeta(name, "continuous", name, mean, 1.0 if constant else std, constant))
        else:
            cats = raw.categories(name)
            categories[name] = cats
            for c in cats:
                columns.append(ColumnMeta(f"{name}={c}", "onehot", name, 0.0, 1.0, False, group, c))
            group += 1
    stats = FittedStats([(n, raw.kinds[n]) for n in raw.names], columns, categories)
    return transform(raw, stats), stats


def transform(raw: RawTable, stats: FittedStats) -> Dataset:
    """Apply frozen statistics.  Unseen categories encode as an all-zero group."""
    expected = [n for n, _ in stats.source_columns]
    if raw.names != expected:
        raise DataError(f"column mismatch: expected {expected}, got {raw.names}")
    for n, kind in stats.source_columns:
        if raw.kinds[n] != kind:
            raise DataError(f"column {n!r} is {raw.kinds[n]}, model expects {kind}")
    out = np.zeros((raw.n_rows, len(stats.columns)))
    unseen = 0
    j = 0
    for name, kind in stats.source_columns:
        if kind == "numeric":
            meta = stats.columns[j]
            out[:, j] = (raw.values[name] - meta.mean) / meta.std
            j += 1
        else:
            cats = stats.categories[name]
            index = {c: i for i, c in enumerate(cats)}
            for r, v in enumerate(raw.values[name]):
                i = index.get(v)
                if i is None:
                    unseen += 1
                else:
                    out[r, j + i] = 1.0
            j += len(cats)
    if unseen:
        warnings.warn(f"{unseen} unseen categorical values encoded as all-zero groups")
    return Dataset(out, stats.columns, raw.labels, unseen)


# -- canonical JSON -------------------------------------------------------------------


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        return "null"
    return format(v, ".17g")


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, 17-significant-digit floats."""
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}:{canonical_json(v)}" for k, v in sorted(obj.items()))
        return "{" + ",".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return canonical_json(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _float(v) -> float:
    return float("nan") if v is None else float(v)


def _mlp_to_dict(net: Mlp) -> list:
    return [{"activation": l.activation, "dropout": l.dropout,
             "weight": l.weight, "bias": l.bias} for l in net.layers]


def _mlp_from_dict(layers) -> Mlp:
    return Mlp([Layer(np.array(l["weight"], dtype=np.float64).reshape(len(l["weight"]), -1),
                      np.array(l["bias"], dtype=np.float64), l["activation"], float(l["dropout"]))
                for l in layers])


def model_to_dict(model, stats: FittedStats | None = None, extra: dict | None = None) -> dict:
    from .baselines import AeModel

    doc = {"schema_version": SCHEMA_VERSION, "seed": model.seed,
           "config": model.config.to_dict(), "input_dim": model.input_dim,
           "calibration": {"detect_threshold": model.detect_threshold,
                           "train_score_mean": model.train_score_mean,
                           "train_score_std": model.train_score_std},
           "stats": stats.to_dict() if stats is not None else None}
    if isinstance(model, AeModel):
        doc["kind"] = "ae"
        doc["net"] = _mlp_to_dict(model.net)
    else:
        doc["kind"] = "vae"
        doc["latent_dim"] = model.latent_dim
        doc["calibration"].update(gamma=model.gamma, beta=model.beta)
        doc["encoder"] = _mlp_to_dict(model.encoder)
        doc["decoder"] = _mlp_to_dict(model.decoder)
    if extra:
        doc["extra"] = extra
    return doc


def model_from_dict(doc: dict):
    """Inverse of :func:`model_to_dict`; returns ``(model, stats, extra)``."""
    from .baselines import AeModel

    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ModelFileError(f"unsupported schema_version {doc.get('schema_version')!r}")
    try:
        config = VaeConfig.from_dict(doc["config"])
        cal = doc["calibration"]
        stats = FittedStats.from_dict(doc["stats"]) if doc.get("stats") else None
        if doc["kind"] == "ae":
            model = AeModel(_mlp_from_dict(doc["net"]), int(doc["input_dim"]), config, seed=doc["seed"])
        elif doc["kind"] == "vae":
            model = VaeModel(_mlp_from_dict(doc["encoder"]), _mlp_from_dict(doc["decoder"]),
                             int(doc["input_dim"]), int(doc["latent_dim"]), config,
                             gamma=_float(cal["gamma"]), beta=_float(cal["beta"]), seed=doc["seed"])
        else:
            raise ModelFileError(f"unknown model kind {doc['kind']!r}")
        model.detect_threshold = _float(cal["detect_threshold"])
        model.train_score_mean = _float(cal["train_score_mean"])
        model.train_score_std = _float(cal["train_score_std"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"corrupt model document: {exc!r}") from exc
    return model, stats, doc.get("extra")


def save_model(model, path, stats: FittedStats | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(canonical_json(model_to_dict(model, stats, extra)) + "\n", encoding="utf-8")
    return path


def load_model(path):
    """Returns ``(model, stats, extra)``; raises :class:`ModelFileError` on bad files."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not valid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise ModelFileError(f"{path}: expected a JSON object")
    return model_from_dict(doc)


# -- attribution reports -------------------------------------------------------------

REPORT_FIELDS = ("point_id", "anomaly_score", "detected", "status", "psi",
                 "contribution_degrees", "final_k", "converged")


def write_attribution_report(records: list, json_path, csv_path=None, dim_names=None):
    """Write attribution records as JSON and optionally a flat CSV.

    The CSV has one row per point; ``psi`` is ``;``-joined and each
    contribution degree gets its own column.
    """
    Path(json_path).write_text(canonical_json(records) + "\n", encoding="utf-8")
    if csv_path is None:
        return
    n = max((len(r.get("contribution_degrees") or []) for r in records), default=0)
    dim_names = dim_names or [f"d{i}" for i in range(n)]
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "anomaly_score", "detected", "status", "final_k", "converged", "psi",
                    *[f"degree[{d}]" for d in dim_names]])
        for r in records:
            degrees = r.get("contribution_degrees") or []
            w.writerow([r["point_id"], _fmt_float(r["anomaly_score"]), int(bool(r["detected"])),
                        r.get("status", ""), "" if r.get("final_k") is None else r["final_k"],
                        "" if r.get("converged") is None else int(bool(r["converged"])),
                        ";".join(str(i) for i in (r.get("psi") or [])),
                        *[_fmt_float(d) for d in degrees]])
