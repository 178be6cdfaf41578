"""CSV ingestion/export, result tables and key-value metadata sidecars."""
from __future__ import annotations

import configparser
import csv
import math
from pathlib import Path

import numpy as np

from .model import DataError, PooledDataset


def _parse_float(cell: str, row: int, col: str) -> float:
    s = cell.strip()
    if s == "" or s.lower() in ("na", "nan", "null", "none"):
        raise DataError(f"missing value at row {row}, column {col!r}")
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value {cell!r} at row {row}, column {col!r}")
    return v


def _label_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def ingest_csv(path, treatment_column: str, outcome_column: str) -> PooledDataset:
    """Read a header-row CSV; every column other than treatment and outcome is a covariate.

    Treatment values are mapped to ``0..q-1`` in sorted order (numerically
    when all values parse as numbers); the raw values are kept in
    ``PooledDataset.labels`` and the covariate names in ``columns``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for name in (treatment_column, outcome_column):
        if name not in header:
            raise DataError(f"{path}: column {name!r} not found in header")
    if treatment_column == outcome_column:
        raise DataError("treatment and outcome columns must differ")
    ti, yi = header.index(treatment_column), header.index(outcome_column)
    cov_idx = [i for i in range(len(header)) if i not in (ti, yi)]
    if not cov_idx:
        raise DataError(f"{path}: no covariate columns")
    X = np.empty((len(rows), len(cov_idx)))
    y = np.empty(len(rows))
    raw_t = []
    for r, rec in enumerate(rows, start=2):
        if len(rec) != len(header):
            raise DataError(f"row {r} has {len(rec)} fields, expected {len(header)}")
        t = rec[ti].strip()
        if t == "":
            raise DataError(f"missing value at row {r}, column {treatment_column!r}")
        raw_t.append(t)
        y[r - 2] = _parse_float(rec[yi], r, outcome_column)
        for c, i in enumerate(cov_idx):
            X[r - 2, c] = _parse_float(rec[i], r, header[i])
    if all(_label_key(v)[0] == 0 for v in raw_t):
        # numeric labels: "1" and "1.0" are the same level
        vals = [float(v) for v in raw_t]
        levels = sorted(set(vals))
        index = {v: j for j, v in enumerate(levels)}
        t = np.array([index[v] for v in vals], dtype=np.int64)
        labels = tuple(_fmt_label(v) for v in levels)
    else:
        levels = sorted(set(raw_t), key=_label_key)
        index = {v: j for j, v in enumerate(levels)}
        t = np.array([index[v] for v in raw_t], dtype=np.int64)
        labels = tuple(levels)
    if len(levels) < 2:
        raise DataError("treatment column has a single level")
    return PooledDataset(X, t, y, q=len(levels), columns=tuple(header[i] for i in cov_idx), labels=labels)


def _fmt_label(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(v)


def fmt(v) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def export_csv(data: PooledDataset, path, treatment_column: str = "t", outcome_column: str = "y") -> None:
    names = data.column_names()
    labels = data.labels or tuple(str(j) for j in range(data.q))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([treatment_column, outcome_column, *names])
        for i in range(data.n):
            w.writerow([labels[data.treatment[i]], fmt(data.outcome[i]), *map(fmt, data.covariates[i])])


def write_table(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def metadata_path(result_path) -> Path:
    p = Path(result_path)
    return p.with_name(p.name + ".meta")


def _flat(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(fmt(x) for x in v)
    if v is None:
        return ""
    return fmt(v)


def write_metadata(path, config: dict, run: dict | None = None) -> None:
    """Key-value sidecar: ``[config]`` holds every resolved option (re-runnable
    via ``--config``), ``[run]`` holds provenance and derived values."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["config"] = {k: _flat(v) for k, v in config.items()}
    cp["run"] = {k: _flat(v) for k, v in (run or {}).items()}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def read_metadata(path) -> tuple[dict, dict]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    cfg = dict(cp["config"]) if cp.has_section("config") else dict(cp.defaults())
    run = dict(cp["run"]) if cp.has_section("run") else {}
    return cfg, run


def write_support(path, support, names=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in support:
            fh.write(f"{names[i] if names else i}\n")


def read_support(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def write_synth_truth(path, draw) -> None:
    """Ground-truth sidecar for a synthetic draw (support, coefficients, effects)."""
    q = draw.true_theta.shape[1]
    run = {
        "support": list(draw.true_support.indices),
        "p": draw.true_theta.shape[0],
        "q": q,
    }
    for j in range(q):
        run[f"theta_col{j}"] = draw.true_theta[:, j].tolist()
    for (t, s), v in sorted(draw.true_ate.items()):
        if t != s:
            run[f"ate_{t}_{s}"] = v
            run[f"sample_ate_{t}_{s}"] = draw.sample_ate[(t, s)]
    write_metadata(path, {}, run)
