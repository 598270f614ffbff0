"""Readers and writers for results, posterior draws and plot-ready tables.

Every writer produces byte-identical files for identical inputs: floats are
written with ``repr`` (shortest round-trip form), rows keep their input
order and nothing time-dependent is recorded.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ._validation import SchemaError
from .frequentist import TestResult

RESULTS_SCHEMA = "dipper-results/1"
RESULTS_COLUMNS = (
    "feature_id", "method", "estimate", "se", "ci_low", "ci_high", "p", "q", "significant",
)
DRAWS_SCHEMA = "dipper-draws/1"
LONG_COLUMNS = ("method", "metric", "value", "dataset")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


def _parse(text):
    return None if text == "" else float(text)


def write_results(results, path) -> None:
    """Results TSV: a ``#schema`` line followed by the shared columns."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"#schema={RESULTS_SCHEMA}\n")
        fh.write("\t".join(RESULTS_COLUMNS) + "\n")
        for r in results:
            row = [str(r.feature_id), r.method] + [
                _fmt(getattr(r, c)) for c in RESULTS_COLUMNS[2:]
            ]
            fh.write("\t".join(row) + "\n")


def read_results(path) -> list:
    """Parse and validate a results TSV written by :func:`write_results`.

    Raises
    ------
    SchemaError
        On a missing or unknown schema line, wrong columns or bad values.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != f"#schema={RESULTS_SCHEMA}":
            raise SchemaError(f"{path}: expected schema line '#schema={RESULTS_SCHEMA}'")
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != RESULTS_COLUMNS:
            raise SchemaError(f"{path}: columns {header} do not match {list(RESULTS_COLUMNS)}")
        out = []
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(RESULTS_COLUMNS):
                raise SchemaError(f"{path}:{lineno}: expected {len(RESULTS_COLUMNS)} fields")
            try:
                vals = [_parse(v) for v in row[2:8]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if row[8] not in ("true", "false"):
                raise SchemaError(f"{path}:{lineno}: significant must be true/false")
            for name, v in zip(("p", "q"), vals[4:6]):
                if v is not None and not 0.0 <= v <= 1.0:
                    raise SchemaError(f"{path}:{lineno}: {name} outside [0, 1]")
            out.append(TestResult(row[0], row[1], *vals, significant=row[8] == "true"))
    return out


def write_draws(path, feature_ids, beta_draws) -> None:
    """Group-effect draws in long format: chain, iteration, parameter, value.

    ``beta_draws`` has shape ``(chains, draws, K)``.
    """
    beta_draws = np.asarray(beta_draws, dtype=float)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"#schema={DRAWS_SCHEMA}\n")
        fh.write("chain\titeration\tparameter\tvalue\n")
        for c in range(beta_draws.shape[0]):
            for t in range(beta_draws.shape[1]):
                fh.writelines(
                    f"{c}\t{t}\t{f}\t{float(beta_draws[c, t, j])!r}\n"
                    for j, f in enumerate(feature_ids)
                )


def read_draws(path):
    """Inverse of :func:`write_draws`; returns ``(feature_ids, draws)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        if fh.readline().rstrip("\n") != f"#schema={DRAWS_SCHEMA}":
            raise SchemaError(f"{path}: not a draws file")
        reader = csv.reader(fh, delimiter="\t")
        if next(reader, None) != ["chain", "iteration", "parameter", "value"]:
            raise SchemaError(f"{path}: bad draws header")
        rows = list(reader)
    fids = list(dict.fromkeys(r[2] for r in rows))
    chains = 1 + max(int(r[0]) for r in rows) if rows else 0
    iters = 1 + max(int(r[1]) for r in rows) if rows else 0
    if len(rows) != chains * iters * len(fids):
        raise SchemaError(f"{path}: incomplete draws table")
    vals = np.array([float(r[3]) for r in rows]).reshape(chains, iters, len(fids))
    return fids, vals


def write_long(rows, path) -> None:
    """Plot-ready long table with columns method, metric, value, dataset."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(LONG_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r[0]}\t{r[1]}\t{_fmt(r[2])}\t{r[3]}\n")


def to_jsonable(obj):
    """Recursively convert numpy values; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=1, sort_keys=True) + "\n")
