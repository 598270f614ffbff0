"""Observation tables, presence/absence derivation, design columns and null splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import DataError, SchemaError, ValidationError

__all__ = [
    "FeatureTable",
    "AnalysisInput",
    "NullSplitSpec",
    "ingest_table",
    "write_table",
    "derive_presence",
    "filter_features",
    "build_design",
    "prepare_input",
    "make_null_splits",
    "apply_null_split",
    "gaussian_response",
]

MIN_NULL_SAMPLES = 20
MIN_GROUP_SIZE = 10


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Samples x features observation matrix with per-sample metadata.

    ``counts`` may hold read counts or relative abundances; only ``counts > 0``
    matters for presence. ``covariates`` maps a covariate name to one value
    per sample.
    """

    sample_ids: list
    feature_ids: list
    counts: np.ndarray
    total_reads: np.ndarray
    group: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        total_reads = np.asarray(self.total_reads, dtype=float)
        group = np.asarray(self.group)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "total_reads", total_reads)
        object.__setattr__(
            self,
            "covariates",
            {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()},
        )
        n, k = len(self.sample_ids), len(self.feature_ids)
        if counts.shape != (n, k):
            raise ValidationError(
                f"counts has shape {counts.shape}, expected ({n}, {k})"
            )
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            i, j = np.argwhere(~(counts >= 0) | ~np.isfinite(counts))[0]
            raise ValidationError(
                f"count for sample {self.sample_ids[i]!r}, feature "
                f"{self.feature_ids[j]!r} is {float(counts[i, j])!r}; counts must be "
                "non-negative and finite"
            )
        if total_reads.shape != (n,):
            raise ValidationError("total_reads must have one value per sample")
        if not np.all(total_reads > 0):
            i = int(np.argmin(np.where(total_reads > 0, np.inf, 0)))
            raise ValidationError(
                f"total_reads must be strictly positive; sample "
                f"{self.sample_ids[i]!r} has {float(total_reads[i])!r}"
            )
        if group.shape != (n,):
            raise ValidationError("group must have one value per sample")
        if not np.all(np.isin(group, (0, 1))):
            raise ValidationError("group may only contain 0 (control) and 1 (case)")
        object.__setattr__(self, "group", group.astype(int))
        if len(set(self.feature_ids)) != k:
            seen = set()
            dup = next(f for f in self.feature_ids if f in seen or seen.add(f))
            raise ValidationError(f"duplicate feature id {dup!r}")
        for name, values in self.covariates.items():
            if values.shape != (n,):
                raise ValidationError(f"covariate {name!r} must have one value per sample")
            if not np.all(np.isfinite(values)):
                raise ValidationError(f"covariate {name!r} has non-finite values")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    def subset_samples(self, index) -> "FeatureTable":
        index = np.asarray(index)
        return FeatureTable(
            sample_ids=[self.sample_ids[i] for i in np.arange(self.n_samples)[index]],
            feature_ids=list(self.feature_ids),
            counts=self.counts[index],
            total_reads=self.total_reads[index],
            group=self.group[index],
            covariates={k: v[index] for k, v in self.covariates.items()},
        )

    def equals(self, other: "FeatureTable") -> bool:
        """Field-wise equality (exact for arrays)."""
        return (
            list(self.sample_ids) == list(other.sample_ids)
            and list(self.feature_ids) == list(other.feature_ids)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.total_reads, other.total_reads)
            and np.array_equal(self.group, other.group)
            and list(self.covariates) == list(other.covariates)
            and all(
                np.array_equal(v, other.covariates[k])
                for k, v in self.covariates.items()
            )
        )


@dataclass(frozen=True, eq=False)
class AnalysisInput:
    """Presence matrix plus per-sample design columns, ready for modelling."""

    presence: np.ndarray
    group: np.ndarray
    log_reads_centered: np.ndarray
    covariates_std: np.ndarray
    feature_ids: list
    covariate_names: list = field(default_factory=list)
    sample_ids: list | None = None

    @property
    def n_samples(self) -> int:
        return self.presence.shape[0]

    @property
    def n_features(self) -> int:
        return self.presence.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates_std.shape[1]

    def design_matrix(self) -> np.ndarray:
        """Per-sample design ``[group, centered log10 reads, covariates...]``."""
        return np.column_stack(
            [self.group.astype(float), self.log_reads_centered, self.covariates_std]
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "feature_ids": list(self.feature_ids),
                "sample_ids": None if self.sample_ids is None else list(self.sample_ids),
                "covariate_names": list(self.covariate_names),
                "presence": self.presence.astype(int).tolist(),
                "group": self.group.astype(int).tolist(),
                "log_reads_centered": self.log_reads_centered.tolist(),
                "covariates_std": self.covariates_std.tolist(),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "AnalysisInput":
        d = json.loads(text)
        n = len(d["group"])
        cov = np.asarray(d["covariates_std"], dtype=float).reshape(n, -1)
        return cls(
            presence=np.asarray(d["presence"], dtype=np.int8).reshape(n, -1),
            group=np.asarray(d["group"], dtype=int),
            log_reads_centered=np.asarray(d["log_reads_centered"], dtype=float),
            covariates_std=cov,
            feature_ids=list(d["feature_ids"]),
            covariate_names=list(d["covariate_names"]),
            sample_ids=d["sample_ids"],
        )


@dataclass(frozen=True)
class NullSplitSpec:
    source_id: str
    seed: int
    n_case: int
    n_control: int
    assignment: tuple
    balanced: bool


def _parse_float(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise DataError(
            f"cannot parse {text!r} as a number at row {row}, column {col!r}"
        ) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value {text!r} at row {row}, column {col!r}")
    return value


def ingest_table(
    path,
    format: str | None = None,
    group_col: str = "group",
    reads_col: str = "total_reads",
    covariates=(),
    id_col: str | None = None,
    delimiter: str | None = None,
    require_group: bool = True,
) -> FeatureTable:
    """Read a delimited table into a :class:`FeatureTable`.

    The first column holds sample identifiers unless ``id_col`` names another
    one. ``group_col``, ``reads_col`` and ``covariates`` are metadata; every
    other column is a feature. With ``require_group=False`` a missing group
    column is allowed and every sample gets group 0 (single-group tables
    for null benchmarks).
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "tsv"
    if format not in ("tsv", "csv"):
        raise ValueError(f"unknown table format {format!r}")
    if delimiter is None:
        delimiter = "," if format == "csv" else "\t"
    covariates = list(covariates)

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    rows = [r for r in rows if r]
    if not rows:
        raise SchemaError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if len(set(header)) != len(header):
        dup = next(h for h in header if header.count(h) > 1)
        raise SchemaError(f"duplicate column {dup!r} in header")
    id_name = header[0] if id_col is None else id_col
    has_group = group_col in header
    required = [(id_name, "sample id"), (reads_col, "total reads")]
    if require_group:
        required.insert(1, (group_col, "group"))
    for name, what in required:
        if name not in header:
            raise SchemaError(f"missing {what} column {name!r}")
    for name in covariates:
        if name not in header:
            raise SchemaError(f"missing covariate column {name!r}")
    meta = {id_name, reads_col, *covariates} | ({group_col} if has_group else set())
    feature_cols = [h for h in header if h not in meta]
    col_index = {h: i for i, h in enumerate(header)}

    sample_ids, group, reads = [], [], []
    cov_values = {c: [] for c in covariates}
    counts = np.empty((len(body), len(feature_cols)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(
                f"row {r} has {len(row)} fields, header has {len(header)}"
            )
        sample_ids.append(row[col_index[id_name]])
        g = _parse_float(row[col_index[group_col]], r, group_col) if has_group else 0.0
        if g not in (0.0, 1.0):
            raise ValidationError(f"group must be 0 or 1; row {r} has {g!r}")
        group.append(int(g))
        t = _parse_float(row[col_index[reads_col]], r, reads_col)
        if t <= 0:
            raise ValidationError(
                f"total reads must be positive; row {r}, column {reads_col!r} has {t!r}"
            )
        reads.append(t)
        for c in covariates:
            cov_values[c].append(_parse_float(row[col_index[c]], r, c))
        for j, name in enumerate(feature_cols):
            v = _parse_float(row[col_index[name]], r, name)
            if v < 0:
                raise ValidationError(
                    f"negative count {v!r} at row {r}, column {name!r}"
                )
            counts[r - 2, j] = v

    return FeatureTable(
        sample_ids=sample_ids,
        feature_ids=feature_cols,
        counts=counts,
        total_reads=np.asarray(reads),
        group=np.asarray(group),
        covariates={c: np.asarray(v) for c, v in cov_values.items()},
    )


def _fmt(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def write_table(
    table: FeatureTable,
    path,
    format: str = "tsv",
    group_col: str = "group",
    reads_col: str = "total_reads",
    id_col: str = "sample_id",
) -> None:
    """Write ``table`` in the layout :func:`ingest_table` reads back exactly."""
    delimiter = "," if format == "csv" else "\t"
    cov_names = list(table.covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([id_col, group_col, reads_col, *cov_names, *table.feature_ids])
        for i, sid in enumerate(table.sample_ids):
            w.writerow(
                [
                    sid,
                    str(int(table.group[i])),
                    _fmt(table.total_reads[i]),
                    *(_fmt(table.covariates[c][i]) for c in cov_names),
                    *(_fmt(v) for v in table.counts[i]),
                ]
            )


def derive_presence(table_or_counts) -> np.ndarray:
    """Presence indicator: 1 where the count is strictly positive."""
    counts = getattr(table_or_counts, "counts", table_or_counts)
    return (np.asarray(counts) > 0).astype(np.int8)


def filter_features(presence, min_present: int = 4, feature_ids=None):
    """Keep features present in at least ``min_present`` samples.

    Returns the reduced matrix and the kept feature ids (column indices when
    ``feature_ids`` is not given).
    """
    if min_present < 1:
        raise ValueError("min_present must be >= 1")
    presence = np.asarray(presence)
    if feature_ids is None:
        feature_ids = list(range(presence.shape[1]))
    keep = presence.sum(axis=0) >= min_present
    if not keep.any():
        raise DataError(
            f"no feature is present in at least {min_present} samples; "
            "review the filtering threshold"
        )
    return presence[:, keep], [f for f, k in zip(feature_ids, keep) if k]


def _is_binary(values: np.ndarray) -> bool:
    return bool(np.all(np.isin(values, (0.0, 1.0))))


def build_design(table: FeatureTable, presence=None, feature_ids=None) -> AnalysisInput:
    """Center log10 reads and standardize continuous covariates (ddof=1).

    Binary (0/1) covariates pass through unchanged.
    """
    log_reads = np.log10(table.total_reads)
    log_reads_centered = log_reads - log_reads.mean()
    cols = []
    for name, values in table.covariates.items():
        if _is_binary(values):
            cols.append(values.copy())
            continue
        sd = values.std(ddof=1) if len(values) > 1 else 0.0
        if not sd > 0:
            raise ValidationError(f"continuous covariate {name!r} is constant")
        cols.append((values - values.mean()) / sd)
    n = table.n_samples
    cov = np.column_stack(cols) if cols else np.empty((n, 0))
    if presence is None:
        presence = derive_presence(table)
        feature_ids = list(table.feature_ids)
    return AnalysisInput(
        presence=np.asarray(presence, dtype=np.int8),
        group=table.group.copy(),
        log_reads_centered=log_reads_centered,
        covariates_std=cov,
        feature_ids=list(feature_ids),
        covariate_names=list(table.covariates),
        sample_ids=list(table.sample_ids),
    )


def prepare_input(table: FeatureTable, min_present: int = 4) -> AnalysisInput:
    """Presence, filtering and design in one step."""
    presence, kept = filter_features(
        derive_presence(table), min_present, list(table.feature_ids)
    )
    return build_design(table, presence, kept)


def make_null_splits(
    table: FeatureTable,
    n_splits: int = 10,
    seed: int = 0,
    source_id: str = "source",
) -> list:
    """Random case/control relabelings of a single-group table.

    Each split is balanced with probability 1/2; otherwise the case-group
    size is uniform over the sizes leaving both groups with at least ten
    samples.
    """
    n = table.n_samples
    if n < MIN_NULL_SAMPLES:
        raise DataError(
            f"null splits need at least {MIN_NULL_SAMPLES} samples, got {n}"
        )
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_splits):
        balanced = bool(rng.random() < 0.5)
        if balanced:
            n_case = (n + 1) // 2
        else:
            n_case = int(rng.integers(MIN_GROUP_SIZE, n - MIN_GROUP_SIZE + 1))
        perm = rng.permutation(n)
        assignment = np.zeros(n, dtype=int)
        assignment[perm[:n_case]] = 1
        splits.append(
            NullSplitSpec(
                source_id=source_id,
                seed=seed,
                n_case=n_case,
                n_control=n - n_case,
                assignment=tuple(int(a) for a in assignment),
                balanced=balanced,
            )
        )
    return splits


def apply_null_split(table: FeatureTable, split: NullSplitSpec) -> FeatureTable:
    return FeatureTable(
        sample_ids=list(table.sample_ids),
        feature_ids=list(table.feature_ids),
        counts=table.counts,
        total_reads=table.total_reads,
        group=np.asarray(split.assignment),
        covariates=dict(table.covariates),
    )


def gaussian_response(table: FeatureTable, feature_ids, pseudocount: str | float = "half_min"):
    """Standardized log relative abundances for the Gaussian-likelihood model.

    Relative abundance is each count divided by the sample's summed counts
    over all table features. The pseudocount defaults to half the smallest
    nonzero relative abundance of each feature.
    """
    idx = [table.feature_ids.index(f) for f in feature_ids]
    row_sums = table.counts.sum(axis=1, keepdims=True)
    row_sums[row_sums == 0] = 1.0
    rel = table.counts[:, idx] / row_sums
    out = np.zeros_like(rel)
    for j in range(rel.shape[1]):
        col = rel[:, j]
        if pseudocount == "half_min":
            nz = col[col > 0]
            pc = 0.5 * nz.min() if nz.size else 1e-6
        else:
            pc = float(pseudocount)
        v = np.log(col + pc)
        sd = v.std(ddof=1)
        out[:, j] = (v - v.mean()) / sd if sd > 0 else v - v.mean()
    return out
