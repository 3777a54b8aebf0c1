"""Observation records, cohort datasets and CSV interchange.

A subject's follow-up is the tuple (v0, l, r, delta_i, t, delta_d): entry
visit time, last visit observed healthy, diagnosis visit (if any), diagnosis
indicator, min(death, end of follow-up), and death indicator.  Times are
numeric years.  Each record falls into exactly one of four likelihood cases
depending on (delta_i, delta_d).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


class LikelihoodCase(enum.Enum):
    ILL_CENSORED = 1
    ILL_DIED = 2
    HEALTHY_CENSORED = 3
    HEALTHY_DIED = 4


@dataclass(frozen=True)
class ObservationRecord:
    id: str
    v0: float
    l: float
    r: float | None
    delta_i: int
    t: float
    delta_d: int

    def validate(self) -> None:
        """Raise :class:`DataError` if any record invariant is violated."""
        times = [self.v0, self.l, self.t] + ([self.r] if self.r is not None else [])
        for x in times:
            if not math.isfinite(x) or x < 0:
                raise DataError(f"record {self.id}: non-finite or negative time {x!r}")
        if self.delta_i not in (0, 1) or self.delta_d not in (0, 1):
            raise DataError(f"record {self.id}: delta_i/delta_d must be 0 or 1")
        if self.v0 > self.l:
            raise DataError(f"record {self.id}: v0={self.v0} exceeds l={self.l}")
        if self.delta_i == 1:
            if self.r is None:
                raise DataError(f"record {self.id}: delta_i=1 but r is missing")
            if not (self.l < self.r <= self.t):
                raise DataError(
                    f"record {self.id}: requires l < r <= t, got l={self.l}, r={self.r}, t={self.t}"
                )
        else:
            if self.r is not None:
                raise DataError(f"record {self.id}: delta_i=0 but r={self.r} is present")
            if self.l > self.t:
                raise DataError(f"record {self.id}: l={self.l} exceeds t={self.t}")

    @property
    def case(self) -> LikelihoodCase:
        return classify_case(self)


def classify_case(rec: ObservationRecord) -> LikelihoodCase:
    """Map the (delta_i, delta_d) pair of a valid record to its likelihood case."""
    if rec.delta_i == 1:
        return LikelihoodCase.ILL_DIED if rec.delta_d == 1 else LikelihoodCase.ILL_CENSORED
    return LikelihoodCase.HEALTHY_DIED if rec.delta_d == 1 else LikelihoodCase.HEALTHY_CENSORED


@dataclass(frozen=True)
class CovariateMatrix:
    values: np.ndarray
    column_names: tuple[str, ...]
    standardized: bool = False
    center: np.ndarray | None = None  # training means, kept for new-data prediction
    scale: np.ndarray | None = None   # training sample SDs (ddof=1)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise DataError("covariate matrix must be two-dimensional")
        if values.shape[1] != len(self.column_names):
            raise DataError("covariate column count does not match column_names")
        if not np.all(np.isfinite(values)):
            raise DataError("covariate matrix contains missing or non-finite entries")
        if self.standardized and values.shape[0] > 1:
            if np.abs(values.mean(axis=0)).max() > 1e-8:
                raise DataError("standardized covariates must have column means ~0")
            if np.abs(values.std(axis=0, ddof=1) - 1.0).max() > 1e-8:
                raise DataError("standardized covariates must have column SDs ~1")

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def standardize_covariates(cov: CovariateMatrix) -> CovariateMatrix:
    """Center and scale each column to mean 0 / sample SD 1, keeping the constants."""
    center = cov.values.mean(axis=0)
    scale = cov.values.std(axis=0, ddof=1)
    if np.any(scale == 0):
        bad = [cov.column_names[j] for j in np.flatnonzero(scale == 0)]
        raise DataError(f"cannot standardize constant covariate column(s): {bad}")
    values = (cov.values - center) / scale
    return CovariateMatrix(values, cov.column_names, standardized=True, center=center, scale=scale)


def apply_standardization(cov: CovariateMatrix, center: np.ndarray, scale: np.ndarray) -> CovariateMatrix:
    """Apply training-set standardization constants to new data."""
    values = (cov.values - np.asarray(center, dtype=float)) / np.asarray(scale, dtype=float)
    return CovariateMatrix(values, cov.column_names, standardized=False,
                           center=np.asarray(center, float), scale=np.asarray(scale, float))


@dataclass(frozen=True)
class Dataset:
    """Immutable cohort: observation records aligned row-by-row with covariates."""

    records: tuple[ObservationRecord, ...]
    covariates: CovariateMatrix

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if len(self.records) != self.covariates.n_subjects:
            raise DataError(
                f"{len(self.records)} records but {self.covariates.n_subjects} covariate rows"
            )

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def p(self) -> int:
        return self.covariates.p

    def case_counts(self) -> dict[LikelihoodCase, int]:
        counts = {c: 0 for c in LikelihoodCase}
        for rec in self.records:
            counts[rec.case] += 1
        return counts

    def subset(self, index: Sequence[int]) -> "Dataset":
        """Row subset / resample (used by the bootstrap)."""
        idx = list(index)
        records = tuple(
            replace(self.records[i], id=f"{self.records[i].id}#{pos}")
            for pos, i in enumerate(idx)
        )
        cov = CovariateMatrix(
            self.covariates.values[idx, :],
            self.covariates.column_names,
            standardized=False,
            center=self.covariates.center,
            scale=self.covariates.scale,
        )
        return Dataset(records, cov)


OBSERVATION_COLUMNS = ("id", "v0", "l", "r", "delta_i", "t", "delta_d")


@dataclass(frozen=True)
class ColumnSchema:
    """Maps the canonical observation fields to CSV header names.

    Any header not mapped to an observation field is treated as a covariate
    column, unless ``covariates`` explicitly lists them.
    """

    id: str = "id"
    v0: str = "v0"
    l: str = "l"
    r: str = "r"
    delta_i: str = "delta_i"
    t: str = "t"
    delta_d: str = "delta_d"
    covariates: tuple[str, ...] | None = None

    def observation_headers(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in OBSERVATION_COLUMNS}


def _parse_float(text: str, row_id: str, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row_id}: unparsable value {text!r} in column {column!r}") from None


def _parse_flag(text: str, row_id: str, column: str) -> int:
    value = _parse_float(text, row_id, column)
    if value not in (0.0, 1.0):
        raise DataError(f"row {row_id}: column {column!r} must be 0 or 1, got {text!r}")
    return int(value)


def load_dataset(
    path: str | Path,
    schema: ColumnSchema | None = None,
    standardize: bool = True,
) -> Dataset:
    """Load and validate a cohort CSV.

    The canonical layout is ``id,v0,l,r,delta_i,t,delta_d,z1..zp`` with a
    header row; a missing diagnosis visit is an empty ``r`` field.  Covariates
    are standardized by default (column mean 0, sample SD 1) with the
    constants retained on the returned matrix.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    schema = schema or ColumnSchema()

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        col_index = {name: i for i, name in enumerate(header)}
        for f, name in schema.observation_headers().items():
            if name not in col_index:
                raise DataError(f"{path}: missing required column {name!r} (field {f})")
        if schema.covariates is not None:
            cov_names = list(schema.covariates)
            missing = [c for c in cov_names if c not in col_index]
            if missing:
                raise DataError(f"{path}: missing covariate column(s) {missing}")
        else:
            observation = set(schema.observation_headers().values())
            cov_names = [c for c in header if c not in observation]
        if not cov_names:
            raise DataError(f"{path}: at least one covariate column is required")

        records: list[ObservationRecord] = []
        cov_rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            rid = row[col_index[schema.id]]
            r_text = row[col_index[schema.r]].strip()
            rec = ObservationRecord(
                id=rid,
                v0=_parse_float(row[col_index[schema.v0]], rid, schema.v0),
                l=_parse_float(row[col_index[schema.l]], rid, schema.l),
                r=None if r_text == "" else _parse_float(r_text, rid, schema.r),
                delta_i=_parse_flag(row[col_index[schema.delta_i]], rid, schema.delta_i),
                t=_parse_float(row[col_index[schema.t]], rid, schema.t),
                delta_d=_parse_flag(row[col_index[schema.delta_d]], rid, schema.delta_d),
            )
            rec.validate()
            records.append(rec)
            cov_rows.append([_parse_float(row[col_index[c]], rid, c) for c in cov_names])

    if not records:
        raise DataError(f"{path}: no data rows")
    cov = CovariateMatrix(np.array(cov_rows, dtype=float), tuple(cov_names))
    if standardize:
        cov = standardize_covariates(cov)
    return Dataset(tuple(records), cov)


def _format_number(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a cohort back to the canonical CSV layout at full float precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(OBSERVATION_COLUMNS) + list(dataset.covariates.column_names))
        for rec, zrow in zip(dataset.records, dataset.covariates.values):
            writer.writerow(
                [
                    rec.id,
                    _format_number(rec.v0),
                    _format_number(rec.l),
                    "" if rec.r is None else _format_number(rec.r),
                    rec.delta_i,
                    _format_number(rec.t),
                    rec.delta_d,
                ]
                + [_format_number(z) for z in zrow]
            )
