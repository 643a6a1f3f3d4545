"""Tabular containers for RCT and observational study data.

A :class:`Dataset` keeps one row per individual. Role columns (sample flag,
assignment, receipt, compliance, outcome, weight, cluster) are stored under
canonical names next to the raw covariate columns. Assignment and compliance
are tri-state: 0, 1, or missing (NaN), since treatment assignment is never
observed in the population and compliance is only observed in the RCT treated
arm.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SAMPLE, ASSIGNMENT, RECEIPT, COMPLIANCE = "S", "T", "D", "C"
OUTCOME, WEIGHT, CLUSTER = "Y", "weight", "cluster"
ROLE_COLUMNS = (SAMPLE, ASSIGNMENT, RECEIPT, COMPLIANCE, OUTCOME, WEIGHT, CLUSTER)

PROVENANCES = ("rct", "observational")
MISSING_TOKEN = "NA"


class SchemaError(ValueError):
    """A table or feature spec does not match the expected columns."""


class RowError(ValueError):
    """A value could not be coerced to the column's type."""

    def __init__(self, message: str, rows: Sequence[int] = ()):
        super().__init__(message)
        self.rows = list(rows)


@dataclass(frozen=True)
class ColumnRoles:
    """Source column name for each role. ``None`` means the role is absent."""

    sample: str | None = "s"
    assignment: str | None = "t"
    receipt: str = "d"
    compliance: str | None = "c"
    outcome: str = "y"
    weight: str | None = "weight"
    cluster: str | None = "hh"

    def mapping(self) -> dict[str, str | None]:
        return {
            SAMPLE: self.sample,
            ASSIGNMENT: self.assignment,
            RECEIPT: self.receipt,
            COMPLIANCE: self.compliance,
            OUTCOME: self.outcome,
            WEIGHT: self.weight,
            CLUSTER: self.cluster,
        }


@dataclass(frozen=True)
class FeatureSpec:
    """How raw covariate columns become a numeric feature matrix.

    Parameters
    ----------
    covariates : sequence of str
        Base covariate columns, in output order.
    categorical : sequence of str
        Subset of ``covariates`` to expand into 0/1 dummies. The
        lexicographically first level is the dropped reference.
    interactions : sequence of (str, str)
        Pairs of *encoded* column names whose elementwise product is appended.
    outcome_scale : float
        Multiplier applied to outcomes at load time (e.g. 0.5 to turn a
        12-month recall window into a 6-month one).
    roles : ColumnRoles
        Where the role columns live in the source table.
    """

    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str], ...] = ()
    outcome_scale: float = 1.0
    roles: ColumnRoles = field(default_factory=ColumnRoles)

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        object.__setattr__(
            self, "interactions", tuple(tuple(p) for p in self.interactions)
        )
        unknown = set(self.categorical) - set(self.covariates)
        if unknown:
            raise SchemaError(f"categorical columns not among covariates: {sorted(unknown)}")
        if any(len(p) != 2 for p in self.interactions):
            raise SchemaError("interaction terms must be column pairs")
        if not self.outcome_scale > 0:
            raise ValueError("outcome_scale must be positive")
        reserved = {c for c in self.roles.mapping().values() if c} | set(ROLE_COLUMNS)
        clash = sorted(set(self.covariates) & reserved)
        if clash:
            raise SchemaError(f"role columns cannot be covariates: {clash}")


class Unit(NamedTuple):
    covariates: np.ndarray
    S: float
    T: float
    D: float
    C: float
    Y: float
    weight: float
    cluster: object


@dataclass(frozen=True)
class Dataset:
    """Immutable study table.

    ``frame`` holds the covariate columns followed by the canonical role
    columns ``S, T, D, C, Y, weight, cluster``. Missing assignment or
    compliance is NaN.
    """

    frame: pd.DataFrame
    covariates: tuple[str, ...]
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        missing = [c for c in ROLE_COLUMNS + tuple(self.covariates) if c not in self.frame]
        if missing:
            raise SchemaError(f"dataset frame lacks columns {missing}")
        if (self.frame[WEIGHT].to_numpy(float) <= 0).any():
            raise RowError("survey weights must be positive")

    @classmethod
    def from_arrays(
        cls,
        covariates: dict[str, np.ndarray] | pd.DataFrame,
        *,
        D,
        Y,
        S=None,
        T=None,
        C=None,
        weight=None,
        cluster=None,
        provenance: str = "rct",
    ) -> "Dataset":
        cov = pd.DataFrame(covariates).reset_index(drop=True)
        n = len(cov) if len(cov.columns) else len(np.asarray(D))
        if not len(cov.columns):
            cov = pd.DataFrame(index=range(n))

        def col(v, default):
            if v is None:
                return np.full(n, default, dtype=float)
            return np.asarray(v, dtype=float).reshape(n)

        frame = cov.copy()
        frame[SAMPLE] = col(S, 1.0 if provenance == "rct" else 0.0)
        frame[ASSIGNMENT] = col(T, np.nan)
        frame[RECEIPT] = col(D, np.nan)
        frame[COMPLIANCE] = col(C, np.nan)
        frame[OUTCOME] = col(Y, np.nan)
        frame[WEIGHT] = col(weight, 1.0)
        frame[CLUSTER] = np.arange(n) if cluster is None else np.asarray(cluster)
        return cls(frame, tuple(cov.columns), provenance)

    def __len__(self) -> int:
        return len(self.frame)

    def __iter__(self) -> Iterator[Unit]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Unit:
        row = self.frame.iloc[i]
        return Unit(
            covariates=row[list(self.covariates)].to_numpy(),
            S=row[SAMPLE],
            T=row[ASSIGNMENT],
            D=row[RECEIPT],
            C=row[COMPLIANCE],
            Y=row[OUTCOME],
            weight=row[WEIGHT],
            cluster=row[CLUSTER],
        )

    def _arr(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    @property
    def S(self) -> np.ndarray:
        return self._arr(SAMPLE)

    @property
    def T(self) -> np.ndarray:
        return self._arr(ASSIGNMENT)

    @property
    def D(self) -> np.ndarray:
        return self._arr(RECEIPT)

    @property
    def C(self) -> np.ndarray:
        return self._arr(COMPLIANCE)

    @property
    def Y(self) -> np.ndarray:
        return self._arr(OUTCOME)

    @property
    def weight(self) -> np.ndarray:
        return self._arr(WEIGHT)

    @property
    def cluster(self) -> np.ndarray:
        return self.frame[CLUSTER].to_numpy()

    @property
    def defier(self) -> np.ndarray:
        """RCT controls who nonetheless received treatment."""
        return (self.S == 1) & (self.T == 0) & (self.D == 1)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return replace(self, frame=self.frame.loc[mask].reset_index(drop=True))

    def take(self, indices) -> "Dataset":
        return replace(self, frame=self.frame.iloc[np.asarray(indices)].reset_index(drop=True))

    def with_column(self, name: str, values) -> "Dataset":
        frame = self.frame.copy()
        frame[name] = np.asarray(values)
        return replace(self, frame=frame)


def _coerce_numeric(series: pd.Series, name: str) -> tuple[pd.Series, list[int]]:
    # python's float() rounds correctly; pandas' fast string parser can be off by an ulp
    vals = np.full(len(series), np.nan)
    bad = []
    for i, s in enumerate(series.to_numpy(dtype=object)):
        if s is None or s is pd.NA or s == MISSING_TOKEN or s == "":
            continue
        try:
            vals[i] = float(s)
        except ValueError:
            bad.append(i)
    return pd.Series(vals, index=series.index), bad


def load_table(
    path: str | Path,
    schema: FeatureSpec,
    provenance: str,
    *,
    delimiter: str = ",",
    strict: bool = False,
    extra: Sequence[str] = (),
) -> Dataset:
    """Read a delimited file into a :class:`Dataset`.

    Rows whose numeric fields fail to parse are dropped and reported through
    the logger; with ``strict=True`` they raise :class:`RowError` instead.
    ``extra`` names further columns (subgroup labels, say) to carry along
    without making them model features; they stay numeric when every value
    parses and are kept as text otherwise.
    Optional role columns (sample, assignment, compliance, weight, cluster)
    may be absent from the file, in which case they default to the
    provenance's sample flag, missing, missing, 1 and the row index.
    """
    if provenance not in PROVENANCES:
        raise ValueError(f"provenance must be one of {PROVENANCES}")
    raw = pd.read_csv(
        path,
        sep=delimiter,
        dtype=str,
        keep_default_na=False,
        encoding="utf-8",
    )
    roles = schema.roles
    extra = [c for c in extra if c not in schema.covariates]
    required = list(schema.covariates) + [roles.receipt, roles.outcome] + extra
    missing = [c for c in required if c not in raw.columns]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")

    n = len(raw)
    bad_rows: dict[int, str] = {}
    frame = pd.DataFrame(index=range(n))
    for name in schema.covariates:
        if name in schema.categorical:
            frame[name] = raw[name].where(raw[name] != MISSING_TOKEN)
        else:
            frame[name], bad = _coerce_numeric(raw[name], name)
            bad_rows.update({i: name for i in bad})
    for name in extra:
        values, bad = _coerce_numeric(raw[name], name)
        frame[name] = raw[name].where(raw[name] != MISSING_TOKEN) if bad else values

    for role, src in roles.mapping().items():
        if role == CLUSTER:
            frame[CLUSTER] = raw[src].to_numpy() if src in raw else np.arange(n)
            continue
        if src is None or src not in raw:
            default = {
                SAMPLE: 1.0 if provenance == "rct" else 0.0,
                WEIGHT: 1.0,
            }.get(role, np.nan)
            frame[role] = default
            continue
        frame[role], bad = _coerce_numeric(raw[src], src)
        bad_rows.update({i: src for i in bad})

    nonpositive = np.flatnonzero(~(frame[WEIGHT].to_numpy() > 0))
    bad_rows.update({int(i): WEIGHT for i in nonpositive if i not in bad_rows})
    needs_value = frame[[RECEIPT, OUTCOME]].isna().any(axis=1).to_numpy()
    bad_rows.update({int(i): "receipt/outcome" for i in np.flatnonzero(needs_value) if i not in bad_rows})

    if bad_rows:
        detail = ", ".join(f"row {i} ({c})" for i, c in sorted(bad_rows.items())[:20])
        if strict:
            raise RowError(f"{len(bad_rows)} row(s) failed coercion: {detail}", sorted(bad_rows))
        logger.warning("%s: dropped %d row(s) failing coercion: %s", path, len(bad_rows), detail)
        frame = frame.drop(index=sorted(bad_rows)).reset_index(drop=True)

    # Compliance is unobservable for RCT controls regardless of what the file says.
    frame.loc[(frame[SAMPLE] == 1) & (frame[ASSIGNMENT] == 0), COMPLIANCE] = np.nan
    frame[OUTCOME] = frame[OUTCOME] * schema.outcome_scale
    ds = Dataset(frame, schema.covariates, provenance)
    n_defiers = int(ds.defier.sum())
    if n_defiers:
        logger.warning("%s: %d defier row(s) (S=1, T=0, D=1) flagged", path, n_defiers)
    return ds


def write_table(dataset: Dataset, path: str | Path, roles: ColumnRoles | None = None,
                *, delimiter: str = ",") -> None:
    """Write ``dataset`` so that :func:`load_table` reads it back unchanged."""
    roles = roles or ColumnRoles()
    out = dataset.frame[list(dataset.covariates)].copy()
    for role, src in roles.mapping().items():
        if src is not None:
            out[src] = dataset.frame[role]
    out.to_csv(path, sep=delimiter, index=False, na_rep=MISSING_TOKEN,
               float_format="%.17g", quoting=csv.QUOTE_MINIMAL)


def _levels(values: pd.Series) -> list[str]:
    return sorted(values.dropna().astype(str).unique())


def categorical_levels(spec: FeatureSpec, *datasets: Dataset) -> dict[str, list[str]]:
    """Sorted union of the observed levels of each categorical column."""
    out = {}
    for name in spec.categorical:
        seen = set()
        for ds in datasets:
            if name in ds.frame:
                seen.update(_levels(ds.frame[name]))
        out[name] = sorted(seen)
    return out


def build_design_matrix(dataset: Dataset, spec: FeatureSpec,
                        levels: dict[str, list[str]] | None = None) -> tuple[np.ndarray, list[str]]:
    """Encode covariates per ``spec``.

    Numeric columns pass through; categorical columns become one dummy per
    non-reference level named ``col[level]``; interaction columns, named
    ``a:b``, follow in spec order. ``levels`` pins the categorical levels
    (as returned by :func:`categorical_levels`) so that subsets of the data
    encode to the same columns; by default the dataset's own levels are used.
    """
    absent = [c for c in spec.covariates if c not in dataset.frame]
    if absent:
        raise SchemaError(f"feature spec references missing column(s): {absent}")
    cols: dict[str, np.ndarray] = {}
    for name in spec.covariates:
        series = dataset.frame[name]
        if name in spec.categorical:
            as_str = series.astype("string")
            lv = levels[name] if levels is not None and name in levels else _levels(series)
            for level in lv[1:]:
                cols[f"{name}[{level}]"] = (as_str == level).fillna(False).to_numpy(float)
        else:
            cols[name] = series.to_numpy(dtype=float)
    for a, b in spec.interactions:
        for c in (a, b):
            if c not in cols:
                raise SchemaError(f"interaction references unknown encoded column {c!r}")
        cols[f"{a}:{b}"] = cols[a] * cols[b]
    names = list(cols)
    X = np.column_stack([cols[c] for c in names]) if names else np.empty((len(dataset), 0))
    if np.isnan(X).any():
        raise RowError("design matrix has missing covariate values",
                       np.flatnonzero(np.isnan(X).any(axis=1)))
    return X, names


def rescale_outcome(dataset: Dataset, factor: float) -> Dataset:
    if not factor > 0:
        raise ValueError(f"rescale factor must be positive, got {factor}")
    frame = dataset.frame.copy()
    frame[OUTCOME] = frame[OUTCOME] * factor
    return replace(dataset, frame=frame)
