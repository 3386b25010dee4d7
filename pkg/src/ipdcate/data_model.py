"""Pooled multi-study IPD table, treatment availability, adjustment sets and
positivity diagnostics.

Column conventions (also the ingestion format): ``study_id``, ``y``, one
``a_<name>`` indicator per treatment, and covariates prefixed ``s_``
(study-level), ``w_`` (individual-level) or ``r_`` (resistance).
Availability columns ``d_<name>`` are never stored; they are derived.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

KIND_CONTINUOUS = "continuous"
KIND_BINARY = "binary"

INTERCEPT = "(intercept)"


class DataValidationError(ValueError):
    """Ingested data violate the pooled-dataset invariants."""


class DegenerateDesignError(ValueError):
    """A design matrix built from the data is rank deficient."""


@dataclass(frozen=True)
class CovariateSchema:
    study_level: tuple[str, ...]
    individual: tuple[str, ...]
    resistance: tuple[str, ...]
    kinds: Mapping[str, str]

    @property
    def all_columns(self) -> tuple[str, ...]:
        return self.study_level + self.individual + self.resistance


@dataclass(frozen=True)
class PooledDataset:
    """Validated rectangular IPD table pooled over studies.

    Immutable after construction; safe to share across concurrent
    estimation tasks. ``study_order`` is the sorted unique study ids, and
    ``study_index`` maps each id to the row positions of its members.
    Numeric columns are cached as float arrays at validation time.
    """

    frame: pd.DataFrame = field(repr=False)
    treatment_names: tuple[str, ...]
    schema: CovariateSchema
    study_order: tuple
    study_index: Mapping[object, np.ndarray] = field(repr=False)
    study_codes: np.ndarray = field(repr=False)
    values: Mapping[str, np.ndarray] = field(repr=False)

    @property
    def n_records(self) -> int:
        return len(self.frame)

    @property
    def n_studies(self) -> int:
        return len(self.study_order)

    @property
    def n_treatments(self) -> int:
        return len(self.treatment_names)

    def y(self) -> np.ndarray:
        return self.values["y"]

    def treatment(self, name: str) -> np.ndarray:
        if name not in self.treatment_names:
            raise KeyError(f"unknown treatment {name!r}")
        return self.values[f"a_{name}"]

    def column(self, name: str) -> np.ndarray:
        if name not in self.values:
            raise KeyError(f"unknown column {name!r}")
        return self.values[name]

    def treatment_matrix(self) -> np.ndarray:
        return np.column_stack([self.values[f"a_{t}"] for t in self.treatment_names])


@dataclass(frozen=True)
class AvailabilityMatrix:
    """Per-study treatment availability, ``d[j, k]`` over study_order x treatments."""

    d: np.ndarray
    study_order: tuple
    treatment_names: tuple[str, ...]

    def per_record(self, data: PooledDataset, treatment: str) -> np.ndarray:
        k = self.treatment_names.index(treatment)
        return self.d[data.study_codes, k].astype(float)


@dataclass(frozen=True)
class AdjustmentSet:
    """Ordered confounder columns for one target treatment.

    Column order is fixed for reproducibility: study-level, individual-level,
    resistance, then (d_, a_) pairs of the other treatments in treatment
    order. The target's own a_/d_ columns never appear.
    """

    target: str
    columns: tuple[str, ...]
    exclusions: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class PositivityFlag:
    treatment_a: str
    treatment_b: str
    count: int
    reason: str


def _is_binary(values: np.ndarray) -> bool:
    return bool(np.isin(values, (0.0, 1.0)).all())


def from_frame(frame: pd.DataFrame, kind_overrides: Mapping[str, str] | None = None) -> PooledDataset:
    """Validate a raw table and build a PooledDataset.

    Missing values are rejected: the artifact consumes complete (possibly
    pre-imputed) datasets. ``kind_overrides`` maps covariate columns to
    'continuous'/'binary', overriding value-based kind inference.
    """
    frame = frame.copy()
    cols = list(frame.columns)
    for required in ("study_id", "y"):
        if required not in cols:
            raise DataValidationError(f"missing required column {required!r}")

    treatment_names = tuple(c[2:] for c in cols if c.startswith("a_"))
    if not treatment_names:
        raise DataValidationError("no treatment columns (expected at least one 'a_<name>')")

    known = {"study_id", "y"}
    known.update(f"a_{t}" for t in treatment_names)
    s_cols = tuple(c for c in cols if c.startswith("s_"))
    w_cols = tuple(c for c in cols if c.startswith("w_"))
    r_cols = tuple(c for c in cols if c.startswith("r_"))
    known.update(s_cols + w_cols + r_cols)
    unknown = [c for c in cols if c not in known]
    if unknown:
        raise DataValidationError(
            f"unrecognized columns {unknown}; use s_/w_/r_/a_ prefixes"
        )

    if frame.isna().to_numpy().any():
        bad = [c for c in cols if frame[c].isna().any()]
        raise DataValidationError(f"missing values in columns {bad}; impute before ingestion")

    values: dict[str, np.ndarray] = {}
    for c in cols:
        if c == "study_id":
            continue
        try:
            values[c] = np.ascontiguousarray(frame[c].to_numpy(dtype=float))
        except (TypeError, ValueError) as exc:
            raise DataValidationError(f"column {c} is not numeric: {exc}") from None

    if not np.isfinite(values["y"]).all():
        raise DataValidationError("non-finite outcome values")

    for t in treatment_names:
        if not _is_binary(values[f"a_{t}"]):
            raise DataValidationError(f"treatment column a_{t} must contain only 0/1")

    overrides = dict(kind_overrides or {})
    for c in overrides:
        if c not in s_cols + w_cols + r_cols:
            raise DataValidationError(f"schema override for unknown covariate {c!r}")
    kinds: dict[str, str] = {}
    for c in s_cols + w_cols + r_cols:
        vals = values[c]
        if not np.isfinite(vals).all():
            raise DataValidationError(f"non-finite values in covariate {c}")
        kind = overrides.get(c, KIND_BINARY if _is_binary(vals) else KIND_CONTINUOUS)
        if kind not in (KIND_BINARY, KIND_CONTINUOUS):
            raise DataValidationError(f"unknown kind {kind!r} for column {c}")
        if kind == KIND_BINARY and not _is_binary(vals):
            raise DataValidationError(f"column {c} declared binary but has non-0/1 values")
        kinds[c] = kind

    try:
        codes, uniques = pd.factorize(frame["study_id"], sort=True)
    except TypeError as exc:
        raise DataValidationError(f"study ids are not orderable: {exc}") from None
    study_order = tuple(np.asarray(uniques).tolist())
    study_codes = codes.astype(np.intp)
    order = np.argsort(study_codes, kind="stable")
    bounds = np.searchsorted(study_codes[order], np.arange(len(study_order) + 1))
    study_index = {
        sid: order[bounds[i]:bounds[i + 1]] for i, sid in enumerate(study_order)
    }

    for c in s_cols:
        vals = values[c]
        first = vals[np.array([study_index[s][0] for s in study_order])]
        if np.any(vals != first[study_codes]):
            bad_code = int(np.flatnonzero(vals != first[study_codes])[0])
            raise DataValidationError(
                f"study-level covariate {c} varies within study "
                f"{study_order[int(study_codes[bad_code])]!r}"
            )

    schema = CovariateSchema(
        study_level=s_cols, individual=w_cols, resistance=r_cols, kinds=kinds
    )
    return PooledDataset(
        frame=frame,
        treatment_names=treatment_names,
        schema=schema,
        study_order=study_order,
        study_index=study_index,
        study_codes=study_codes,
        values=values,
    )


def read_dataset(path, schema_path=None, delimiter=None) -> PooledDataset:
    """Ingest a delimiter-separated text file with a header row.

    The optional YAML sidecar maps covariate columns to kinds, overriding
    inference. The delimiter is sniffed when not given.
    """
    if delimiter is None:
        frame = pd.read_csv(path, sep=None, engine="python")
    else:
        frame = pd.read_csv(path, sep=delimiter)
    overrides = None
    if schema_path is not None:
        with open(schema_path) as fh:
            overrides = yaml.safe_load(fh) or {}
        if not isinstance(overrides, dict):
            raise DataValidationError(f"schema sidecar {schema_path} must be a mapping")
    return from_frame(frame, kind_overrides=overrides)


def derive_availability(data: PooledDataset) -> AvailabilityMatrix:
    """A treatment is available to a study when any member took it."""
    a = data.treatment_matrix().astype(np.int8)
    d = np.zeros((data.n_studies, data.n_treatments), dtype=np.int8)
    np.maximum.at(d, data.study_codes, a)
    return AvailabilityMatrix(d=d, study_order=data.study_order,
                              treatment_names=data.treatment_names)


def build_adjustment_set(data: PooledDataset, treatment: str,
                         exclusions: Iterable[str] | Mapping[str, str] = ()) -> AdjustmentSet:
    """Confounder columns for ``treatment``: S, W, R plus the other treatments'
    (availability, indicator) pairs, minus ``exclusions``.

    An exclusion naming a treatment drops both its d_ and a_ columns; an
    exclusion naming a specific column drops just that column.
    """
    if treatment not in data.treatment_names:
        raise KeyError(f"unknown treatment {treatment!r}")
    if isinstance(exclusions, Mapping):
        requested = dict(exclusions)
    else:
        requested = {name: "excluded by configuration" for name in exclusions}

    columns: list[str] = list(data.schema.all_columns)
    for other in data.treatment_names:
        if other != treatment:
            columns.extend((f"d_{other}", f"a_{other}"))

    drop: dict[str, str] = {}
    for name, reason in requested.items():
        if name in data.treatment_names:
            if name == treatment:
                raise ValueError(f"cannot exclude the target treatment {name!r} from its own adjustment set")
            drop[f"d_{name}"] = reason
            drop[f"a_{name}"] = reason
        elif name in columns:
            drop[name] = reason
        else:
            raise KeyError(f"exclusion {name!r} is not an adjustment column or treatment")

    kept = tuple(c for c in columns if c not in drop)
    recorded = tuple((c, drop[c]) for c in columns if c in drop)
    return AdjustmentSet(target=treatment, columns=kept, exclusions=recorded)


def design_matrix(data: PooledDataset, columns: Sequence[str],
                  availability: AvailabilityMatrix | None = None,
                  intercept: bool = False) -> np.ndarray:
    """Materialize named columns as an (n, p) float matrix.

    d_<treatment> columns come from the availability matrix (derived on
    demand when not supplied).
    """
    out = []
    if intercept:
        out.append(np.ones(data.n_records))
    for name in columns:
        if name == INTERCEPT:
            out.append(np.ones(data.n_records))
        elif name.startswith("d_") and name[2:] in data.treatment_names:
            if availability is None:
                availability = derive_availability(data)
            out.append(availability.per_record(data, name[2:]))
        elif name in data.frame.columns and name not in ("study_id", "y"):
            out.append(data.column(name))
        else:
            raise KeyError(f"unknown design column {name!r}")
    return np.column_stack(out) if out else np.empty((data.n_records, 0))


def coprescription_table(data: PooledDataset) -> np.ndarray:
    """K x K counts of records taking both treatments; diagonal = totals."""
    a = data.treatment_matrix()
    return (a.T @ a).astype(np.int64)


def positivity_report(table: np.ndarray, threshold: int,
                      treatment_names: Sequence[str] | None = None) -> list[PositivityFlag]:
    """Flag treatment pairs with scarce or perfectly nested co-prescription.

    A pair is flagged when its off-diagonal count is below ``threshold``,
    or when it equals one of the diagonals (everyone on one drug also took
    the other), which makes one treatment inestimable given the other.
    """
    table = np.asarray(table)
    k = table.shape[0]
    if table.shape != (k, k):
        raise ValueError(f"expected a square count matrix, got shape {table.shape}")
    names = list(treatment_names) if treatment_names is not None else [str(i) for i in range(k)]
    if len(names) != k:
        raise ValueError("treatment_names length does not match the table")

    flags: list[PositivityFlag] = []
    for i in range(k):
        for j in range(i + 1, k):
            count = int(table[i, j])
            if count < threshold:
                flags.append(PositivityFlag(names[i], names[j], count, "below_threshold"))
            if count > 0 and (count == table[i, i] or count == table[j, j]):
                flags.append(PositivityFlag(names[i], names[j], count, "nested"))
    return flags


@dataclass(frozen=True)
class ModifierDesign:
    """Intercept plus effect-modifier columns, with per-column standardization.

    ``center``/``scale`` apply to the modifier columns only (identity for
    binary or unstandardized ones) and invert exactly, so coefficients can
    be reported on either scale.
    """

    columns: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray

    @property
    def p(self) -> int:
        return len(self.columns) - 1

    @property
    def modifier_names(self) -> tuple[str, ...]:
        return self.columns[1:]

    def matrix(self, data: PooledDataset,
               availability: AvailabilityMatrix | None = None) -> np.ndarray:
        raw = design_matrix(data, self.modifier_names, availability=availability)
        std = (raw - self.center) / self.scale
        return np.column_stack([np.ones(data.n_records), std])

    def destandardize(self, beta: np.ndarray) -> np.ndarray:
        """Map coefficients on the standardized columns back to raw columns."""
        beta = np.asarray(beta, dtype=float)
        out = beta.copy()
        out[1:] = beta[1:] / self.scale
        out[0] = beta[0] - float(np.sum(beta[1:] * self.center / self.scale))
        return out


def build_modifier_design(data: PooledDataset, modifiers: Sequence[str],
                          standardize: bool = True,
                          availability: AvailabilityMatrix | None = None) -> ModifierDesign:
    """Build and rank-validate the effect-modifier design.

    Continuous modifiers are centered/scaled to mean 0, SD 1 when
    ``standardize`` is set; binary and treatment columns are left alone.
    An empty modifier list gives the intercept-only design (the overall
    average treatment effect).
    """
    raw = design_matrix(data, modifiers, availability=availability)
    p = raw.shape[1]
    center = np.zeros(p)
    scale = np.ones(p)
    if standardize:
        for idx, name in enumerate(modifiers):
            if data.schema.kinds.get(name) == KIND_CONTINUOUS:
                sd = float(np.std(raw[:, idx]))
                if sd == 0.0:
                    raise ValueError(f"modifier {name} is constant")
                center[idx] = float(np.mean(raw[:, idx]))
                scale[idx] = sd
    design = ModifierDesign(columns=(INTERCEPT, *modifiers), center=center, scale=scale)
    v = design.matrix(data, availability=availability)
    rank = np.linalg.matrix_rank(v)
    if rank < v.shape[1]:
        raise DegenerateDesignError(
            f"modifier design is rank deficient (rank {rank} < {v.shape[1]} columns)"
        )
    return design
