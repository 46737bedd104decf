"""Public-use survey data files: schema, ingestion, validation and weight rescaling.

A file holds response columns, covariate columns, one final-weight column and
``B`` replication-weight columns named ``<prefix>1 .. <prefix>B``.  The
population size is never an input; every place that would need it uses
``n_hat``, the sum of the final weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ParseError, SchemaError, ValidationError

_MISSING = {"", "na", "nan", "null", "none", "."}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Schema:
    """Maps column roles to column names in a CSV file."""

    y: tuple[str, ...]
    x: tuple[str, ...] = ()
    weight: str = "w"
    rep_prefix: str | None = None
    signed_replicates: bool = False

    @classmethod
    def from_mapping(cls, m: Mapping[str, str]) -> "Schema":
        if "y" not in m or "weight" not in m:
            raise SchemaError("schema needs at least the keys 'y' and 'weight'")
        split = lambda s: tuple(c.strip() for c in s.split(",") if c.strip())
        return cls(
            y=split(m["y"]),
            x=split(m.get("x", "")),
            weight=m["weight"].strip(),
            rep_prefix=(m.get("rep_prefix") or "").strip() or None,
            signed_replicates=m.get("signed_replicates", "").strip().lower() in ("1", "true", "yes"),
        )

    def to_mapping(self) -> dict[str, str]:
        out = {"y": ",".join(self.y), "x": ",".join(self.x), "weight": self.weight}
        if self.rep_prefix:
            out["rep_prefix"] = self.rep_prefix
        if self.signed_replicates:
            out["signed_replicates"] = "true"
        return out


def read_keyvalue(path: str | Path) -> dict[str, str]:
    """Read a plain ``key=value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_keyvalue(path: str | Path, items: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def read_schema(path: str | Path) -> Schema:
    return Schema.from_mapping(read_keyvalue(path))


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """An immutable public-use survey data file.

    Parameters
    ----------
    y : (n, q) array
        Response columns.
    x : (n, k) array
        Covariate columns (may have zero columns).
    final_weights : (n,) array
        Strictly positive final survey weights.
    rep_weights : (n, B) array
        Nonnegative replication weights; ``B`` may be zero.
    """

    y: np.ndarray
    x: np.ndarray
    final_weights: np.ndarray
    rep_weights: np.ndarray
    y_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()
    schema: Schema | None = field(default=None, compare=False)
    # calibrated bootstrap columns may legitimately dip below zero
    signed_replicates: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        n = y.shape[0]
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((n, 0))
        elif x.ndim == 1:
            x = x[:, None]
        w = np.asarray(self.final_weights, dtype=float).ravel()
        rep = np.asarray(self.rep_weights, dtype=float)
        if rep.size == 0:
            rep = np.zeros((n, 0))
        elif rep.ndim == 1:
            rep = rep[:, None]

        if n < 2:
            raise ValidationError(f"need at least 2 records, got {n}")
        for name, a in (("x", x), ("final_weights", w), ("rep_weights", rep)):
            if a.shape[0] != n:
                raise ValidationError(f"{name} has {a.shape[0]} rows, expected {n}")
        for name, a in (("y", y), ("x", x), ("final_weights", w), ("rep_weights", rep)):
            if not np.all(np.isfinite(a)):
                i = int(np.argwhere(~np.isfinite(a))[0][0])
                raise ValidationError(f"non-finite value in {name} at row {i}")
        bad = np.flatnonzero(w <= 0)
        if bad.size:
            raise ValidationError(f"final weight must be > 0; row {bad[0]} has {float(w[bad[0]]):g}")
        if rep.size and not self.signed_replicates and np.any(rep < 0):
            i = int(np.argwhere(rep < 0)[0][0])
            raise ValidationError(f"negative replication weight at row {i}")

        y_names = tuple(self.y_names) or tuple(f"y{j + 1}" for j in range(y.shape[1]))
        x_names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(y_names) != y.shape[1] or len(x_names) != x.shape[1]:
            raise ValidationError("column-name count does not match data")

        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "final_weights", _frozen(w))
        object.__setattr__(self, "rep_weights", _frozen(rep))
        object.__setattr__(self, "y_names", y_names)
        object.__setattr__(self, "x_names", x_names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SurveyDataset):
            return NotImplemented
        arrays = ("y", "x", "final_weights", "rep_weights")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.y_names == other.y_names and self.x_names == other.x_names)

    __hash__ = object.__hash__

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def B(self) -> int:
        return self.rep_weights.shape[1]

    @property
    def n_hat(self) -> float:
        """Estimated population size, the sum of the final weights."""
        return math.fsum(self.final_weights)

    @property
    def normalized_weights(self) -> np.ndarray:
        return self.final_weights / self.n_hat

    def require_replicates(self) -> None:
        if self.B < 1:
            raise ValidationError("this operation needs replication-weight columns (B >= 1)")

    def with_weights(self, final_weights=None, rep_weights=None) -> "SurveyDataset":
        return replace(
            self,
            final_weights=self.final_weights if final_weights is None else final_weights,
            rep_weights=self.rep_weights if rep_weights is None else rep_weights,
        )

    def with_x(self, x: np.ndarray, x_names: Sequence[str]) -> "SurveyDataset":
        return replace(self, x=x, x_names=tuple(x_names))


@dataclass(frozen=True)
class DesignSample:
    """Sample records with their design weights ``d_i = 1/pi_i``.

    Only the simulation lab and the replication-weight producer need this;
    end users of a public-use file never have it.
    """

    y: np.ndarray
    x: np.ndarray
    design_weights: np.ndarray
    index: np.ndarray | None = None
    x_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        d = np.asarray(self.design_weights, dtype=float).ravel()
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise ValidationError("design weights must be finite and positive")
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.shape[0] != d.size or x.shape[0] != d.size:
            raise ValidationError("design sample columns have unequal length")
        object.__setattr__(self, "design_weights", _frozen(d))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))

    @property
    def n(self) -> int:
        return self.design_weights.size


def _parse_float(text: str, row: int, col: str) -> float:
    if text.strip().lower() in _MISSING:
        raise ValidationError(f"missing value in column {col!r} at row {row}")
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"row {row}: column {col!r} is not a number: {text!r}") from None


def load_dataset(path: str | Path, schema: Schema | Mapping[str, str]) -> SurveyDataset:
    """Read and validate a header-bearing CSV file.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {i} has {len(row)} fields, header has {len(header)}"
                )
            rows.append(row)

    pos = {h: j for j, h in enumerate(header)}
    wanted = list(schema.y) + list(schema.x) + [schema.weight]
    missing = [c for c in wanted if c not in pos]
    if missing:
        raise SchemaError(f"{path}: column(s) not found: {', '.join(missing)}")
    rep_cols: list[str] = []
    if schema.rep_prefix:
        b = 1
        while f"{schema.rep_prefix}{b}" in pos:
            rep_cols.append(f"{schema.rep_prefix}{b}")
            b += 1
        stray = [
            h for h in header
            if h.startswith(schema.rep_prefix) and h[len(schema.rep_prefix):].isdigit()
            and h not in rep_cols
        ]
        if stray:
            raise SchemaError(f"{path}: replication columns are not numbered 1..B: {stray[:3]}")

    def column_block(names):
        out = np.empty((len(rows), len(names)))
        for j, name in enumerate(names):
            k = pos[name]
            for i, row in enumerate(rows):
                out[i, j] = _parse_float(row[k], i + 1, name)
        return out

    w = column_block([schema.weight])[:, 0]
    bad = np.flatnonzero(w <= 0)
    if bad.size:
        raise ValidationError(
            f"{path}: final weight must be > 0; row {bad[0] + 1} has {float(w[bad[0]]):g}"
        )
    return SurveyDataset(
        y=column_block(schema.y),
        x=column_block(schema.x),
        final_weights=w,
        rep_weights=column_block(rep_cols),
        y_names=schema.y,
        x_names=schema.x,
        schema=schema,
        signed_replicates=schema.signed_replicates,
    )


def save_dataset(ds: SurveyDataset, path: str | Path, rep_prefix: str = "w_rep_",
                 weight_name: str = "w", extra: Mapping[str, np.ndarray] | None = None) -> Schema:
    """Write ``ds`` as CSV with 17 significant digits; returns the matching schema."""
    header = list(ds.y_names) + list(ds.x_names) + [weight_name]
    header += [f"{rep_prefix}{b + 1}" for b in range(ds.B)]
    cols = [ds.y, ds.x, ds.final_weights[:, None], ds.rep_weights]
    if extra:
        header += list(extra)
        cols += [np.asarray(v, dtype=float).reshape(ds.n, 1) for v in extra.values()]
    block = np.hstack(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in block:
            writer.writerow([format(v, ".17g") for v in row])
    return Schema(y=ds.y_names, x=ds.x_names, weight=weight_name,
                  rep_prefix=rep_prefix if ds.B else None,
                  signed_replicates=bool(np.any(ds.rep_weights < 0)))


def rescale_weights(ds: SurveyDataset, target: float) -> SurveyDataset:
    """Scale the final column and each replicate column to sum to ``target``.

    Replicate columns summing to zero are left untouched.
    """
    if not target > 0:
        raise ValueError("target must be positive")
    w = ds.final_weights * (target / ds.n_hat)
    rep = np.array(ds.rep_weights, copy=True)
    if rep.size:
        sums = rep.sum(axis=0)
        ok = sums > 0
        rep[:, ok] *= target / sums[ok]
    return ds.with_weights(final_weights=w, rep_weights=rep)


@dataclass(frozen=True)
class DesignSidecar:
    """Design information kept next to a data file for bootstrap calibration.

    ``weight_column`` names the design-weight column in the data CSV;
    ``calib_columns`` are covariate names used for calibration and ``totals``
    their benchmark totals (Horvitz-Thompson totals when omitted).
    """

    weight_column: str
    calib_columns: tuple[str, ...] = ()
    totals: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.totals is not None and len(self.totals) != len(self.calib_columns):
            raise SchemaError("design sidecar: totals and calib_columns differ in length")

    @classmethod
    def from_file(cls, path: str | Path) -> "DesignSidecar":
        m = read_keyvalue(path)
        if "weight_column" not in m:
            raise SchemaError(f"{path}: design sidecar needs 'weight_column'")
        cols = tuple(c.strip() for c in m.get("calib_columns", "").split(",") if c.strip())
        totals = m.get("totals", "").strip()
        return cls(m["weight_column"].strip(), cols,
                   tuple(float(t) for t in totals.split(",")) if totals else None)

    def write(self, path: str | Path) -> None:
        items = {"weight_column": self.weight_column, "calib_columns": ",".join(self.calib_columns)}
        if self.totals is not None:
            items["totals"] = ",".join(format(t, ".17g") for t in self.totals)
        write_keyvalue(path, items)

    def calib_indices(self, ds: SurveyDataset) -> tuple[int, ...]:
        missing = [c for c in self.calib_columns if c not in ds.x_names]
        if missing:
            raise SchemaError(f"calibration column(s) not among covariates: {', '.join(missing)}")
        return tuple(ds.x_names.index(c) for c in self.calib_columns)

    def design_sample(self, data_path: str | Path, ds: SurveyDataset) -> DesignSample:
        with open(data_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if self.weight_column not in header:
                raise SchemaError(f"{data_path}: design-weight column {self.weight_column!r} not found")
            k = header.index(self.weight_column)
            d = [_parse_float(row[k], i, self.weight_column)
                 for i, row in enumerate((r for r in reader if r and any(c.strip() for c in r)), start=1)]
        if len(d) != ds.n:
            raise ValidationError("design-weight column length differs from the dataset")
        return DesignSample(ds.y, ds.x, np.asarray(d), None, ds.x_names)
