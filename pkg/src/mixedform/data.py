"""Tabular data ingestion: typed columns from CSV and atom evaluation.

Columns are either numeric (float vectors, NaN for missing) or factors
(ordered unique levels plus integer codes, -1 for missing).  Inference
types a column numeric when every non-missing value parses as a number,
otherwise as a factor with levels in lexicographic order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formula as F
from .errors import (
    DomainError,
    EmptyTable,
    MalformedCsv,
    SchemaMismatch,
    TransformOnFactor,
    UnknownVariable,
)

MISSING_TOKENS = {"", "NA"}


@dataclass(frozen=True)
class NumericColumn:
    values: np.ndarray  # float64; NaN marks missing

    def __len__(self) -> int:
        return len(self.values)

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass(frozen=True)
class FactorColumn:
    levels: tuple[str, ...]
    codes: np.ndarray  # int64; -1 marks missing

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def missing_mask(self) -> np.ndarray:
        return self.codes < 0

    def decode(self) -> list[str | None]:
        return [self.levels[c] if c >= 0 else None for c in self.codes]


Column = NumericColumn | FactorColumn


@dataclass(frozen=True)
class DataTable:
    """Immutable rectangular table of named, typed columns."""

    columns: dict[str, Column]
    n_rows: int

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise UnknownVariable(f"no column named {name!r}") from None

    def names(self) -> list[str]:
        return list(self.columns)

    def factor(self, name: str) -> FactorColumn:
        col = self[name]
        if not isinstance(col, FactorColumn):
            raise SchemaMismatch(f"column {name!r} is numeric, expected a factor")
        return col

    def numeric(self, name: str) -> NumericColumn:
        col = self[name]
        if not isinstance(col, NumericColumn):
            raise SchemaMismatch(f"column {name!r} is a factor, expected numeric")
        return col

    def subset(self, selector: np.ndarray) -> "DataTable":
        """Row subset or reordering; factor level sets are preserved.

        ``selector`` may be a boolean mask or an integer index array.
        """
        cols: dict[str, Column] = {}
        n = None
        for name, col in self.columns.items():
            if isinstance(col, NumericColumn):
                cols[name] = NumericColumn(col.values[selector])
            else:
                cols[name] = FactorColumn(col.levels, col.codes[selector])
            n = len(cols[name])
        return DataTable(cols, n if n is not None else 0)

    def reorder(self, order: np.ndarray) -> "DataTable":
        return self.subset(np.asarray(order))

    def with_column(self, name: str, col: Column) -> "DataTable":
        if len(col) != self.n_rows:
            raise SchemaMismatch(
                f"column {name!r} has {len(col)} rows, table has {self.n_rows}"
            )
        cols = dict(self.columns)
        cols[name] = col
        return DataTable(cols, self.n_rows)


def _parse_number(token: str) -> float | None:
    try:
        return float(token)
    except ValueError:
        return None


def _make_column(name: str, raw: list[str], kind: str | None) -> Column:
    present = [v for v in raw if v not in MISSING_TOKENS]
    if kind is None:
        numeric = bool(present) and all(_parse_number(v) is not None for v in present)
        kind = "numeric" if numeric else "factor"
    if kind == "numeric":
        values = np.empty(len(raw))
        for i, v in enumerate(raw):
            if v in MISSING_TOKENS:
                values[i] = np.nan
            else:
                parsed = _parse_number(v)
                if parsed is None:
                    raise SchemaMismatch(
                        f"column {name!r} declared numeric but holds {v!r}"
                    )
                values[i] = parsed
        return NumericColumn(values)
    if kind == "factor":
        levels = tuple(sorted(set(present)))
        index = {lvl: i for i, lvl in enumerate(levels)}
        codes = np.array(
            [index[v] if v not in MISSING_TOKENS else -1 for v in raw], dtype=np.int64
        )
        return FactorColumn(levels, codes)
    raise SchemaMismatch(f"unknown column kind {kind!r} for {name!r}")


def read_csv(path, schema: dict[str, str] | None = None) -> DataTable:
    """Load an RFC-4180-style CSV with a header row into a DataTable.

    ``schema`` optionally maps column names to ``"numeric"`` or ``"factor"``;
    unlisted columns are inferred.  Missing values are the empty string and
    ``NA``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyTable(f"{path} is empty") from None
        if len(set(header)) != len(header):
            raise MalformedCsv(f"duplicate column names in {path}", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedCsv(
                    f"expected {len(header)} fields, found {len(row)}", line=lineno
                )
            rows.append(row)
    if not rows:
        raise EmptyTable(f"{path} has a header but no data rows")
    schema = schema or {}
    for name in schema:
        if name not in header:
            raise SchemaMismatch(f"schema names unknown column {name!r}")
    columns: dict[str, Column] = {}
    for j, name in enumerate(header):
        raw = [row[j].strip() for row in rows]
        columns[name] = _make_column(name, raw, schema.get(name))
    return DataTable(columns, len(rows))


def from_columns(columns: dict[str, Column]) -> DataTable:
    lengths = {len(c) for c in columns.values()}
    if len(lengths) != 1:
        raise SchemaMismatch("columns have differing lengths")
    return DataTable(dict(columns), lengths.pop())


_TRANSFORMS = {
    "log": np.log,
    "sqrt": np.sqrt,
    "exp": np.exp,
}


def atom_variables(node) -> list[str]:
    """Variable names referenced by an atom (a variable or transform call)."""
    if isinstance(node, F.Variable):
        return [node.name]
    if isinstance(node, F.Call) and node.func in F.TRANSFORM_FUNCTIONS:
        out: list[str] = []
        for arg in node.args:
            out.extend(atom_variables(arg))
        return out
    raise UnknownVariable(f"not an atom: {F.unparse(node)}")


def eval_atom(node, table: DataTable):
    """Evaluate a variable or transformation atom against the table.

    Returns a float vector for numeric atoms and the FactorColumn itself for
    a bare factor variable.  Transformations apply elementwise to numeric
    columns only, and ``log``/``sqrt`` report the first out-of-domain row.
    """
    if isinstance(node, str):
        node = F.parse_formula("~" + node).rhs
    if isinstance(node, F.Variable):
        col = table[node.name]
        if isinstance(col, FactorColumn):
            return col
        return col.values
    if isinstance(node, F.Call) and node.func in F.TRANSFORM_FUNCTIONS:
        if len(node.args) != 1:
            raise DomainError(f"{node.func} takes exactly one argument")
        inner = eval_atom(node.args[0], table)
        if isinstance(inner, FactorColumn):
            raise TransformOnFactor(
                f"cannot apply {node.func!r} to a factor column"
            )
        values = np.asarray(inner, dtype=float)
        finite = ~np.isnan(values)
        if node.func == "log":
            bad = finite & (values <= 0.0)
            if bad.any():
                row = int(np.argmax(bad))
                raise DomainError(f"log of non-positive value at row {row}")
        elif node.func == "sqrt":
            bad = finite & (values < 0.0)
            if bad.any():
                row = int(np.argmax(bad))
                raise DomainError(f"sqrt of negative value at row {row}")
        with np.errstate(invalid="ignore"):
            return _TRANSFORMS[node.func](values)
    raise UnknownVariable(f"cannot evaluate {F.unparse(node)!r} against the table")
