"""Design matrices: fixed-effect dummy coding and random-effect blocks.

Fixed effects use treatment contrasts: with an intercept every factor drops
its first level; without one, the first factor encountered keeps all levels
and later factors drop-first.  Interaction columns are elementwise products
of the coded component columns.

Random-effect blocks are stored sparsely and vectorized effect-major: all
group levels of the first effect, then all group levels of the second, so a
block's covariance is (effect structure) Kronecker (identity over groups).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import formula as F
from .data import DataTable, FactorColumn, eval_atom
from .errors import EmptyGroup, NumericGrouping, RankDeficiencyWarning
from .terms import Term, TermList


@dataclass(eq=False)
class DesignMatrix:
    values: np.ndarray  # n x p
    column_labels: list[str]
    term_spans: dict[Term, tuple[int, int]]
    intercept: bool

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class RandomBlock:
    """One random-effect design block with effect-major column ordering."""

    z: sparse.csr_matrix = field(repr=False)
    group_count: int
    effects_per_group: int
    column_labels: list[str]
    label: str = ""

    @property
    def q_total(self) -> int:
        return self.z.shape[1]

    def dense(self) -> np.ndarray:
        return self.z.toarray()


def _parse_atom(text: str):
    return F.parse_formula("~" + text).rhs


def _atom_columns(
    comp: str, table: DataTable, drop_first: bool
) -> tuple[np.ndarray, list[str], bool]:
    """Coded columns for one atom; returns (matrix, labels, was_factor)."""
    value = eval_atom(_parse_atom(comp), table)
    if isinstance(value, FactorColumn):
        mat = indicator(value.codes, len(value.levels)).toarray()
        labels = [f"{comp}[{lvl}]" for lvl in value.levels]
        if drop_first:
            mat = mat[:, 1:]
            labels = labels[1:]
        return mat, labels, True
    return np.asarray(value, dtype=float)[:, None], [comp], False


def _product_columns(
    parts: list[tuple[np.ndarray, list[str]]]
) -> tuple[np.ndarray, list[str]]:
    """All products across atoms; earlier atoms vary fastest."""
    mat, labels = parts[0]
    for nxt, nxt_labels in parts[1:]:
        cols = []
        out_labels = []
        for j in range(nxt.shape[1]):
            cols.append(mat * nxt[:, j][:, None])
            out_labels.extend(f"{a}:{nxt_labels[j]}" for a in labels)
        mat = np.hstack(cols)
        labels = out_labels
    return mat, labels


def build_fixed(tl: TermList, table: DataTable) -> DesignMatrix:
    """Build the fixed-effects design matrix for a canonical term list."""
    n = table.n_rows
    blocks: list[np.ndarray] = []
    labels: list[str] = []
    spans: dict[Term, tuple[int, int]] = {}
    if tl.intercept:
        blocks.append(np.ones((n, 1)))
        labels.append("(Intercept)")
    full_slot_open = not tl.intercept
    position = 1 if tl.intercept else 0
    for term in tl.terms:
        parts = []
        for comp in term.components:
            drop_first = True
            probe = eval_atom(_parse_atom(comp), table)
            if isinstance(probe, FactorColumn) and full_slot_open:
                drop_first = False
                full_slot_open = False
            mat, part_labels, _ = _atom_columns(comp, table, drop_first)
            parts.append((mat, part_labels))
        mat, term_labels = _product_columns(parts)
        blocks.append(mat)
        labels.extend(term_labels)
        spans[term] = (position, position + mat.shape[1])
        position += mat.shape[1]
    if not blocks:
        values = np.empty((n, 0))
    else:
        values = np.hstack(blocks)
    if values.shape[1] and np.linalg.matrix_rank(values) < values.shape[1]:
        warnings.warn(
            "fixed-effect design is rank deficient; estimates are not unique",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    return DesignMatrix(values, labels, spans, tl.intercept)


def indicator(codes: np.ndarray, n_levels: int) -> sparse.csr_matrix:
    """Level-indicator matrix; every row has exactly one 1."""
    codes = np.asarray(codes)
    if codes.size and codes.min() < 0:
        raise EmptyGroup("missing group codes survive in the data")
    n = len(codes)
    return sparse.csr_matrix(
        (np.ones(n), (np.arange(n), codes)), shape=(n, n_levels)
    )


def grouped_block(
    lhs: DesignMatrix,
    group_codes: np.ndarray,
    group_levels: tuple[str, ...],
    group_label: str,
    term_label: str,
) -> RandomBlock:
    """Effect-major block for a grouped term: column e*m + g."""
    m = len(group_levels)
    if m == 0:
        raise EmptyGroup(f"grouping {group_label!r} has no levels")
    q = lhs.p
    n = lhs.n
    rows = np.tile(np.arange(n), q)
    cols = np.concatenate([e * m + np.asarray(group_codes) for e in range(q)])
    data = np.concatenate([lhs.values[:, e] for e in range(q)])
    z = sparse.csr_matrix((data, (rows, cols)), shape=(n, q * m))
    z.eliminate_zeros()
    labels = [
        f"{effect}.{group_label}[{lvl}]"
        for effect in lhs.column_labels
        for lvl in group_levels
    ]
    return RandomBlock(z, group_count=m, effects_per_group=q,
                       column_labels=labels, label=term_label)


def combo_codes(
    factors: list[tuple[str, FactorColumn]], observed_only: bool
) -> tuple[np.ndarray, list[str], int]:
    """Combined codes over several factors, first factor varying slowest.

    With ``observed_only`` the level set is the observed combinations (in
    first-factor-major order); otherwise the full cartesian product.
    """
    dims = [len(col.levels) for _, col in factors]
    codes = [np.asarray(col.codes) for _, col in factors]
    for (name, col), c in zip(factors, codes):
        if c.size and c.min() < 0:
            raise EmptyGroup(f"missing values in grouping factor {name!r}")
    flat = np.ravel_multi_index(codes, dims)
    if observed_only:
        kept = np.unique(flat)  # sorted = first-factor-major
        remap = {v: i for i, v in enumerate(kept)}
        combined = np.array([remap[v] for v in flat])
        names = []
        for v in kept:
            multi = np.unravel_index(v, dims)
            names.append(":".join(factors[k][1].levels[i] for k, i in enumerate(multi)))
        return combined, names, len(kept)
    names = []
    for v in range(int(np.prod(dims))):
        multi = np.unravel_index(v, dims)
        names.append(":".join(factors[k][1].levels[i] for k, i in enumerate(multi)))
    return flat, names, int(np.prod(dims))


def term_random_columns(
    term: Term, table: DataTable
) -> tuple[np.ndarray, list[str]]:
    """Random-effect coding of one term: factors keep all levels."""
    parts = []
    for comp in term.components:
        mat, labels, _ = _atom_columns(comp, table, drop_first=False)
        parts.append((mat, labels))
    return _product_columns(parts)


def restrict_rows(z: sparse.csr_matrix, keep: np.ndarray) -> sparse.csr_matrix:
    """Zero out the rows where ``keep`` is False, preserving shape."""
    mask = sparse.diags(keep.astype(float))
    out = (mask @ z).tocsr()
    out.eliminate_zeros()
    return out


def grouping_factors(node, table: DataTable) -> list[tuple[str, FactorColumn]]:
    """Resolve a grouping expression (factor or factor interaction)."""
    if isinstance(node, F.Variable):
        col = table[node.name]
        if not isinstance(col, FactorColumn):
            raise NumericGrouping(
                f"grouping variable {node.name!r} is numeric; a factor is required"
            )
        return [(node.name, col)]
    if isinstance(node, F.Interact):
        return grouping_factors(node.left, table) + grouping_factors(node.right, table)
    raise NumericGrouping(
        f"grouping expression {F.unparse(node)!r} is not a factor or factor "
        "interaction"
    )
