"""Assembly of a fittable model from formulas, data, and side inputs.

Responsibilities: split inline grouped terms out of the main formula,
drop rows with missing values in any referenced column (listwise, with a
count), sort rows into the order a separable residual requires, build the
fixed design and random blocks, and wire pedigrees or supplied generalized
inverses onto their factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formula as F
from . import terms as T
from .covariance import (
    GIV,
    IdV,
    Pedigree,
    SparseTriplets,
    VarStructure,
    load_giv,
    nrm_from_pedigree,
)
from .data import DataTable, FactorColumn, eval_atom
from .design import DesignMatrix, RandomBlock, build_fixed
from .dialects import (
    RandomTermSpec,
    ResidualPlan,
    lower_grouped,
    lower_rcov,
    lower_structural,
    validate_separable_layout,
)
from .errors import (
    DimensionMismatch,
    EmptyTable,
    FormulaSyntaxError,
    SchemaMismatch,
    UnsupportedStructure,
)


@dataclass(eq=False)
class ModelSpec:
    """The lowered model: response, designs, and covariance structures."""

    y: np.ndarray
    X: DesignMatrix
    random_blocks: list[tuple[RandomBlock, VarStructure]]
    residual: VarStructure
    row_order: np.ndarray  # permutation applied to the post-drop rows
    n_dropped: int
    response_label: str
    fixed_terms: T.TermList
    table: DataTable  # cleaned, sorted working table
    random_specs: list[RandomTermSpec] = field(default_factory=list)
    residual_plan: ResidualPlan | None = None

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.p

    @property
    def q_total(self) -> int:
        return sum(block.q_total for block, _ in self.random_blocks)


def _collect_variables(node, out: set[str]) -> None:
    if node is None:
        return
    if isinstance(node, F.Variable):
        out.add(node.name)
        return
    if isinstance(node, F.Formula):
        _collect_variables(node.lhs, out)
        _collect_variables(node.rhs, out)
        return
    if isinstance(node, F.Call):
        for arg in node.args:
            _collect_variables(arg, out)
        return
    if isinstance(node, (F.Sum, F.Diff, F.Cross, F.Interact)):
        _collect_variables(node.left, out)
        _collect_variables(node.right, out)
        return
    if isinstance(node, F.Power):
        _collect_variables(node.base, out)
        return
    if isinstance(node, F.Group):
        _collect_variables(node.inner, out)
        _collect_variables(node.grouping, out)
        return
    # literals carry no variables


def _split_inline_groups(node) -> tuple:
    """Split a sum chain into (fixed expression or None, group nodes)."""
    if isinstance(node, F.Group):
        return None, [node]
    if isinstance(node, F.Sum):
        left, lg = _split_inline_groups(node.left)
        right, rg = _split_inline_groups(node.right)
        if left is None:
            fixed = right
        elif right is None:
            fixed = left
        else:
            fixed = F.Sum(left, right)
        return fixed, lg + rg
    if isinstance(node, F.Diff):
        left, lg = _split_inline_groups(node.left) if node.left is not None else (None, [])
        _, rg = _split_inline_groups(node.right)
        if rg:
            raise UnsupportedStructure("grouped random terms cannot be subtracted")
        return (F.Diff(left, node.right), lg)
    return node, []


def _structural_terms(rhs) -> list:
    """Top-level summands of a one-sided structural random formula."""
    if isinstance(rhs, F.Sum):
        return _structural_terms(rhs.left) + _structural_terms(rhs.right)
    if isinstance(rhs, F.Diff):
        raise UnsupportedStructure("random terms combine with '+', not '-'")
    return [rhs]


def build_known_covariances(
    table: DataTable,
    pedigree: dict[str, Pedigree] | None = None,
    ginverse: dict[str, SparseTriplets] | None = None,
) -> dict[str, GIV]:
    """Map factors to known covariances from pedigrees or sparse inverses.

    Pedigree rows are matched to factor levels by individual id (levels may
    be a subset of the pedigree); ginverse triplet indices follow the
    factor's level order and must match its dimension.
    """
    known: dict[str, GIV] = {}
    for name, ped in (pedigree or {}).items():
        col = table.factor(name)
        a = nrm_from_pedigree(ped)
        ids = ped.ids()
        index = {ind: i for i, ind in enumerate(ids)}
        missing = [lvl for lvl in col.levels if lvl not in index]
        if missing:
            raise DimensionMismatch(
                f"levels of {name!r} missing from the pedigree: "
                + ", ".join(missing[:5])
            )
        take = [index[lvl] for lvl in col.levels]
        known[name] = GIV.from_covariance(a[np.ix_(take, take)], label=f"ped({name})")
    for name, triplets in (ginverse or {}).items():
        col = table.factor(name)
        giv = load_giv(triplets, label=f"giv({name})")
        if giv.dim != len(col.levels):
            raise DimensionMismatch(
                f"ginverse for {name!r} has dimension {giv.dim}, factor has "
                f"{len(col.levels)} levels"
            )
        known[name] = giv
    return known


def build_model(
    fixed: str | F.Formula,
    table: DataTable,
    random: str | F.Formula | None = None,
    rcov: str | F.Formula | None = None,
    pedigree: dict[str, Pedigree] | None = None,
    ginverse: dict[str, SparseTriplets] | None = None,
) -> ModelSpec:
    """Lower formulas against a table into a fittable ModelSpec."""
    if isinstance(fixed, str):
        fixed = F.parse_formula(fixed)
    if fixed.lhs is None:
        raise FormulaSyntaxError("model fitting needs a two-sided formula")
    fixed_rhs, inline_groups = _split_inline_groups(fixed.rhs)

    random_nodes: list = []
    if random is not None:
        if inline_groups:
            raise UnsupportedStructure(
                "grouped terms inside the main formula cannot be mixed with a "
                "separate random formula; use one style"
            )
        if isinstance(random, str):
            random = F.parse_formula(random)
        if random.lhs is not None:
            raise FormulaSyntaxError("the random formula must be one-sided")
        random_nodes = _structural_terms(random.rhs)

    rcov_rhs = None
    if rcov is not None:
        if isinstance(rcov, str):
            rcov = F.parse_formula(rcov)
        if rcov.lhs is not None:
            raise FormulaSyntaxError("the residual formula must be one-sided")
        rcov_rhs = rcov.rhs

    # listwise deletion over every referenced column
    referenced: set[str] = set()
    _collect_variables(fixed, referenced)
    for node in random_nodes:
        _collect_variables(node, referenced)
    _collect_variables(rcov_rhs, referenced)
    for name in sorted(referenced):
        table[name]  # raises UnknownVariable early
    keep = np.ones(table.n_rows, dtype=bool)
    for name in sorted(referenced):
        keep &= ~table[name].missing_mask
    n_dropped = int(table.n_rows - keep.sum())
    if keep.sum() == 0:
        raise EmptyTable("no rows remain after dropping missing values")
    clean = table.subset(keep) if n_dropped else table

    plan = lower_rcov(rcov_rhs, clean) if rcov_rhs is not None else None
    if plan is not None and plan.sort_keys:
        key_codes = [clean.factor(k).codes for k in plan.sort_keys]
        # np.lexsort treats the LAST key as primary; ours are slowest-first
        order = np.lexsort(tuple(reversed(key_codes)))
    else:
        order = np.arange(clean.n_rows)
    work = clean.reorder(order)
    if plan is not None:
        validate_separable_layout(plan, work)

    response = eval_atom(fixed.lhs, work)
    if isinstance(response, FactorColumn):
        raise SchemaMismatch("the response must be numeric")
    y = np.asarray(response, dtype=float)

    fixed_terms = T.expand(fixed_rhs) if fixed_rhs is not None else T.TermList([], True)
    x = build_fixed(fixed_terms, work)

    known = build_known_covariances(work, pedigree, ginverse)

    specs: list[RandomTermSpec] = []
    for group in inline_groups:
        specs.append(lower_grouped(group, work, known))
    for node in random_nodes:
        specs.append(lower_structural(node, work, known))

    blocks: list[tuple[RandomBlock, VarStructure]] = []
    for spec in specs:
        if spec.block.q_total != spec.structure.dim:
            raise DimensionMismatch(
                f"block {spec.block.label!r} has {spec.block.q_total} effects "
                f"but its structure has dimension {spec.structure.dim}"
            )
        blocks.append((spec.block, spec.structure))

    residual = plan.structure if plan is not None else IdV(work.n_rows)
    if residual.dim != work.n_rows:
        raise DimensionMismatch(
            f"residual structure has dimension {residual.dim} for "
            f"{work.n_rows} observations"
        )

    return ModelSpec(
        y=y,
        X=x,
        random_blocks=blocks,
        residual=residual,
        row_order=order,
        n_dropped=n_dropped,
        response_label=F.unparse(fixed.lhs),
        fixed_terms=fixed_terms,
        table=work,
        random_specs=specs,
        residual_plan=plan,
    )
