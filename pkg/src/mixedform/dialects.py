"""Lowering of random-effect syntax to (design block, covariance) pairs.

Two dialects reach the same canonical form:

* grouped terms ``(effects | group)``: the effects expand like a fixed
  formula (implicit intercept included unless removed), every group level
  gets its own draw of the effect vector, and the covariance is
  unstructured over effects -- ``us(q)`` Kronecker ``id(m)`` -- or diagonal
  for ``||``, which is only legal over numeric effects;
* structural terms: covariance functions applied to factors
  (``us(site):id(geno)``), ``str(~effects, ~structure)`` with explicit
  effect lists, ``at(f, "L")`` level restrictions, ``giv(f)`` known
  covariances, or bare factors defaulting to a scaled identity.

``translate`` rewrites a lowered term into the other dialect where an
equivalent exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formula as F
from . import terms as T
from .covariance import (
    AR1,
    AR1V,
    US,
    BlockDiag,
    Diag,
    GIV,
    Id,
    IdV,
    Kron,
    VarStructure,
    check_identifiability,
)
from .data import DataTable, FactorColumn, NumericColumn, eval_atom
from .design import (
    RandomBlock,
    build_fixed,
    combo_codes,
    grouped_block,
    grouping_factors,
    indicator,
    restrict_rows,
    term_random_columns,
)
from .errors import (
    DimensionMismatch,
    FactorWithDoubleBar,
    NonSeparableLayout,
    StrDimensionMismatch,
    UnknownLevel,
    UnsupportedStructure,
    Untranslatable,
)
from scipy import sparse


@dataclass(eq=False)
class RandomTermSpec:
    """A lowered random term plus the metadata translation needs."""

    dialect: str  # "grouped" | "structural"
    source: F.Node
    block: RandomBlock
    structure: VarStructure
    pattern: str
    grouping: tuple[str, ...] = ()
    lhs_terms: T.TermList | None = None
    components: tuple[tuple[str, str], ...] = ()  # (function, argument text)
    str_effects: list[T.Term] = field(default_factory=list)
    correlated: bool = True


@dataclass(eq=False)
class ResidualPlan:
    """Residual structure plus the row ordering it requires."""

    structure: VarStructure
    sort_keys: tuple[str, ...]  # factor names, slowest-varying first
    at_factor: str | None = None
    components: tuple[tuple[str, str], ...] = ()
    source_text: str = ""


_SIMPLE_STRUCTURES = {
    "id": Id,
    "idv": IdV,
    "diag": Diag,
    "us": US,
    "ar1": AR1,
    "ar1v": AR1V,
}


def _term_is_numeric(term: T.Term, table: DataTable) -> bool:
    for comp in term.components:
        node = F.parse_formula("~" + comp).rhs
        if isinstance(eval_atom(node, table), FactorColumn):
            return False
    return True


def lower_grouped(
    node: F.Group, table: DataTable, known_cov: dict[str, GIV] | None = None
) -> RandomTermSpec:
    """Lower a grouped term ``(effects | group)`` or ``(effects || group)``."""
    known_cov = known_cov or {}
    tl = T.expand(node.inner)
    if not node.correlated:
        for term in tl.terms:
            if not _term_is_numeric(term, table):
                raise FactorWithDoubleBar(
                    f"'||' leaves factor effects such as {term} correlated "
                    "rather than independent; use '|' or convert the factor "
                    "to per-level numeric indicators"
                )
    factors = grouping_factors(node.grouping, table)
    if len(factors) == 1:
        name, col = factors[0]
        codes = col.codes
        levels = col.levels
        group_label = name
    else:
        codes, level_names, m = combo_codes(factors, observed_only=True)
        levels = tuple(level_names)
        group_label = ":".join(name for name, _ in factors)
    lhs = build_fixed(tl, table)
    term_label = F.unparse(node)
    block = grouped_block(lhs, codes, tuple(levels), group_label, term_label)
    m = block.group_count
    q = block.effects_per_group

    pattern = "grouped"
    single = factors[0][0] if len(factors) == 1 else None
    if single is not None and single in known_cov:
        if q != 1 or not tl.intercept or tl.terms:
            raise UnsupportedStructure(
                "a known covariance attaches to a pure intercept term like "
                f"(1 | {single})"
            )
        giv = known_cov[single]
        if giv.dim != m:
            raise DimensionMismatch(
                f"known covariance for {single!r} has dimension {giv.dim}, "
                f"factor has {m} levels"
            )
        structure: VarStructure = giv
        pattern = "grouped_giv"
    else:
        effect_struct = (
            US(q, label=f"us({q})") if node.correlated else Diag(q, label=f"diag({q})")
        )
        structure = Kron(
            (effect_struct, Id(m, label=f"id({m})")), label=term_label
        )
        structure = check_identifiability(structure, "random")
    return RandomTermSpec(
        dialect="grouped",
        source=node,
        block=block,
        structure=structure,
        pattern=pattern,
        grouping=tuple(name for name, _ in factors),
        lhs_terms=tl,
        correlated=node.correlated,
    )


def _product_chain(node) -> list:
    if isinstance(node, F.Interact):
        return _product_chain(node.left) + _product_chain(node.right)
    return [node]


def _structure_for_call(call: F.Call, table: DataTable | None):
    """Instantiate a simple structure call; returns (structure, factor name)."""
    ctor = _SIMPLE_STRUCTURES[call.func]
    if len(call.args) != 1:
        raise UnsupportedStructure(f"{call.func}() takes exactly one argument")
    arg = call.args[0]
    if isinstance(arg, F.IntLiteral):
        dim = arg.value
        if dim < 1:
            raise UnsupportedStructure(f"{call.func}({dim}) needs a positive dimension")
        return ctor(dim, label=f"{call.func}({dim})"), None
    if isinstance(arg, F.Variable):
        if table is None:
            raise UnsupportedStructure(
                f"{call.func}({arg.name}) needs data to resolve the factor dimension"
            )
        col = table.factor(arg.name)
        return (
            ctor(len(col.levels), label=f"{call.func}({arg.name})"),
            arg.name,
        )
    raise UnsupportedStructure(
        f"{call.func}() takes a factor name or an integer dimension"
    )


def _split_q_m(structure: Kron) -> tuple[int, int]:
    """Partition a Kronecker dim into (effects q, groups m) for reporting.

    Trailing identity components count as group replication.
    """
    m = 1
    comps = list(structure.components)
    while comps and isinstance(comps[-1], (Id, IdV)) and len(comps) > 1:
        m *= comps.pop().dim
    q = int(np.prod([c.dim for c in comps])) if comps else 1
    return q, m


def lower_structural(
    node,
    table: DataTable,
    known_cov: dict[str, GIV] | None = None,
) -> RandomTermSpec:
    """Lower one structural random term to a (block, structure) pair."""
    known_cov = known_cov or {}
    chain = _product_chain(node)

    # at(f, "L") restriction: qualifies the remainder of the product
    at_mask = None
    at_text = ""
    if isinstance(chain[0], F.Call) and chain[0].func == "at":
        call = chain[0]
        if len(call.args) != 2 or not isinstance(call.args[1], F.StringLiteral):
            raise UnsupportedStructure(
                'random-context at() needs a level: at(factor, "level")'
            )
        if not isinstance(call.args[0], F.Variable):
            raise UnsupportedStructure("at() takes a factor name")
        fac = table.factor(call.args[0].name)
        level = call.args[1].value
        if level not in fac.levels:
            raise UnknownLevel(
                f"{level!r} is not a level of {call.args[0].name!r}"
            )
        at_mask = fac.codes == fac.levels.index(level)
        at_text = F.unparse(call)
        chain = chain[1:]
        if not chain:
            raise UnsupportedStructure("at() must qualify a term")
        node = chain[0]
        for part in chain[1:]:
            node = F.Interact(node, part)

    term_label = F.unparse(node)

    if any(isinstance(c, F.Call) and c.func == "str" for c in chain):
        if len(chain) != 1:
            raise UnsupportedStructure("str() cannot be part of a product")
        spec = _lower_str(chain[0], table, term_label)
    elif any(isinstance(c, F.Call) and c.func == "giv" for c in chain):
        if len(chain) != 1:
            raise UnsupportedStructure("giv() cannot be part of a product")
        spec = _lower_giv(chain[0], table, known_cov, term_label)
    elif all(isinstance(c, F.Variable) for c in chain):
        spec = _lower_bare(chain, table, term_label)
    elif all(isinstance(c, F.Call) for c in chain):
        spec = _lower_kron(chain, table, term_label)
    else:
        raise UnsupportedStructure(
            f"cannot mix bare factors and covariance calls in {term_label!r}"
        )

    if at_mask is not None:
        spec.block = RandomBlock(
            restrict_rows(spec.block.z, at_mask),
            group_count=spec.block.group_count,
            effects_per_group=spec.block.effects_per_group,
            column_labels=spec.block.column_labels,
            label=f"{at_text}:{spec.block.label}",
        )
        spec.pattern = "at"
        spec.source = node
    return spec


def _lower_bare(chain, table, term_label) -> RandomTermSpec:
    factors = [(v.name, table.factor(v.name)) for v in chain]
    if len(factors) == 1:
        name, col = factors[0]
        codes, levels = col.codes, col.levels
    else:
        codes, levels, _ = combo_codes(factors, observed_only=True)
    m = len(levels)
    z = indicator(codes, m)
    labels = [f"{term_label}[{lvl}]" for lvl in levels]
    block = RandomBlock(z, group_count=m, effects_per_group=1,
                        column_labels=labels, label=term_label)
    structure = IdV(m, label=f"idv({term_label})")
    pattern = "bare" if len(factors) == 1 else "bare_combo"
    return RandomTermSpec(
        dialect="structural",
        source=chain[0] if len(chain) == 1 else None,
        block=block,
        structure=structure,
        pattern=pattern,
        grouping=tuple(name for name, _ in factors),
        components=tuple(("idv" if i == 0 else "id", name)
                         for i, (name, _) in enumerate(factors)),
    )


def _lower_kron(chain, table, term_label) -> RandomTermSpec:
    comps = []
    comp_meta = []
    factors = []
    for call in chain:
        if call.func not in _SIMPLE_STRUCTURES:
            raise UnsupportedStructure(
                f"{call.func}() is not usable in a random-term product"
            )
        structure, fac_name = _structure_for_call(call, table)
        if fac_name is None:
            raise UnsupportedStructure(
                "integer dimensions are only meaningful inside str()"
            )
        comps.append(structure)
        arg_text = F.unparse(call.args[0])
        comp_meta.append((call.func, arg_text))
        factors.append((fac_name, table.factor(fac_name)))
    if len(comps) == 1:
        check_identifiability(Kron((comps[0],), label=term_label), "random")
        structure = comps[0]
        name, col = factors[0]
        codes, levels = col.codes, col.levels
        z = indicator(codes, len(levels))
        labels = [f"{name}[{lvl}]" for lvl in levels]
        q, m = 1, len(levels)
    else:
        structure = check_identifiability(Kron(tuple(comps), label=term_label), "random")
        codes, levels, m_total = combo_codes(factors, observed_only=False)
        z = indicator(codes, m_total)
        labels = list(levels)
        q, m = _split_q_m(structure)
    block = RandomBlock(z, group_count=m, effects_per_group=q,
                        column_labels=labels, label=term_label)
    return RandomTermSpec(
        dialect="structural",
        source=None,
        block=block,
        structure=structure,
        pattern="kron",
        grouping=tuple(name for name, _ in factors),
        components=tuple(comp_meta),
    )


def _lower_str(call: F.Call, table: DataTable, term_label: str) -> RandomTermSpec:
    if len(call.args) != 2 or not all(isinstance(a, F.Formula) for a in call.args):
        raise UnsupportedStructure(
            "str() takes two one-sided formulas: ~effects and ~structure"
        )
    effects_formula, structure_formula = call.args
    if effects_formula.lhs is not None or structure_formula.lhs is not None:
        raise UnsupportedStructure("str() arguments must be one-sided formulas")
    effect_terms, intercept = T.expand_parts(effects_formula.rhs)
    if intercept is True:
        raise UnsupportedStructure(
            "str() effects carry no implicit intercept; an explicit 1 is not "
            "supported"
        )
    if not effect_terms:
        raise UnsupportedStructure("str() effects formula is empty")
    mats = []
    labels: list[str] = []
    for term in effect_terms:
        mat, term_labels = term_random_columns(term, table)
        mats.append(mat)
        labels.extend(f"{term}.{lbl}" for lbl in term_labels)
    z_dense = np.hstack(mats)
    q_total = z_dense.shape[1]

    struct_chain = _product_chain(structure_formula.rhs)
    comps = []
    comp_meta = []
    for comp_call in struct_chain:
        if not isinstance(comp_call, F.Call) or comp_call.func not in _SIMPLE_STRUCTURES:
            raise UnsupportedStructure(
                "the str() structure formula must be a product of covariance "
                "calls such as diag(2):id(50)"
            )
        structure, _ = _structure_for_call(comp_call, table)
        comps.append(structure)
        comp_meta.append((comp_call.func, F.unparse(comp_call.args[0])))
    structure = check_identifiability(Kron(tuple(comps), label=term_label), "random")
    if structure.dim != q_total:
        raise StrDimensionMismatch(
            f"str() structure has dimension {structure.dim} but the effects "
            f"formula produces {q_total} effects"
        )
    q, m = _split_q_m(structure)
    block = RandomBlock(
        sparse.csr_matrix(z_dense),
        group_count=m,
        effects_per_group=q,
        column_labels=labels,
        label=term_label,
    )
    return RandomTermSpec(
        dialect="structural",
        source=call,
        block=block,
        structure=structure,
        pattern="str",
        components=tuple(comp_meta),
        str_effects=effect_terms,
    )


def _lower_giv(call: F.Call, table: DataTable, known_cov, term_label) -> RandomTermSpec:
    if len(call.args) != 1 or not isinstance(call.args[0], F.Variable):
        raise UnsupportedStructure("giv() takes a single factor name")
    name = call.args[0].name
    col = table.factor(name)
    if name not in known_cov:
        raise UnsupportedStructure(
            f"giv({name}) requires a pedigree or ginverse supplied for {name!r}"
        )
    giv = known_cov[name]
    m = len(col.levels)
    if giv.dim != m:
        raise DimensionMismatch(
            f"ginverse for {name!r} has dimension {giv.dim}, factor has {m} levels"
        )
    z = indicator(col.codes, m)
    labels = [f"{name}[{lvl}]" for lvl in col.levels]
    block = RandomBlock(z, group_count=m, effects_per_group=1,
                        column_labels=labels, label=term_label)
    return RandomTermSpec(
        dialect="structural",
        source=call,
        block=block,
        structure=giv,
        pattern="giv",
        grouping=(name,),
        components=(("giv", name),),
    )


# --- residual structures --------------------------------------------------------

def lower_rcov(rhs, table: DataTable) -> ResidualPlan:
    """Lower a residual formula to a normalized structure plus sort keys."""
    chain = _product_chain(rhs)
    source_text = F.unparse(rhs)

    at_factor = None
    if isinstance(chain[0], F.Call) and chain[0].func == "at":
        call = chain[0]
        if len(call.args) != 1 or not isinstance(call.args[0], F.Variable):
            raise UnsupportedStructure(
                "residual at() takes a single factor: at(site)"
            )
        at_factor = call.args[0].name
        table.factor(at_factor)
        chain = chain[1:]
        if not chain:
            raise UnsupportedStructure("at() must qualify a residual structure")

    comp_meta = []
    comp_factors: list[str] = []
    for comp_call in chain:
        if not isinstance(comp_call, F.Call) or comp_call.func not in _SIMPLE_STRUCTURES:
            raise UnsupportedStructure(
                f"residual structures are products of covariance calls, got "
                f"{F.unparse(comp_call)!r}"
            )
        if not (len(comp_call.args) == 1 and isinstance(comp_call.args[0], F.Variable)):
            raise UnsupportedStructure("residual calls take a factor name")
        comp_factors.append(comp_call.args[0].name)
        comp_meta.append((comp_call.func, comp_call.args[0].name))

    if at_factor is None:
        comps = [
            _SIMPLE_STRUCTURES[fn](
                len(table.factor(fac).levels), label=f"{fn}({fac})"
            )
            for fn, fac in comp_meta
        ]
        structure = check_identifiability(
            Kron(tuple(comps), label=source_text), "residual"
        )
        return ResidualPlan(
            structure=structure,
            sort_keys=tuple(comp_factors),
            components=tuple(comp_meta),
            source_text=source_text,
        )

    at_col = table.factor(at_factor)
    blocks = []
    for code, level in enumerate(at_col.levels):
        mask = at_col.codes == code
        comps = []
        for fn, fac in comp_meta:
            col = table.factor(fac)
            observed = np.unique(col.codes[mask])
            comps.append(
                _SIMPLE_STRUCTURES[fn](len(observed), label=f"{fn}({fac})")
            )
        blocks.append(
            check_identifiability(Kron(tuple(comps)), "residual")
        )
    structure = BlockDiag(at_col.levels, tuple(blocks), label=source_text)
    return ResidualPlan(
        structure=structure,
        sort_keys=(at_factor, *comp_factors),
        at_factor=at_factor,
        components=tuple(comp_meta),
        source_text=source_text,
    )


def validate_separable_layout(plan: ResidualPlan, table: DataTable) -> None:
    """Check the sorted table fills the grids a separable residual assumes."""
    if not plan.components:
        return

    def check_grid(mask: np.ndarray, where: str) -> None:
        factor_codes = []
        dims = []
        for _, fac in plan.components:
            codes = table.factor(fac).codes[mask]
            observed = np.unique(codes)
            remap = {v: i for i, v in enumerate(observed)}
            factor_codes.append(np.array([remap[v] for v in codes]))
            dims.append(len(observed))
        flat = np.ravel_multi_index(factor_codes, dims)
        expected = np.arange(int(np.prod(dims)))
        if flat.shape != expected.shape or not np.array_equal(np.sort(flat), expected):
            raise NonSeparableLayout(
                f"observations {where} do not fill the "
                f"{' x '.join(str(d) for d in dims)} grid exactly once"
            )

    if plan.at_factor is None:
        check_grid(np.ones(table.n_rows, dtype=bool), "")
        return
    at_col = table.factor(plan.at_factor)
    for code, level in enumerate(at_col.levels):
        check_grid(at_col.codes == code, f"at {plan.at_factor}={level}")


# --- translation ------------------------------------------------------------------

@dataclass
class Translation:
    text: str
    table: DataTable  # input table, augmented with derived indicator columns


def _indicator_column_names(
    levels: tuple[str, ...], table: DataTable
) -> list[str]:
    names = []
    for lvl in levels:
        name = lvl if lvl not in table else f"__ind_{lvl}"
        names.append(name)
    return names


def translate(
    spec: RandomTermSpec, target: str, table: DataTable
) -> Translation:
    """Rewrite a lowered random term in the target dialect.

    Raises Untranslatable when the target dialect cannot express the term,
    with the reason.  Translating a diagonal structure to the grouped
    dialect derives per-level numeric indicator columns and returns them on
    the augmented table.
    """
    if target not in ("grouped", "structural"):
        raise ValueError(f"unknown dialect {target!r}")
    if target == spec.dialect:
        return Translation(F.unparse(spec.source), table)
    if target == "structural":
        return _translate_to_structural(spec, table)
    return _translate_to_grouped(spec, table)


def _translate_to_structural(spec: RandomTermSpec, table) -> Translation:
    if spec.pattern == "grouped_giv":
        return Translation(f"giv({spec.grouping[0]})", table)
    tl = spec.lhs_terms
    if tl is None:
        raise Untranslatable("term carries no grouped-dialect metadata")
    groups = spec.grouping
    if tl.intercept and not tl.terms:
        parts = [f"idv({groups[0]})"] + [f"id({g})" for g in groups[1:]]
        return Translation(":".join(parts), table)
    if len(groups) == 1 and not tl.intercept and len(tl.terms) == 1:
        term = tl.terms[0]
        if term.order == 1 and not _term_is_numeric(term, table):
            fn = "us" if spec.correlated else "diag"
            return Translation(
                f"{fn}({term.components[0]}):id({groups[0]})", table
            )
    if len(groups) == 1 and all(_term_is_numeric(t, table) for t in tl.terms):
        g = groups[0]
        effects = []
        if tl.intercept:
            effects.append(g)
        effects.extend(f"{g}:{t}" for t in tl.terms)
        q = spec.block.effects_per_group
        m = spec.block.group_count
        fn = "us" if spec.correlated else "diag"
        return Translation(
            f"str(~{' + '.join(effects)}, ~{fn}({q}):id({m}))", table
        )
    raise Untranslatable(
        f"no structural equivalent for {F.unparse(spec.source)!r}"
    )


def _translate_to_grouped(spec: RandomTermSpec, table) -> Translation:
    if spec.pattern == "bare":
        return Translation(f"(1 | {spec.grouping[0]})", table)
    if spec.pattern == "bare_combo":
        return Translation(f"(1 | {':'.join(spec.grouping)})", table)
    if spec.pattern == "giv":
        raise Untranslatable(
            "the grouped dialect alone cannot carry a known covariance; "
            "a pedigree extension is required"
        )
    if spec.pattern == "at":
        raise Untranslatable("no grouped-dialect equivalent for at() terms")
    if spec.pattern == "kron":
        funcs = [fn for fn, _ in spec.components]
        args = [arg for _, arg in spec.components]
        if any(fn in ("ar1", "ar1v") for fn in funcs):
            raise Untranslatable(
                "no grouped-dialect equivalent for autoregressive structures"
            )
        if len(spec.components) == 1 and funcs[0] == "idv":
            return Translation(f"(1 | {args[0]})", table)
        if len(spec.components) == 2 and funcs[-1] in ("id", "idv"):
            first, second = funcs
            if {first, second} <= {"id", "idv"}:
                return Translation(f"(1 | {args[0]}:{args[1]})", table)
            if first == "us" and second == "id":
                return Translation(f"(0 + {args[0]} | {args[1]})", table)
            if first == "diag" and second == "id":
                fac = table.factor(args[0])
                names = _indicator_column_names(fac.levels, table)
                augmented = table
                for name, code in zip(names, range(len(fac.levels))):
                    augmented = augmented.with_column(
                        name,
                        NumericColumn((fac.codes == code).astype(float)),
                    )
                effects = " + ".join(names)
                return Translation(f"(0 + {effects} || {args[1]})", augmented)
        raise Untranslatable(
            f"no grouped-dialect equivalent for {F.unparse(spec.source) if spec.source else 'this structural product'}"
        )
    if spec.pattern == "str":
        groups = {t.components[0] for t in spec.str_effects}
        if len(groups) != 1:
            raise Untranslatable(
                "str() effects must share one grouping factor to translate"
            )
        g = groups.pop()
        slopes = []
        has_intercept_effect = False
        for term in spec.str_effects:
            rest = [c for c in term.components if c != g]
            if not rest:
                has_intercept_effect = True
            elif len(rest) == 1:
                slopes.append(rest[0])
            else:
                raise Untranslatable(
                    "str() effects beyond group and group:numeric have no "
                    "grouped equivalent"
                )
        fn = spec.components[0][0] if spec.components else "us"
        bar = "||" if fn == "diag" else "|"
        if bar == "||":
            for slope in slopes:
                node = F.parse_formula("~" + slope).rhs
                if isinstance(eval_atom(node, table), FactorColumn):
                    raise Untranslatable(
                        "'||' cannot decorrelate factor effects"
                    )
        lhs = (["1"] if has_intercept_effect else ["0"]) + slopes
        return Translation(f"({' + '.join(lhs)} {bar} {g})", table)
    raise Untranslatable("no grouped-dialect equivalent for this term")


def translate_rcov(plan: ResidualPlan, target: str) -> Translation:
    """Residual structures have no grouped-dialect counterpart."""
    if target == "structural":
        return Translation(plan.source_text, None)
    raise Untranslatable(
        "the grouped dialect fixes the residual to iid; structured residuals "
        f"such as {plan.source_text!r} cannot be expressed"
    )
