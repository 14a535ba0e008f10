"""Expansion of fixed-effect expressions into a canonical term list.

Implements Wilkinson-style rewriting: ``a*b`` is shorthand for
``a + b + a:b``, ``(s)^k`` produces all products of up to ``k`` distinct
terms of ``s``, duplicate terms and components collapse, and the intercept
markers ``1``/``0``/``-1`` follow the conventional special cases
(``1:x`` keeps only the intercept, ``1*x`` keeps only the intercept,
``x*1`` keeps ``x``, ``-1:x`` removes the intercept).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

from . import formula as F
from .errors import (
    AbsentTermWarning,
    GroupInFixedContext,
    InterceptRewriteWarning,
    StructuralCallInFixedContext,
    TermAlgebraError,
)


@dataclass(frozen=True, eq=False)
class Term:
    """One model term: an ordered set of atomic factor names.

    Components are deduplicated (``x:x`` is ``x``) and kept in first
    appearance order; equality and hashing use set semantics so ``a:b``
    and ``b:a`` are the same term.
    """

    components: tuple[str, ...]

    def __post_init__(self):
        seen: dict[str, None] = {}
        for c in self.components:
            seen.setdefault(c, None)
        object.__setattr__(self, "components", tuple(seen))

    @property
    def order(self) -> int:
        return len(self.components)

    @property
    def key(self) -> frozenset:
        return frozenset(self.components)

    def __eq__(self, other) -> bool:
        return isinstance(other, Term) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __str__(self) -> str:
        return ":".join(self.components)

    def __repr__(self) -> str:
        return f"Term({':'.join(self.components)})"


@dataclass(eq=False)
class TermList:
    """Deduplicated fixed-effect terms plus an intercept flag.

    Terms are ordered by ascending interaction order, ties by first
    appearance.
    """

    terms: list[Term]
    intercept: bool

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TermList)
            and self.terms == other.terms
            and self.intercept == other.intercept
        )


@dataclass
class _Parts:
    """Intermediate expansion state: terms plus a tri-state intercept.

    ``intercept`` is None while no marker has been seen, then True/False.
    """

    terms: list[Term]
    intercept: bool | None


def _union_terms(a: list[Term], b: list[Term]) -> list[Term]:
    out = list(a)
    keys = {t.key for t in a}
    for t in b:
        if t.key not in keys:
            out.append(t)
            keys.add(t.key)
    return out


def _combine_add(left: _Parts, right: _Parts) -> _Parts:
    if left.intercept is True and right.intercept is False:
        warnings.warn(
            "an explicit intercept is removed again later in the sum; "
            "this simplification is ecosystem-dependent",
            InterceptRewriteWarning,
            stacklevel=4,
        )
    intercept = right.intercept if right.intercept is not None else left.intercept
    return _Parts(_union_terms(left.terms, right.terms), intercept)


def _combine_sub(left: _Parts, right: _Parts) -> _Parts:
    removed_keys = {t.key for t in right.terms}
    kept = [t for t in left.terms if t.key not in removed_keys]
    present = {t.key for t in left.terms}
    for t in right.terms:
        if t.key not in present:
            warnings.warn(
                f"removal of absent term {t}; ignored",
                AbsentTermWarning,
                stacklevel=4,
            )
    intercept = left.intercept
    if right.intercept is True:
        intercept = False
    elif right.intercept is False:
        warnings.warn("removal of '0' has no effect", AbsentTermWarning, stacklevel=4)
    return _Parts(kept, intercept)


def _interact(left: _Parts, right: _Parts) -> _Parts:
    # Pairwise component union; a bare `1` operand absorbs whatever it meets,
    # so `1:x` contributes the intercept marker and drops x.
    terms = []
    for ta in left.terms:
        for tb in right.terms:
            terms.append(Term(ta.components + tb.components))
    terms = _union_terms([], terms)
    one = False
    left_has = left.terms or left.intercept is True
    right_has = right.terms or right.intercept is True
    if left.intercept is True and right_has:
        one = True
    if right.intercept is True and left_has:
        one = True
    if left.intercept is False or right.intercept is False:
        intercept: bool | None = False
    elif one:
        intercept = True
    else:
        intercept = None
    return _Parts(terms, intercept)


def _is_literal(node, value: int) -> bool:
    return isinstance(node, F.IntLiteral) and node.value == value


def _atom(node) -> Term:
    return Term((F.unparse(node),))


def _expand_node(node) -> _Parts:
    if isinstance(node, F.IntLiteral):
        if node.value == 1:
            return _Parts([], True)
        return _Parts([], False)
    if isinstance(node, F.Variable):
        return _Parts([_atom(node)], None)
    if isinstance(node, F.Call):
        if node.func in F.TRANSFORM_FUNCTIONS:
            return _Parts([_atom(node)], None)
        raise StructuralCallInFixedContext(
            f"covariance function {node.func!r} is not legal in a fixed-effect "
            "expression"
        )
    if isinstance(node, F.Group):
        raise GroupInFixedContext(
            "grouped random term is not legal in a fixed-effect expression"
        )
    if isinstance(node, F.Sum):
        return _combine_add(_expand_node(node.left), _expand_node(node.right))
    if isinstance(node, F.Diff):
        left = _expand_node(node.left) if node.left is not None else _Parts([], None)
        return _combine_sub(left, _expand_node(node.right))
    if isinstance(node, F.Interact):
        return _interact(_expand_node(node.left), _expand_node(node.right))
    if isinstance(node, F.Cross):
        if _is_literal(node.left, 1):
            return _Parts([], True)
        if _is_literal(node.right, 1):
            return _expand_node(node.left)
        left = _expand_node(node.left)
        right = _expand_node(node.right)
        crossed = _interact(left, right)
        return _combine_add(_combine_add(left, right), crossed)
    if isinstance(node, F.Power):
        base = _expand_node(node.base)
        terms: list[Term] = []
        for size in range(1, node.exponent + 1):
            for combo in itertools.combinations(base.terms, size):
                components: tuple[str, ...] = ()
                for t in combo:
                    components = components + t.components
                terms.append(Term(components))
        return _Parts(_union_terms([], terms), base.intercept)
    if isinstance(node, F.StringLiteral):
        raise TermAlgebraError("string literal is not legal in a fixed-effect expression")
    if isinstance(node, F.Formula):
        raise TermAlgebraError("nested formula is not legal in a fixed-effect expression")
    raise TermAlgebraError(f"cannot expand {node!r}")


def expand(rhs) -> TermList:
    """Expand a fixed-effect expression into a canonical TermList.

    The intercept defaults to included when no ``0``/``1``/``-1`` marker
    appears.  Terms are sorted by (order, first appearance).
    """
    terms, intercept = expand_parts(rhs)
    return TermList(terms, True if intercept is None else intercept)


def expand_parts(rhs) -> tuple[list[Term], bool | None]:
    """Expansion with the intercept left tri-state (None = no marker seen).

    Used where the enclosing construct supplies no implicit intercept.
    """
    parts = _expand_node(rhs)
    terms = sorted(parts.terms, key=lambda t: t.order)  # stable: ties keep appearance
    return terms, parts.intercept


def canonical_text(tl: TermList) -> str:
    """Deterministic rendering with an explicit intercept marker.

    An included intercept is rendered as a leading ``1 +``; an excluded one
    as a trailing ``+ 0``.
    """
    rendered = [str(t) for t in tl.terms]
    if tl.intercept:
        return " + ".join(["1"] + rendered)
    if rendered:
        return " + ".join(rendered + ["0"])
    return "0"
