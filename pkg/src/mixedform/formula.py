"""Tokenizer and recursive-descent parser for symbolic model formulae.

One grammar accepts both random-effect dialects: parenthesized grouped terms
such as ``(1 + Time | Chick)`` and structural covariance calls such as
``us(site):id(geno)`` or ``str(~Chick + Chick:Time, ~diag(2):id(50))``.
Dialect legality is enforced by the lowering passes, not here.

Operator precedence, loosest to tightest: ``~``, then ``+``/``-``
(left-associative), then ``*``, then ``:``, then ``^``, then calls and
parentheses.  ``|`` and ``||`` never act as ordinary infix operators: a bar is
legal only directly inside parentheses, where it splits the group term into
its effects and its grouping expression.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import (
    BarOutsideParentheses,
    DanglingOperator,
    EmptyRhs,
    FormulaSyntaxError,
    UnbalancedParentheses,
    UnexpectedCharacter,
    UnknownFunction,
)

STRUCTURAL_FUNCTIONS = frozenset(
    {"us", "diag", "id", "idv", "ar1", "ar1v", "at", "str", "giv"}
)
TRANSFORM_FUNCTIONS = frozenset({"log", "sqrt", "exp"})


@dataclass(frozen=True)
class Token:
    kind: str  # ident int string tilde plus minus colon star caret bar dbar lparen rparen comma
    text: str
    position: int


_TOKEN_PATTERNS = [
    ("ws", re.compile(r"\s+")),
    ("dbar", re.compile(r"\|\|")),
    ("bar", re.compile(r"\|")),
    ("tilde", re.compile(r"~")),
    ("plus", re.compile(r"\+")),
    ("minus", re.compile(r"-")),
    ("colon", re.compile(r":")),
    ("star", re.compile(r"\*")),
    ("caret", re.compile(r"\^")),
    ("lparen", re.compile(r"\(")),
    ("rparen", re.compile(r"\)")),
    ("comma", re.compile(r",")),
    ("int", re.compile(r"\d+")),
    ("ident", re.compile(r"[A-Za-z_.][A-Za-z0-9_.]*")),
    ("string", re.compile(r'"[^"]*"')),
]


def tokenize(text: str) -> list[Token]:
    """Split formula source into tokens; ``||`` is taken greedily over ``|``."""
    tokens: list[Token] = []
    pos = 0
    n = len(text)
    while pos < n:
        for kind, pattern in _TOKEN_PATTERNS:
            m = pattern.match(text, pos)
            if m:
                if kind != "ws":
                    tokens.append(Token(kind, m.group(), pos))
                pos = m.end()
                break
        else:
            raise UnexpectedCharacter(f"unexpected character {text[pos]!r}", pos)
    return tokens


# --- AST nodes ----------------------------------------------------------------

class Node:
    """Base class for expression nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class Variable(Node):
    name: str


@dataclass(frozen=True)
class IntLiteral(Node):
    value: int


@dataclass(frozen=True)
class StringLiteral(Node):
    value: str


@dataclass(frozen=True)
class Sum(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Diff(Node):
    """Subtraction; ``left is None`` encodes a leading unary minus."""

    left: Node | None
    right: Node


@dataclass(frozen=True)
class Cross(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Interact(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Power(Node):
    base: Node
    exponent: int


@dataclass(frozen=True)
class Group(Node):
    """A parenthesized random term ``(inner | grouping)``."""

    inner: Node
    grouping: Node
    correlated: bool


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple = field(default_factory=tuple)  # Node or Formula entries


@dataclass(frozen=True)
class Formula:
    """A parsed formula; ``lhs`` is None for one-sided formulae."""

    lhs: Node | None
    rhs: Node


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    def peek(self) -> Token | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at(self, *kinds: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind in kinds

    def expect(self, kind: str, message: str) -> Token:
        tok = self.peek()
        if tok is None or tok.kind != kind:
            pos = tok.position if tok else self._end_position()
            if kind == "rparen":
                raise UnbalancedParentheses(message, pos)
            raise FormulaSyntaxError(message, pos)
        return self.advance()

    def _end_position(self) -> int:
        if self.tokens:
            last = self.tokens[-1]
            return last.position + len(last.text)
        return 0

    # grammar ------------------------------------------------------------

    def parse_formula(self) -> Formula:
        if not self.tokens:
            raise EmptyRhs("empty formula", 0)
        if self.at("tilde"):
            self.advance()
            rhs = self._parse_rhs()
            formula = Formula(None, rhs)
        else:
            lhs = self.parse_sum()
            self.expect("tilde", "expected '~' after response expression")
            rhs = self._parse_rhs()
            formula = Formula(lhs, rhs)
        self._check_exhausted()
        return formula

    def _parse_rhs(self) -> Node:
        if self.peek() is None:
            raise EmptyRhs("formula has no right-hand side", self._end_position())
        return self.parse_sum()

    def _check_exhausted(self) -> None:
        tok = self.peek()
        if tok is None:
            return
        if tok.kind in ("bar", "dbar"):
            raise BarOutsideParentheses(
                f"{tok.text!r} is only legal inside parentheses", tok.position
            )
        if tok.kind == "rparen":
            raise UnbalancedParentheses("unmatched ')'", tok.position)
        raise FormulaSyntaxError(f"unexpected {tok.text!r}", tok.position)

    def parse_sum(self) -> Node:
        if self.at("minus"):
            minus = self.advance()
            node: Node = Diff(None, self._parse_operand(minus))
        else:
            node = self.parse_cross()
        while self.at("plus", "minus"):
            op = self.advance()
            rhs = self._parse_operand(op)
            node = Sum(node, rhs) if op.kind == "plus" else Diff(node, rhs)
        return node

    def _parse_operand(self, op: Token) -> Node:
        if self.peek() is None or self.at("plus", "minus", "rparen", "comma"):
            raise DanglingOperator(f"operator {op.text!r} has no operand", op.position)
        return self.parse_cross()

    def parse_cross(self) -> Node:
        node = self.parse_interact()
        while self.at("star"):
            op = self.advance()
            if self.peek() is None:
                raise DanglingOperator("operator '*' has no operand", op.position)
            node = Cross(node, self.parse_interact())
        return node

    def parse_interact(self) -> Node:
        node = self.parse_power()
        while self.at("colon"):
            op = self.advance()
            if self.peek() is None:
                raise DanglingOperator("operator ':' has no operand", op.position)
            node = Interact(node, self.parse_power())
        return node

    def parse_power(self) -> Node:
        node = self.parse_primary()
        while self.at("caret"):
            op = self.advance()
            tok = self.peek()
            if tok is None or tok.kind != "int" or int(tok.text) < 2:
                pos = tok.position if tok else op.position
                raise FormulaSyntaxError(
                    "'^' requires an integer exponent of at least 2", pos
                )
            self.advance()
            node = Power(node, int(tok.text))
        return node

    def parse_primary(self) -> Node:
        tok = self.peek()
        if tok is None:
            raise DanglingOperator("expression ends abruptly", self._end_position())
        if tok.kind == "int":
            self.advance()
            value = int(tok.text)
            if value not in (0, 1):
                raise FormulaSyntaxError(
                    f"numeric literal {value} is only legal as a call argument "
                    "or '^' exponent",
                    tok.position,
                )
            return IntLiteral(value)
        if tok.kind == "ident":
            self.advance()
            if self.at("lparen"):
                return self._parse_call(tok)
            return Variable(tok.text)
        if tok.kind == "lparen":
            self.advance()
            inner = self.parse_sum()
            if self.at("bar", "dbar"):
                bar = self.advance()
                grouping = self.parse_sum()
                self.expect("rparen", "unclosed '(' in group term")
                return Group(inner, grouping, correlated=bar.kind == "bar")
            self.expect("rparen", "unclosed '('")
            return inner
        if tok.kind in ("bar", "dbar"):
            raise BarOutsideParentheses(
                f"{tok.text!r} is only legal inside parentheses", tok.position
            )
        if tok.kind == "string":
            raise FormulaSyntaxError(
                "string literals are only legal as call arguments", tok.position
            )
        raise DanglingOperator(f"unexpected {tok.text!r}", tok.position)

    def _parse_call(self, name: Token) -> Call:
        if name.text not in STRUCTURAL_FUNCTIONS | TRANSFORM_FUNCTIONS:
            raise UnknownFunction(f"unknown function {name.text!r}", name.position)
        self.advance()  # lparen
        args: list = []
        if not self.at("rparen"):
            args.append(self._parse_call_arg())
            while self.at("comma"):
                self.advance()
                args.append(self._parse_call_arg())
        self.expect("rparen", f"unclosed argument list of {name.text!r}")
        return Call(name.text, tuple(args))

    def _parse_call_arg(self):
        tok = self.peek()
        if tok is None:
            raise DanglingOperator("argument list ends abruptly", self._end_position())
        if tok.kind == "tilde":
            self.advance()
            return Formula(None, self.parse_sum())
        if tok.kind == "string":
            self.advance()
            return StringLiteral(tok.text[1:-1])
        if tok.kind == "int":
            self.advance()
            return IntLiteral(int(tok.text))
        return self.parse_sum()


def parse(tokens: list[Token]) -> Formula:
    """Parse a token stream into a formula AST."""
    return _Parser(tokens).parse_formula()


def parse_formula(text: str) -> Formula:
    """Tokenize and parse formula source text."""
    return parse(tokenize(text))


# --- pretty printing ----------------------------------------------------------

_PREC_SUM = 1
_PREC_CROSS = 2
_PREC_INTERACT = 3
_PREC_POWER = 4
_PREC_ATOM = 5


def _precedence(node: Node) -> int:
    if isinstance(node, (Sum, Diff)):
        return _PREC_SUM
    if isinstance(node, Cross):
        return _PREC_CROSS
    if isinstance(node, Interact):
        return _PREC_INTERACT
    if isinstance(node, Power):
        return _PREC_POWER
    return _PREC_ATOM


def _wrap(node: Node, minimum: int) -> str:
    text = unparse(node)
    if _precedence(node) < minimum:
        return f"({text})"
    return text


def unparse(node) -> str:
    """Render a node (or Formula) back to source text.

    Parenthesization follows operator precedence, so ``parse(unparse(ast))``
    reproduces ``ast`` for any AST the grammar can produce.
    """
    if isinstance(node, Formula):
        if node.lhs is None:
            return f"~{unparse(node.rhs)}"
        return f"{unparse(node.lhs)} ~ {unparse(node.rhs)}"
    if isinstance(node, Variable):
        return node.name
    if isinstance(node, IntLiteral):
        return str(node.value)
    if isinstance(node, StringLiteral):
        return f'"{node.value}"'
    if isinstance(node, Sum):
        return f"{_wrap(node.left, _PREC_SUM)} + {_wrap(node.right, _PREC_SUM + 1)}"
    if isinstance(node, Diff):
        if node.left is None:
            return f"-{_wrap(node.right, _PREC_CROSS)}"
        return f"{_wrap(node.left, _PREC_SUM)} - {_wrap(node.right, _PREC_SUM + 1)}"
    if isinstance(node, Cross):
        return f"{_wrap(node.left, _PREC_CROSS)}*{_wrap(node.right, _PREC_CROSS + 1)}"
    if isinstance(node, Interact):
        return (
            f"{_wrap(node.left, _PREC_INTERACT)}:{_wrap(node.right, _PREC_INTERACT + 1)}"
        )
    if isinstance(node, Power):
        return f"{_wrap(node.base, _PREC_POWER)}^{node.exponent}"
    if isinstance(node, Group):
        bar = "|" if node.correlated else "||"
        return f"({unparse(node.inner)} {bar} {unparse(node.grouping)})"
    if isinstance(node, Call):
        args = ", ".join(unparse(a) for a in node.args)
        return f"{node.func}({args})"
    raise TypeError(f"cannot unparse {node!r}")
