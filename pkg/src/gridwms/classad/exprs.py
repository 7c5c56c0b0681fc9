"""Expression AST for the classad language, plus the unparser.

The operator set is deliberately small:

    unary:   !  -
    binary:  *  /  %  +  -  <  <=  >  >=  ==  !=  &&  ||
    builtin functions: member, length, tolower
    conditional: cond ? then : else

Unparsed text re-parses to a structurally equal tree; the unparser wraps
compound subexpressions in parentheses rather than reasoning about
precedence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator

from .values import Boolean, ErrorValue, Integer, ListValue, Real, Text, Undefined, Value

if TYPE_CHECKING:  # pragma: no cover
    from .ads import ClassAd

UNARY_OPS = ("!", "-")
BINARY_OPS = ("*", "/", "%", "+", "-", "<", "<=", ">", ">=", "==", "!=", "&&", "||")
BUILTIN_FUNCTIONS = ("member", "length", "tolower")


class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Literal(Expr):
    value: Value


@dataclass(frozen=True)
class AttrRef(Expr):
    scope: str | None
    name: str


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    operand: Expr

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op!r}")


@dataclass(frozen=True)
class ListExpr(Expr):
    items: tuple[Expr, ...]


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    args: tuple[Expr, ...]

    def __post_init__(self):
        if self.fn not in BUILTIN_FUNCTIONS:
            raise ValueError(f"unknown function {self.fn!r}")


@dataclass(frozen=True)
class Conditional(Expr):
    cond: Expr
    then: Expr
    otherwise: Expr


@dataclass(frozen=True)
class SubAd(Expr):
    """A nested ad literal, e.g. the per-node job ads inside a DAG ad."""

    ad: "ClassAd"


def escape_text(s: str) -> str:
    out = []
    for ch in s:
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"':
            out.append('\\"')
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\r":
            out.append("\\r")
        else:
            out.append(ch)
    return "".join(out)


def unparse_value(v: Value) -> str:
    if isinstance(v, Undefined):
        return "undefined"
    if isinstance(v, ErrorValue):
        return "error"
    if isinstance(v, Boolean):
        return "true" if v.value else "false"
    if isinstance(v, Integer):
        return str(v.value)
    if isinstance(v, Real):
        return repr(v.value)
    if isinstance(v, Text):
        return f'"{escape_text(v.value)}"'
    if isinstance(v, ListValue):
        return "{" + ", ".join(unparse_value(x) for x in v.items) + "}"
    raise TypeError(f"cannot unparse value {v!r}")


def unparse(e: Expr) -> str:
    if isinstance(e, Literal):
        return unparse_value(e.value)
    if isinstance(e, AttrRef):
        return f"{e.scope}.{e.name}" if e.scope else e.name
    if isinstance(e, Unary):
        inner = unparse(e.operand)
        if not isinstance(e.operand, (Literal, AttrRef)):
            inner = f"({inner})"
        return f"{e.op}{inner}"
    if isinstance(e, Binary):
        return f"({unparse(e.left)} {e.op} {unparse(e.right)})"
    if isinstance(e, ListExpr):
        return "{" + ", ".join(unparse(x) for x in e.items) + "}"
    if isinstance(e, Call):
        return f"{e.fn}(" + ", ".join(unparse(a) for a in e.args) + ")"
    if isinstance(e, Conditional):
        return f"({unparse(e.cond)} ? {unparse(e.then)} : {unparse(e.otherwise)})"
    if isinstance(e, SubAd):
        return e.ad.unparse()
    raise TypeError(f"cannot unparse expression {e!r}")


def iter_attr_refs(e: Expr) -> Iterator[AttrRef]:
    """Yield every attribute reference in the tree (nested ads excluded)."""
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, AttrRef):
            yield node
        elif isinstance(node, Unary):
            stack.append(node.operand)
        elif isinstance(node, Binary):
            stack.append(node.left)
            stack.append(node.right)
        elif isinstance(node, ListExpr):
            stack.extend(node.items)
        elif isinstance(node, Call):
            stack.extend(node.args)
        elif isinstance(node, Conditional):
            stack.extend((node.cond, node.then, node.otherwise))


def references_scope(e: Expr, scope: str) -> bool:
    scope = scope.lower()
    return any(r.scope == scope for r in iter_attr_refs(e))
