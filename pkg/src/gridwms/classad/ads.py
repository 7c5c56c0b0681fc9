"""The ClassAd record type and evaluation contexts."""

from __future__ import annotations

from typing import Iterable, Iterator, Mapping

from ..errors import WmsError
from .exprs import Expr, unparse


class DuplicateAttributeError(WmsError):
    code = "DuplicateAttribute"

    def __init__(self, name: str, line: int | None = None, column: int | None = None):
        self.name = name
        self.line = line
        self.column = column
        where = f" at {line}:{column}" if line is not None else ""
        super().__init__(f"duplicate attribute {name!r} (case-insensitive){where}")


class ClassAd:
    """An ordered attribute -> expression record.

    Attribute names are case-insensitive; the original spelling is kept
    for display and unparsing.  Ads are treated as immutable after
    construction: mutating helpers return new ads.
    """

    __slots__ = ("_attrs",)

    def __init__(self, items: Iterable[tuple[str, Expr]] = ()):
        attrs: dict[str, tuple[str, Expr]] = {}
        for name, expr in items:
            key = name.lower()
            if key in attrs:
                raise DuplicateAttributeError(name)
            attrs[key] = (name, expr)
        self._attrs = attrs

    def get(self, name: str) -> Expr | None:
        entry = self._attrs.get(name.lower())
        return entry[1] if entry else None

    def __contains__(self, name: str) -> bool:
        return name.lower() in self._attrs

    def __len__(self) -> int:
        return len(self._attrs)

    def __iter__(self) -> Iterator[str]:
        for _, (display, _e) in self._attrs.items():
            yield display

    def items(self) -> list[tuple[str, Expr]]:
        return [(display, expr) for display, expr in self._attrs.values()]

    def with_attr(self, name: str, expr: Expr) -> "ClassAd":
        """Return a copy with `name` bound to `expr` (replacing in place,
        or appended when new)."""
        out = ClassAd.__new__(ClassAd)
        attrs = dict(self._attrs)
        key = name.lower()
        if key in attrs:
            attrs[key] = (attrs[key][0], expr)
        else:
            attrs[key] = (name, expr)
        out._attrs = attrs
        return out

    def without_attr(self, name: str) -> "ClassAd":
        out = ClassAd.__new__(ClassAd)
        attrs = dict(self._attrs)
        attrs.pop(name.lower(), None)
        out._attrs = attrs
        return out

    def unparse(self) -> str:
        parts = "".join(f" {display} = {unparse(expr)};" for display, expr in self._attrs.values())
        return f"[{parts} ]"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassAd):
            return NotImplemented
        return self.items() == other.items()

    def __repr__(self) -> str:
        return f"ClassAd({self.unparse()})"


class MatchContext:
    """Named scope bindings for evaluation.

    `self` is always bound.  Bilateral matchmaking binds `other`;
    gangmatching additionally binds `ce` and `se`.
    """

    __slots__ = ("scopes",)

    def __init__(self, scopes: Mapping[str, ClassAd]):
        folded = {name.lower(): ad for name, ad in scopes.items()}
        if "self" not in folded:
            raise ValueError("MatchContext requires a 'self' binding")
        self.scopes = folded

    @classmethod
    def solo(cls, ad: ClassAd) -> "MatchContext":
        return cls({"self": ad})

    @classmethod
    def bilateral(cls, self_ad: ClassAd, other_ad: ClassAd) -> "MatchContext":
        return cls({"self": self_ad, "other": other_ad})

    @property
    def self_ad(self) -> ClassAd:
        return self.scopes["self"]

    def get(self, scope: str) -> ClassAd | None:
        return self.scopes.get(scope.lower())

    def rebound(self, new_self: ClassAd, new_other: ClassAd | None) -> "MatchContext":
        out = MatchContext.__new__(MatchContext)
        scopes = dict(self.scopes)
        scopes["self"] = new_self
        if new_other is not None:
            scopes["other"] = new_other
        out.scopes = scopes
        return out
