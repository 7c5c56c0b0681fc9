"""Typed values produced by classad expression evaluation.

Evaluation is total: failures are in-band ErrorValue results, never
exceptions.  Integer arithmetic is 64-bit signed and overflow produces an
ErrorValue instead of wrapping; likewise float results that leave the
finite range.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover
    from .ads import ClassAd

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class Value:
    """Base class for evaluation results."""

    __slots__ = ()


@dataclass(frozen=True)
class Undefined(Value):
    def __repr__(self) -> str:
        return "Undefined"


@dataclass(frozen=True)
class ErrorValue(Value):
    message: str

    def __post_init__(self):
        if not self.message:
            raise ValueError("ErrorValue requires a non-empty message")


@dataclass(frozen=True)
class Boolean(Value):
    value: bool


@dataclass(frozen=True)
class Integer(Value):
    value: int


@dataclass(frozen=True)
class Real(Value):
    value: float


@dataclass(frozen=True)
class Text(Value):
    value: str


@dataclass(frozen=True)
class ListValue(Value):
    items: tuple[Value, ...]


@dataclass(frozen=True)
class AdValue(Value):
    """A nested ad used structurally (DAG nodes, account records).

    Operators other than equality-with-error treat it as a type error.
    """

    ad: "ClassAd"


UNDEFINED = Undefined()
TRUE = Boolean(True)
FALSE = Boolean(False)


def is_numeric(v: Value) -> bool:
    return isinstance(v, (Integer, Real))


def as_float(v: Value) -> float:
    if isinstance(v, Integer):
        return float(v.value)
    if isinstance(v, Real):
        return v.value
    raise TypeError(f"not numeric: {v!r}")


def truth(v: Value) -> bool | None:
    """Three-valued truth: True, False, or None for undefined/non-boolean."""
    if isinstance(v, Boolean):
        return v.value
    return None
