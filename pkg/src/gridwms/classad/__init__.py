"""Classad attribute-expression language: parsing, evaluation, matching."""

from .ads import ClassAd, DuplicateAttributeError, MatchContext
from .evaluator import evaluate
from .exprs import (
    AttrRef,
    Binary,
    Call,
    Conditional,
    Expr,
    ListExpr,
    Literal,
    SubAd,
    Unary,
    iter_attr_refs,
    references_scope,
    unparse,
)
from .matching import match_two, rank_of, rank_value, requirements_satisfied
from .parser import AdSyntaxError, parse_ad, parse_expr
from .values import (
    FALSE,
    TRUE,
    UNDEFINED,
    AdValue,
    Boolean,
    ErrorValue,
    Integer,
    ListValue,
    Real,
    Text,
    Undefined,
    Value,
)

__all__ = [
    "AdSyntaxError",
    "AdValue",
    "AttrRef",
    "Binary",
    "Boolean",
    "Call",
    "ClassAd",
    "Conditional",
    "DuplicateAttributeError",
    "ErrorValue",
    "Expr",
    "FALSE",
    "Integer",
    "ListExpr",
    "ListValue",
    "Literal",
    "MatchContext",
    "Real",
    "SubAd",
    "TRUE",
    "Text",
    "UNDEFINED",
    "Unary",
    "Undefined",
    "Value",
    "evaluate",
    "iter_attr_refs",
    "match_two",
    "parse_ad",
    "parse_expr",
    "rank_of",
    "rank_value",
    "references_scope",
    "requirements_satisfied",
    "unparse",
]
