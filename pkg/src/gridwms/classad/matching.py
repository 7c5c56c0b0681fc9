"""Bilateral matchmaking and rank evaluation over classads."""

from __future__ import annotations

import logging

from .ads import ClassAd, MatchContext
from .evaluator import evaluate
from .values import Boolean, Integer, Real, Value

log = logging.getLogger("gridwms.classad")

REQUIREMENTS_ATTR = "requirements"
RANK_ATTR = "rank"


def requirements_satisfied(ad: ClassAd, ctx: MatchContext) -> bool:
    """True iff the ad's Requirements evaluate to boolean true.

    A missing Requirements attribute counts as satisfied: resource ads in
    practice often carry none.
    """
    req = ad.get(REQUIREMENTS_ATTR)
    if req is None:
        return True
    result = evaluate(req, ctx)
    return isinstance(result, Boolean) and result.value


def match_two(a: ClassAd, b: ClassAd) -> bool:
    """Symmetric match: each side's Requirements against the other ad."""
    return requirements_satisfied(a, MatchContext.bilateral(a, b)) and requirements_satisfied(
        b, MatchContext.bilateral(b, a)
    )


def rank_value(value: Value, what: str = "rank") -> float:
    if isinstance(value, Real):
        return value.value
    if isinstance(value, Integer):
        return float(value.value)
    log.warning("non-numeric %s expression evaluated to %r; using 0.0", what, value)
    return 0.0


def rank_of(a: ClassAd, b: ClassAd) -> float:
    """Evaluate a's Rank against b.  Non-numeric results map to 0.0 with a
    logged diagnostic rather than disqualifying the candidate."""
    rank = a.get(RANK_ATTR)
    if rank is None:
        return 0.0
    return rank_value(evaluate(rank, MatchContext.bilateral(a, b)))
