"""Expression language: parsing, three-valued evaluation, matching."""

from __future__ import annotations

import logging

import pytest
from hypothesis import given, settings, strategies as st

from gridwms.classad import (
    FALSE,
    TRUE,
    UNDEFINED,
    AdSyntaxError,
    AttrRef,
    Binary,
    Boolean,
    ClassAd,
    DuplicateAttributeError,
    ErrorValue,
    Integer,
    ListExpr,
    ListValue,
    Literal,
    MatchContext,
    Real,
    Text,
    Undefined,
    evaluate,
    match_two,
    parse_ad,
    parse_expr,
    rank_of,
    references_scope,
    unparse,
)

EMPTY = MatchContext.solo(ClassAd())


def ev(text: str, ctx=EMPTY):
    return evaluate(parse_expr(text), ctx)


# -- parsing ---------------------------------------------------------------


def test_parse_binary_tree():
    ad = parse_ad("[ x = 1+2; ]")
    assert ad.get("x") == Binary("+", Literal(Integer(1)), Literal(Integer(2)))


def test_parse_duplicate_attribute_case_folded():
    with pytest.raises(DuplicateAttributeError):
        parse_ad("[ x = 1; X = 2; ]")


def test_parse_error_carries_position():
    with pytest.raises(AdSyntaxError) as err:
        parse_ad("[ x = ; ]")
    assert err.value.line == 1
    assert err.value.column > 0


def test_parse_unparse_fixed_point_example():
    text = "[ Requirements = other.FreeCPUs > 0; Rank = other.FreeCPUs; ]"
    ad = parse_ad(text)
    assert len(ad) == 2
    again = parse_ad(ad.unparse())
    assert again == ad
    assert parse_ad(again.unparse()) == again


def test_parse_rejects_trailing_garbage_and_unknown_functions():
    with pytest.raises(AdSyntaxError):
        parse_ad("[ x = 1; ] extra")
    with pytest.raises(AdSyntaxError):
        parse_expr("frobnicate(1)")


def test_string_escapes_round_trip():
    ad = parse_ad(r'[ s = "a\"b\\c\nd\te"; ]')
    assert ad.get("s") == Literal(Text('a"b\\c\nd\te'))
    assert parse_ad(ad.unparse()) == ad


def test_nested_ads_and_lists_parse():
    ad = parse_ad('[ Nodes = [ A = [ x = 1; ]; ]; Deps = { {"A","B"}, {"B","C"} }; ]')
    assert parse_ad(ad.unparse()) == ad


# -- literals and arithmetic ----------------------------------------------------


def test_integer_addition():
    assert ev("1 + 2") == Integer(3)


def test_mixed_arithmetic_promotes_to_real():
    assert ev("1 + 2.5") == Real(3.5)
    assert ev("7 / 2") == Integer(3)
    assert ev("-7 / 2") == Integer(-3)
    assert ev("7.0 / 2") == Real(3.5)
    assert ev("7 % 3") == Integer(1)
    assert ev("-7 % 3") == Integer(-1)


def test_division_and_modulus_by_zero_are_errors():
    assert isinstance(ev("1 / 0"), ErrorValue)
    assert isinstance(ev("1 % 0"), ErrorValue)
    assert isinstance(ev("1.0 / 0.0"), ErrorValue)


def test_integer_overflow_is_error_not_wrap():
    assert isinstance(ev("9223372036854775807 + 1"), ErrorValue)
    assert isinstance(ev("-9223372036854775807 - 2"), ErrorValue)
    assert ev("9223372036854775807 + 0") == Integer(2**63 - 1)


def test_real_overflow_is_error():
    assert isinstance(ev("1e308 * 10.0"), ErrorValue)


# -- three-valued logic -----------------------------------------------------------

TRITS = {"true": True, "false": False, "undefinedAttr": None}


@pytest.mark.parametrize("left", list(TRITS))
@pytest.mark.parametrize("right", list(TRITS))
def test_lenient_and_table(left, right):
    a, b = TRITS[left], TRITS[right]
    expected = False if (a is False or b is False) else (None if None in (a, b) else True)
    got = ev(f"{left} && {right}")
    assert got == (UNDEFINED if expected is None else Boolean(expected))


@pytest.mark.parametrize("left", list(TRITS))
@pytest.mark.parametrize("right", list(TRITS))
def test_lenient_or_table(left, right):
    a, b = TRITS[left], TRITS[right]
    expected = True if (a is True or b is True) else (None if None in (a, b) else False)
    got = ev(f"{left} || {right}")
    assert got == (UNDEFINED if expected is None else Boolean(expected))


def test_undefined_and_false_is_false():
    assert ev("undefinedAttr && false") == FALSE


def test_error_absorbs_even_through_logic():
    assert isinstance(ev("error && false"), ErrorValue)
    assert isinstance(ev("(1/0 == 1) || true"), ErrorValue)


def test_equality_with_undefined_is_undefined():
    assert ev("undefinedAttr == 1") == UNDEFINED
    assert ev("undefinedAttr != 1") == UNDEFINED


def test_conditional_semantics():
    assert ev('1 < 2 ? "a" : "b"') == Text("a")
    assert ev('1 > 2 ? "a" : "b"') == Text("b")
    assert ev('undefinedAttr ? "a" : "b"') == UNDEFINED


# -- builtins -------------------------------------------------------------------


def test_member_matches_exhaustive_scan():
    ctx = MatchContext.solo(parse_ad('[ CloseSEs = {"SE1", "SE2"}; ]'))
    listing = evaluate(parse_expr("self.CloseSEs"), ctx)
    # oracle: exhaustive scan of the evaluated list
    for needle, expected in (("SE1", True), ("SE2", True), ("SE9", False)):
        oracle = any(item == Text(needle) for item in listing.items)
        assert oracle is expected
        assert evaluate(parse_expr(f'member("{needle}", self.CloseSEs)'), ctx) == Boolean(expected)


def test_member_on_non_list_is_error_on_undefined_is_undefined():
    assert isinstance(ev('member("a", 3)'), ErrorValue)
    assert ev('member("a", self.Nope)') == UNDEFINED


def test_length_and_tolower():
    assert ev("length({1,2,3})") == Integer(3)
    assert ev('length("abcd")') == Integer(4)
    assert ev('tolower("MiXeD")') == Text("mixed")
    assert isinstance(ev("tolower(3)"), ErrorValue)


# -- attribute resolution ------------------------------------------------------------


def test_unqualified_ref_resolves_in_self_then_undefined():
    ctx = MatchContext.solo(parse_ad("[ a = 5; ]"))
    assert evaluate(parse_expr("a"), ctx) == Integer(5)
    assert evaluate(parse_expr("missing"), ctx) == UNDEFINED


def test_scope_shift_lets_resource_expressions_use_their_own_attrs():
    job = parse_ad("[ Requirements = other.FreeCPUs > 0; ]")
    ce = parse_ad("[ TotalCPUs = 8; Used = 3; FreeCPUs = TotalCPUs - Used; ]")
    assert evaluate(parse_expr("other.FreeCPUs"), MatchContext.bilateral(job, ce)) == Integer(5)


def test_unknown_scope_is_undefined():
    ctx = MatchContext.solo(parse_ad("[ x = 1; ]"))
    assert evaluate(parse_expr("se.X"), ctx) == UNDEFINED


def test_circular_reference_is_error_not_hang():
    ctx = MatchContext.solo(parse_ad("[ x = y; y = x; ]"))
    assert isinstance(evaluate(parse_expr("x"), ctx), ErrorValue)


def test_multi_scope_evaluation():
    job = parse_ad("[ Requirements = se.AvailableSpace >= 500 && ce.FreeCPUs > 0; ]")
    ce = parse_ad('[ Id = "CE1"; FreeCPUs = 4; ]')
    se = parse_ad('[ Id = "SE1"; AvailableSpace = 1000; ]')
    ctx = MatchContext({"self": job, "other": ce, "ce": ce, "se": se})
    assert evaluate(job.get("requirements"), ctx) == TRUE
    assert evaluate(parse_expr("se.AvailableSpace >= 500"), ctx) == TRUE
    se_small = parse_ad('[ Id = "SE1"; AvailableSpace = 100; ]')
    ctx2 = MatchContext({"self": job, "other": ce, "ce": ce, "se": se_small})
    assert evaluate(job.get("requirements"), ctx2) == FALSE


def test_references_scope_walks_the_tree():
    assert references_scope(parse_expr("se.AvailableSpace >= 500 && other.X > 0"), "se")
    assert not references_scope(parse_expr("other.FreeCPUs > 0"), "se")


# -- matching and ranking ----------------------------------------------------------------


def test_match_two_fixture():
    job = parse_ad("[ Requirements = other.FreeCPUs > 0; ]")
    ce1 = parse_ad('[ FreeCPUs = 4; Status = "Production"; ]')
    ce2 = parse_ad('[ FreeCPUs = 0; Status = "Production"; ]')
    assert match_two(job, ce1) is True
    assert match_two(job, ce2) is False


def test_match_two_vacuous_without_requirements():
    assert match_two(parse_ad("[ x = 1; ]"), parse_ad("[ y = 2; ]")) is True


def test_rank_of_fixture_and_defaults(caplog):
    job = parse_ad("[ Rank = other.FreeCPUs; ]")
    ce = parse_ad("[ FreeCPUs = 4; ]")
    assert rank_of(job, ce) == 4.0
    assert rank_of(parse_ad("[ x = 1; ]"), ce) == 0.0
    with caplog.at_level(logging.WARNING, logger="gridwms.classad"):
        assert rank_of(parse_ad('[ Rank = "abc"; ]'), ce) == 0.0
    assert any("non-numeric" in rec.message for rec in caplog.records)


# -- property tests ------------------------------------------------------------------

_names = st.sampled_from(["alpha", "beta", "gamma", "delta", "epsilon", "zeta"])


def _value_exprs():
    return st.one_of(
        st.integers(min_value=-(2**40), max_value=2**40).map(lambda n: Literal(Integer(n))),
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False).map(lambda x: Literal(Real(x))),
        st.text(alphabet="abcXYZ09 _", max_size=8).map(lambda s: Literal(Text(s))),
        st.sampled_from([Literal(TRUE), Literal(FALSE), Literal(UNDEFINED)]),
        st.tuples(st.sampled_from(["self", "other", None]), _names).map(lambda t: AttrRef(t[0], t[1])),
    )


def _exprs(depth: int = 4):
    return st.recursive(
        _value_exprs(),
        lambda children: st.one_of(
            st.tuples(st.sampled_from(["+", "-", "*", "/", "%", "<", "<=", ">", ">=", "==", "!=", "&&", "||"]),
                      children, children).map(lambda t: Binary(*t)),
            st.lists(children, max_size=3).map(lambda items: ListExpr(tuple(items))),
        ),
        max_leaves=2**depth,
    )


def _ads():
    return st.lists(st.tuples(_names, _exprs(3)), max_size=5).map(
        lambda items: ClassAd({n: e for n, e in items}.items())
    )


@settings(max_examples=150, deadline=None)
@given(_ads())
def test_parse_unparse_fixed_point_property(ad):
    text = ad.unparse()
    assert parse_ad(text) == ad
    assert parse_ad(parse_ad(text).unparse()) == ad


@settings(max_examples=200, deadline=None)
@given(_exprs(6), _ads(), _ads())
def test_evaluation_total_and_deterministic(expr, self_ad, other_ad):
    ctx = MatchContext({"self": self_ad, "other": other_ad})
    first = evaluate(expr, ctx)
    second = evaluate(expr, ctx)
    assert isinstance(first, (Undefined, ErrorValue, Boolean, Integer, Real, Text, ListValue))
    assert first == second
    # unparse of the expression reparses to the same tree
    assert parse_expr(unparse(expr)) == expr


@settings(max_examples=150, deadline=None)
@given(_ads(), _ads())
def test_match_two_symmetric(a, b):
    assert match_two(a, b) == match_two(b, a)
