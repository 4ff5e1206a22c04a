import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import T0, meta, nan_equal, stream
from oracles import eval_tree
from minetrace.derived import (
    BinOp,
    ChannelRef,
    DerivedSpec,
    MetaRef,
    Neg,
    Number,
    evaluate,
    parse_expression,
    references,
    unparse,
)
from minetrace.errors import ExpressionSyntaxError, UnknownChannel, UnknownConstant

FORCE = "pressure_bar * 1e5 * meta.piston_area_m2"


def force_spec(area=0.05):
    return DerivedSpec(meta("force_n", 0, 1e9, kind="derived"), FORCE, {"piston_area_m2": area})


def test_force_expression_structure():
    tree = parse_expression(FORCE)
    assert tree == BinOp("*", BinOp("*", ChannelRef("pressure_bar"), Number(1e5)), MetaRef("piston_area_m2"))
    assert references(tree) == ({"pressure_bar"}, {"piston_area_m2"})


def test_precedence_and_unary_minus():
    assert parse_expression("a + b * c") == BinOp("+", ChannelRef("a"), BinOp("*", ChannelRef("b"), ChannelRef("c")))
    assert parse_expression("a - b - c") == BinOp("-", BinOp("-", ChannelRef("a"), ChannelRef("b")), ChannelRef("c"))
    assert parse_expression("-(a+b)/c") == BinOp("/", Neg(BinOp("+", ChannelRef("a"), ChannelRef("b"))), ChannelRef("c"))


@pytest.mark.parametrize("text, offset", [
    ("a + * b", 4),
    ("(a + b", 6),
    ("a b", 2),
    ("", 0),
    ("a $ b", 2),
    ("meta.", 4),
])
def test_syntax_error_offsets(text, offset):
    with pytest.raises(ExpressionSyntaxError) as info:
        parse_expression(text)
    assert info.value.offset == offset


def test_force_is_exactly_one_meganewton():
    s = stream({"pressure_bar": np.full(3600, 200.0)})
    out = evaluate(force_spec(), s)
    assert out.meta.channel_id == "force_n" and out.t0 == T0
    assert np.all(out.values == 1.0e6)
    assert 200.0 * 1e5 * 0.05 == 1.0e6


def test_zero_pressure_gives_zero_force():
    out = evaluate(force_spec(), stream({"pressure_bar": np.zeros(100)}))
    assert np.all(out.values == 0.0)


def test_one_missing_input_one_missing_output():
    p = np.full(100, 200.0)
    p[37] = np.nan
    out = evaluate(force_spec(), stream({"pressure_bar": p}))
    assert np.flatnonzero(np.isnan(out.values)).tolist() == [37]


def test_division_by_zero_is_missing_not_error():
    s = stream({"a": [1.0, 2.0, 0.0], "b": [2.0, 0.0, 0.0]})
    spec = DerivedSpec(meta("q", kind="derived"), "a / b")
    assert nan_equal(evaluate(spec, s).values, [0.5, np.nan, np.nan])


def test_overflow_is_missing():
    s = stream({"a": [1e200, 1.0]})
    spec = DerivedSpec(meta("q", kind="derived"), "1 / (a * a)")
    assert nan_equal(evaluate(spec, s).values, [np.nan, 1.0])


def test_unknown_channel_and_constant():
    s = stream({"a": [1.0]})
    with pytest.raises(UnknownChannel):
        evaluate(DerivedSpec(meta("q", kind="derived"), "a + zz"), s)
    with pytest.raises(UnknownConstant):
        evaluate(DerivedSpec(meta("q", kind="derived"), "a * meta.k"), s)


def test_output_must_be_derived_kind():
    with pytest.raises(ValueError):
        DerivedSpec(meta("q", kind="sensor"), "a")


def test_constant_only_expression_broadcasts():
    out = evaluate(DerivedSpec(meta("q", kind="derived"), "2 * meta.k", {"k": 3.0}), stream({"a": np.ones(5)}))
    assert out.values.tolist() == [6.0] * 5


# -------------------------------------------------------------- random trees

CHANNELS = ("a", "b", "c")


def random_tree(rng, depth=0):
    r = rng.random()
    if depth >= 4 or r < 0.3:
        pick = rng.integers(0, 3)
        if pick == 0:
            return Number(float(rng.choice([0.0, 0.5, 1.0, 2.0, 3.25, 1e3])))
        if pick == 1:
            return ChannelRef(str(rng.choice(CHANNELS)))
        return MetaRef("k")
    if r < 0.4:
        return Neg(random_tree(rng, depth + 1))
    return BinOp(str(rng.choice(list("+-*/"))), random_tree(rng, depth + 1), random_tree(rng, depth + 1))


def test_hundred_random_trees_against_tree_walk():
    rng = np.random.default_rng(100)
    n = 200
    cols = {c: rng.choice([0.0, 1.0, -2.0, 1e300, np.nan, 0.3], size=n) for c in CHANNELS}
    cols["a"] = np.where(rng.random(n) < 0.5, rng.normal(size=n), cols["a"])
    s = stream(cols)
    consts = {"k": 1.5}
    for _ in range(100):
        tree = random_tree(rng)
        text = unparse(tree)
        assert parse_expression(text) == tree
        got = evaluate(DerivedSpec(meta("q", kind="derived"), text, consts), s).values
        for i in range(n):
            env = {c: (None if np.isnan(cols[c][i]) else float(cols[c][i])) for c in CHANNELS}
            want = eval_tree(tree, env, consts)
            assert (np.isnan(got[i]) and want is None) or got[i] == want, (text, i)


@given(st.lists(st.booleans(), min_size=1, max_size=300), st.lists(st.booleans(), min_size=1, max_size=300))
def test_missing_propagation_count_law(ma, mb):
    n = min(len(ma), len(mb))
    a = np.where(np.array(ma[:n]), np.nan, 2.0)
    b = np.where(np.array(mb[:n]), np.nan, 3.0)
    out = evaluate(DerivedSpec(meta("q", kind="derived"), "a * b + a"), stream({"a": a, "b": b})).values
    expect = np.isnan(a) | np.isnan(b)
    assert np.array_equal(np.isnan(out), expect)
    assert int(np.isnan(out).sum()) == n - int((~expect).sum())


@given(st.permutations(list(range(20))))
def test_evaluation_is_pointwise(perm):
    rng = np.random.default_rng(3)
    a = rng.normal(size=20)
    b = rng.normal(size=20)
    a[4] = np.nan
    spec = DerivedSpec(meta("q", kind="derived"), "(a + b) / (b - 0.1)")
    base = evaluate(spec, stream({"a": a, "b": b})).values
    perm = np.array(perm)
    shuffled = evaluate(spec, stream({"a": a[perm], "b": b[perm]})).values
    assert nan_equal(shuffled, base[perm])
