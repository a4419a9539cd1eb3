from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnconcolic.symexpr import (
    AssociationScopeError,
    Comparison,
    ConcolicArithmeticError,
    DeclarationError,
    ExecutionContext,
    NeuronId,
    Rel,
    arith,
    as_scalar,
    compare,
    concretize,
    const,
    count_unique_nodes,
    evaluate,
    mul,
    add,
    sub,
    div,
    neg,
    to_infix,
    var,
)

SCOPE = [NeuronId(1, (0, 0))]


def scoped_ctx() -> ExecutionContext:
    ctx = ExecutionContext()
    ctx.__scope_cm = ctx.association(SCOPE, 0)
    ctx.__scope_cm.__enter__()
    return ctx


# ---------------------------------------------------------------------------
# symvar
# ---------------------------------------------------------------------------


def test_symvar_returns_seeded_variable():
    ctx = ExecutionContext()
    s = ctx.symvar("v", 2)
    assert s.concrete == 2.0
    assert s.sym is var("v")
    assert ctx.variables == {"v": 2.0}


def test_symvar_zero_seed():
    ctx = ExecutionContext()
    s = ctx.symvar("p0", 0)
    assert s.concrete == 0.0 and s.sym is var("p0")


def test_variable_leaf_evaluation():
    assert evaluate(var("v"), {"v": 2}) == 2


def test_symvar_duplicate_name_rejected():
    ctx = ExecutionContext()
    ctx.symvar("v", 1)
    with pytest.raises(DeclarationError):
        ctx.symvar("v", 2)


# ---------------------------------------------------------------------------
# arith
# ---------------------------------------------------------------------------


def test_linear_propagation_matches_worked_example():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 2)
    out = arith("add", arith("mul", v, as_scalar(1)), as_scalar(1))
    assert out.concrete == 3.0
    assert to_infix(out.sym) == "(v + 1.0)"


def test_multiplication_by_zero_folds_to_constant():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 2)
    out = arith("mul", v, as_scalar(0))
    assert out.concrete == 0.0
    assert out.sym is const(0.0)


def test_product_matches_real_arithmetic_oracle():
    # (v+1)*(2v+2) at v=2 -> 18, via both the concrete part and symbolic eval
    ctx = ExecutionContext()
    v = ctx.symvar("v", 2)
    product = (v + 1) * (v * 2 + 2)
    assert product.concrete == (2 + 1) * (2 * 2 + 2) == 18
    assert evaluate(product.sym, {"v": 2.0}) == 18.0


def test_plain_scalars_stay_plain():
    out = as_scalar(5) * as_scalar(3) + as_scalar(1)
    assert out.concrete == 16.0 and out.sym is None


def test_division_by_concrete_zero_raises_with_expression():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 1)
    with pytest.raises(ConcolicArithmeticError) as err:
        arith("div", v, as_scalar(0.0))
    assert err.value.expression is not None


def test_negation_operator():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 3)
    out = -(v + 1)
    assert out.concrete == -4.0
    assert evaluate(out.sym, {"v": 3.0}) == -4.0
    assert neg(neg(var("v"))) is var("v")


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def test_compare_emits_event_with_bypassed_guard():
    # scaled attention scores of the worked example, row 0: 18/sqrt(2) vs 27/sqrt(2)
    ctx = scoped_ctx()
    v = ctx.symvar("v", 2)
    r = 1 / math.sqrt(2)
    s01 = (v * 6 + 6) * r
    s00 = (v * v * 3 + v * 6 + 3) * r
    assert compare(Rel.GT, s01, s00, ctx) is False
    assert len(ctx.events) == 1
    event = ctx.events[0]
    assert event.taken is False
    # branch not entered is the guard itself: s01 > s00
    assert event.bypassed_predicate == event.guard
    assert event.guard.rel is Rel.GT
    assert event.assoc_neurons == tuple(SCOPE)


def test_compare_concrete_operands_emit_nothing():
    ctx = ExecutionContext()
    assert compare(Rel.GT, as_scalar(5), as_scalar(3), ctx) is True
    assert ctx.events == []


def test_max_scan_on_half_symbolic_row_emits_one_event():
    ctx = scoped_ctx()
    row = [ctx.symvar("v", 1), as_scalar(1)]
    best = row[0]
    for entry in row[1:]:
        if ctx.compare(Rel.GT, entry, best):
            best = entry
    assert len(ctx.events) == 1


def test_symbolic_compare_requires_scope():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 1)
    with pytest.raises(AssociationScopeError):
        ctx.compare(Rel.GT, v, as_scalar(0))


def test_event_negation_holds_exactly_one_side():
    ctx = scoped_ctx()
    v = ctx.symvar("v", 0.7)
    ctx.compare(Rel.GT, v * v, as_scalar(0.3))
    ctx.compare(Rel.LE, v + 1, v * 2)
    assignment = dict(ctx.variables)
    for event in ctx.events:
        assert event.guard.holds_at(assignment) is event.taken
        # the path satisfies the taken literal and falsifies the bypassed one
        taken_lit = event.taken_literal().holds_at(assignment)
        bypassed = event.bypassed_predicate.holds_at(assignment)
        assert taken_lit and not bypassed


# ---------------------------------------------------------------------------
# concretize
# ---------------------------------------------------------------------------


def test_concretize_drops_symbolic_part():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 2)
    out = concretize(v)
    assert out.concrete == 2.0 and out.sym is None


def test_concretize_idempotent_on_plain_scalar():
    out = concretize(as_scalar(7))
    assert out.concrete == 7.0 and out.sym is None


def test_exp_pipeline_matches_real_exp_oracle():
    ctx = scoped_ctx()
    v = ctx.symvar("v", -9 / math.sqrt(2))
    got = math.exp(concretize(v).concrete)
    assert got == pytest.approx(math.exp(-9 / math.sqrt(2)), rel=1e-12)
    assert got == pytest.approx(0.00172253, rel=1e-5)


# ---------------------------------------------------------------------------
# comparison algebra
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("rel,negated", [
    (Rel.LT, Rel.GE), (Rel.LE, Rel.GT), (Rel.GT, Rel.LE),
    (Rel.GE, Rel.LT), (Rel.EQ, Rel.NE), (Rel.NE, Rel.EQ),
])
def test_negation_is_an_involution(rel, negated):
    cmp = Comparison(rel, var("x"), const(1.0))
    assert cmp.negate().rel is negated
    assert cmp.negate().negate() == cmp


# ---------------------------------------------------------------------------
# hash consing and structure
# ---------------------------------------------------------------------------


def test_identical_subexpressions_are_shared():
    x = var("x")
    a = add(mul(x, x), const(1.0))
    b = add(mul(x, x), const(1.0))
    assert a is b


def test_node_count_counts_unique_nodes():
    x = var("x")
    square = mul(x, x)
    expr = add(square, square)  # shares the square node
    assert expr.node_count() == 3  # x, x*x, +
    assert count_unique_nodes([expr, square]) == 3


def test_normalization_invariants():
    x = var("x")
    assert add(const(2.0), const(3.0)) is const(5.0)
    assert sub(x, const(0.0)) is x
    assert add(const(0.0), x) is x
    assert mul(x, const(1.0)) is x
    assert div(x, const(1.0)) is x
    with pytest.raises(ConcolicArithmeticError):
        div(x, const(0.0))


def test_infix_serialization():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 2)
    expr = ((v + 1) * (v * 2 + 2)).sym
    assert to_infix(expr) == "((v + 1.0) * ((v * 2.0) + 2.0))"
    assert to_infix(const(0.5)) == "0.5"


# ---------------------------------------------------------------------------
# property tests
# ---------------------------------------------------------------------------


_LEAF_CONST = st.floats(min_value=-3.0, max_value=3.0,
                        allow_nan=False, allow_infinity=False)


@st.composite
def expr_with_reference(draw, depth=3):
    """A random concolic build plus an unfolded reference evaluator."""
    if depth == 0 or draw(st.booleans()):
        if draw(st.booleans()):
            c = draw(_LEAF_CONST)
            return const(c), (lambda env, c=c: c)
        name = draw(st.sampled_from(["a", "b"]))
        return var(name), (lambda env, n=name: env[n])
    op = draw(st.sampled_from(["+", "-", "*", "neg", "divc"]))
    left, left_ref = draw(expr_with_reference(depth=depth - 1))
    if op == "neg":
        return neg(left), (lambda env, f=left_ref: -f(env))
    if op == "divc":
        denom = draw(st.sampled_from([0.5, -1.25, 2.0, 3.0]))
        return div(left, const(denom)), (lambda env, f=left_ref, d=denom: f(env) / d)
    right, right_ref = draw(expr_with_reference(depth=depth - 1))
    builder = {"+": add, "-": sub, "*": mul}[op]
    pyop = {"+": lambda a, b: a + b, "-": lambda a, b: a - b,
            "*": lambda a, b: a * b}[op]
    return builder(left, right), (lambda env, f=left_ref, g=right_ref, o=pyop:
                                  o(f(env), g(env)))


@settings(max_examples=200, deadline=None)
@given(expr_with_reference(), _LEAF_CONST, _LEAF_CONST)
def test_fold_soundness(expr_ref, a, b):
    expr, ref = expr_ref
    env = {"a": a, "b": b}
    assert evaluate(expr, env) == pytest.approx(ref(env), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["add", "sub", "mul"]), min_size=1, max_size=8),
       st.floats(min_value=-2.0, max_value=2.0, allow_nan=False),
       st.floats(min_value=-2.0, max_value=2.0, allow_nan=False))
def test_concrete_symbolic_coherence(ops, seed, operand):
    ctx = ExecutionContext()
    acc = ctx.symvar("v", seed)
    other = as_scalar(operand)
    for op in ops:
        acc = arith(op, acc, other)
        ctx.audit_scalar(acc)  # raises on incoherence
    assert evaluate(acc.sym, ctx.variables) == pytest.approx(
        acc.concrete, rel=1e-9, abs=1e-12)
