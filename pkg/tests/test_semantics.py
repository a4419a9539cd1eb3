from __future__ import annotations

import json
import math

import numpy as np
import pytest

from attnconcolic.semantics import (
    Dense,
    Flatten,
    ModelConfigError,
    ModelSpec,
    MultiHeadAttention,
    Reshape,
    attention_scores,
    concat,
    concrete_forward,
    dense_forward,
    dpa,
    forward,
    rowmax,
    stable_softmax,
    tas,
)
from attnconcolic.symexpr import ExecutionContext, NeuronId, as_scalar

from conftest import golden_mha, linear_coeffs, quad_coeffs, random_toy_model


def golden_input(ctx: ExecutionContext):
    return [[ctx.symvar("v", 2)], [as_scalar(1)]]


def golden_qkv(ctx: ExecutionContext):
    layer = golden_mha()
    x = golden_input(ctx)
    return (tas(x, layer.w_q, layer.b_q),
            tas(x, layer.w_k, layer.b_k),
            tas(x, layer.w_v, layer.b_v))


# ---------------------------------------------------------------------------
# tas
# ---------------------------------------------------------------------------


def test_tas_reproduces_worked_q_matrix():
    ctx = ExecutionContext()
    Q, K, V = golden_qkv(ctx)
    # Q = [[v+1, v+1], [2, 2]]
    for j in range(2):
        assert linear_coeffs(Q[0][0][j]) == (1.0, 1.0)
        assert Q[0][0][j].concrete == 3.0
        assert Q[0][1][j].concrete == 2.0 and Q[0][1][j].sym is None
    # K = [[2v+2, v+1], [4, 2]]
    assert linear_coeffs(K[0][0][0]) == (2.0, 2.0)
    assert linear_coeffs(K[0][0][1]) == (1.0, 1.0)
    assert (K[0][1][0].concrete, K[0][1][1].concrete) == (4.0, 2.0)
    # V = [[v+1, 2v+2], [2, 4]]
    assert linear_coeffs(V[0][0][0]) == (1.0, 1.0)
    assert linear_coeffs(V[0][0][1]) == (2.0, 2.0)
    assert (V[0][1][0].concrete, V[0][1][1].concrete) == (2.0, 4.0)


def test_tas_zero_weights_gives_zero_outputs():
    ctx = ExecutionContext()
    x = golden_input(ctx)
    out = tas(x, [[[0.0, 0.0]]], [[0.0, 0.0]])
    for head in out:
        for row in head:
            for entry in row:
                assert entry.concrete == 0.0


def test_tas_matches_nested_loop_oracle():
    rng = np.random.default_rng(11)
    seq_len, d_model, heads, d_k = 3, 2, 2, 2
    x = rng.uniform(-1, 1, size=(seq_len, d_model))
    w = rng.uniform(-1, 1, size=(d_model, heads, d_k)).tolist()
    b = rng.uniform(-1, 1, size=(heads, d_k)).tolist()
    got = tas([[as_scalar(v) for v in row] for row in x], w, b)
    for i in range(heads):
        for t in range(seq_len):
            for j in range(d_k):
                want = b[i][j]
                for k in range(d_model):
                    want += x[t][k] * w[k][i][j]
                assert got[i][t][j].concrete == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# dpa / scores
# ---------------------------------------------------------------------------


def test_unscaled_scores_match_worked_example_exactly():
    ctx = ExecutionContext()
    Q, K, _ = golden_qkv(ctx)
    S = attention_scores(Q[0], K[0])
    assert quad_coeffs(S[0][0]) == (3.0, 6.0, 3.0)       # 3v^2 + 6v + 3
    assert linear_coeffs(S[0][1]) == (6.0, 6.0)          # 6v + 6
    assert linear_coeffs(S[1][0]) == (6.0, 6.0)
    assert S[1][1].concrete == 12.0 and S[1][1].sym is None
    assert (S[0][0].concrete, S[0][1].concrete) == (27.0, 18.0)


def test_dpa_attention_coefficients_within_tolerance():
    ctx = ExecutionContext()
    Q, K, V = golden_qkv(ctx)
    A = dpa(Q, K, V, ctx, out_width=1, depth=1, layer_index=0)
    expected = [[(0.998, 1.002), (1.996, 2.004)],
                [(0.986, 1.014), (1.972, 2.028)]]
    for t in range(2):
        for j in range(2):
            slope, intercept = linear_coeffs(A[0][t][j])
            want_slope, want_intercept = expected[t][j]
            assert slope == pytest.approx(want_slope, abs=1e-3)
            assert intercept == pytest.approx(want_intercept, abs=1e-3)


def test_dpa_constant_inputs_give_uniform_rows_and_column_means():
    # equal scores per row -> uniform softmax -> output = column means of V
    c = as_scalar(1.0)
    Q = [[[c, c], [c, c]]]
    K = [[[c, c], [c, c]]]
    V = [[[as_scalar(1.0), as_scalar(5.0)], [as_scalar(3.0), as_scalar(7.0)]]]
    A = dpa(Q, K, V)
    for t in range(2):
        assert A[0][t][0].concrete == pytest.approx(2.0, rel=1e-12)
        assert A[0][t][1].concrete == pytest.approx(6.0, rel=1e-12)


# ---------------------------------------------------------------------------
# stable_softmax
# ---------------------------------------------------------------------------


def test_softmax_matches_worked_example():
    ctx = ExecutionContext()
    Q, K, _ = golden_qkv(ctx)
    S = attention_scores(Q[0], K[0])
    r = 1 / math.sqrt(2)
    scaled = [[entry * r for entry in row] for row in S]
    probs = stable_softmax(scaled, ctx, row_assoc=lambda t: [NeuronId(1, (t, 0))])
    want = [[0.998, 0.002], [0.986, 0.014]]
    for t in range(2):
        for u in range(2):
            assert probs[t][u].concrete == pytest.approx(want[t][u], abs=1e-3)
            assert probs[t][u].sym is None  # exp arguments were concretized


def test_softmax_constant_row_is_uniform():
    row = [as_scalar(4.2)] * 3
    out = stable_softmax([row])
    for entry in out[0]:
        assert entry.concrete == pytest.approx(1 / 3, rel=1e-12)


def test_softmax_two_entry_row_matches_scalar_exp_oracle():
    delta = -9 / math.sqrt(2)
    out = stable_softmax([[as_scalar(0.0), as_scalar(delta)]])
    denom = 1 + math.exp(delta)
    assert out[0][0].concrete == pytest.approx(1 / denom, rel=1e-12)
    assert out[0][1].concrete == pytest.approx(math.exp(delta) / denom, rel=1e-12)


def test_softmax_rows_are_stochastic():
    rng = np.random.default_rng(5)
    ctx = ExecutionContext()
    v = ctx.symvar("v", 0.25)
    for width in (2, 3, 5):
        with ctx.association([NeuronId(0, (0,))], 0):
            rows = [[v * float(c) + float(rng.uniform(-4, 4)) for c in
                     rng.uniform(-2, 2, size=width)]]
            out = stable_softmax(rows, ctx, row_assoc=lambda t: [NeuronId(0, (0,))])
        total = sum(e.concrete for e in out[0])
        assert all(e.concrete >= 0.0 for e in out[0])
        assert total == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# rowmax
# ---------------------------------------------------------------------------


def test_rowmax_emits_one_event_per_worked_row():
    ctx = ExecutionContext()
    Q, K, _ = golden_qkv(ctx)
    S = attention_scores(Q[0], K[0])
    r = 1 / math.sqrt(2)
    row0 = [entry * r for entry in S[0]]
    best = rowmax(row0, ctx, assoc=[NeuronId(1, (0, 0))], layer_index=0)
    assert best.concrete == pytest.approx(27 * r, rel=1e-12)
    assert len(ctx.events) == 1
    event = ctx.events[0]
    # bypassed branch: entry1 > entry0 (the guard that did not hold)
    assert event.taken is False
    assert event.bypassed_predicate == event.guard


def test_rowmax_all_concrete_row_emits_nothing():
    ctx = ExecutionContext()
    out = rowmax([as_scalar(1), as_scalar(5), as_scalar(3)], ctx)
    assert out.concrete == 5.0
    assert ctx.events == []


def test_rowmax_five_symbolic_entries_emit_four_events():
    ctx = ExecutionContext()
    entries = [ctx.symvar(f"x{i}", float(i % 3)) for i in range(5)]
    rowmax(entries, ctx, assoc=[NeuronId(0, (0,))], layer_index=0)
    assert len(ctx.events) == 4


# ---------------------------------------------------------------------------
# concat
# ---------------------------------------------------------------------------


def test_concat_matches_worked_example():
    ctx = ExecutionContext()
    Q, K, V = golden_qkv(ctx)
    A = dpa(Q, K, V, ctx, out_width=1, depth=1, layer_index=0)
    Y = concat(A, [[[1], [1]]], [1])
    expected = [(2.994, 4.006), (2.958, 4.042)]
    for t in range(2):
        slope, intercept = linear_coeffs(Y[t][0])
        assert slope == pytest.approx(expected[t][0], abs=1e-3)
        assert intercept == pytest.approx(expected[t][1], abs=1e-3)


def test_concat_zero_weights_leaves_bias():
    A = [[[as_scalar(3.0), as_scalar(4.0)]]]
    Y = concat(A, [[[0.0], [0.0]]], [5.0])
    assert Y[0][0].concrete == 5.0


def test_concat_two_heads_matches_flattened_dense_oracle():
    rng = np.random.default_rng(3)
    heads, seq_len, d_k, d_model = 2, 2, 2, 3
    A = rng.uniform(-1, 1, size=(heads, seq_len, d_k))
    w_o = rng.uniform(-1, 1, size=(heads, d_k, d_model))
    b_o = rng.uniform(-1, 1, size=d_model)
    got = concat([[[as_scalar(v) for v in row] for row in head] for head in A],
                 w_o.tolist(), b_o.tolist())
    # oracle: reshape heads-first to (seq_len, heads*d_k) and matrix-multiply
    flat = A.transpose(1, 0, 2).reshape(seq_len, heads * d_k)
    want = flat @ w_o.reshape(heads * d_k, d_model) + b_o
    for t in range(seq_len):
        for ell in range(d_model):
            assert got[t][ell].concrete == pytest.approx(want[t][ell], rel=1e-9)


# ---------------------------------------------------------------------------
# dense_forward
# ---------------------------------------------------------------------------


def test_dense_relu_negative_branch_forces_zero_and_event():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 2)
    x = [v - 3]  # <-1, v-3>
    out = dense_forward(x, [[1.0]], [0.0], "relu", ctx, depth=1, layer_index=0)
    assert out[0].concrete == 0.0 and out[0].sym is None
    assert len(ctx.events) == 1
    event = ctx.events[0]
    assert event.taken is False
    assert event.bypassed_predicate == event.guard  # v - 3 > 0
    assert event.assoc_neurons == (NeuronId(1, (0,)),)


def test_dense_identity_passthrough():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 0.5)
    out = dense_forward([v, as_scalar(2.0)],
                        [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], "none", ctx)
    assert out[0] == v  # same concrete value and same interned expression
    assert out[1].concrete == 2.0


def test_dense_matches_matvec_oracle():
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, size=4)
    w = rng.uniform(-1, 1, size=(4, 3))
    b = rng.uniform(-1, 1, size=3)
    got = dense_forward([as_scalar(v) for v in x], w.tolist(), b.tolist())
    want = x @ w + b
    for j in range(3):
        assert got[j].concrete == pytest.approx(want[j], rel=1e-9)


def test_dense_relu_tie_takes_zero_branch():
    ctx = ExecutionContext()
    v = ctx.symvar("v", 1.0)
    out = dense_forward([v - 1], [[1.0]], [0.0], "relu", ctx, depth=1)
    assert out[0].concrete == 0.0 and out[0].sym is None


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_golden_model_events_and_label(golden_model):
    ctx = ExecutionContext()
    res = forward(golden_model, golden_input(ctx), ctx)
    rowmax_events = [e for e in res.events if e.layer_index == 0]
    argmax_events = [e for e in res.events if e.layer_index == 1]
    assert len(rowmax_events) == 2
    assert rowmax_events[0].assoc_neurons == (NeuronId(1, (0, 0)),)
    assert rowmax_events[1].assoc_neurons == (NeuronId(1, (1, 0)),)
    assert len(argmax_events) == 1
    assert set(argmax_events[0].assoc_neurons) == {NeuronId(1, (0, 0)),
                                                   NeuronId(1, (1, 0))}
    assert res.label == 0  # 9.99 vs 9.96 at v=2


def test_forward_flatten_only_concrete_input_has_no_events():
    model = ModelSpec((2, 2), (Flatten(),))
    res = forward(model, [[1.0, 2.0], [3.0, 4.0]])
    assert [s.concrete for s in res.logits] == [1.0, 2.0, 3.0, 4.0]
    assert res.events == ()
    assert res.label == 3


def test_forward_two_class_dense_emits_exactly_one_argmax_event():
    rng = np.random.default_rng(21)
    model = ModelSpec((3,), (Dense(weights=rng.uniform(-1, 1, (3, 2)).tolist(),
                                   bias=[0.0, 0.0]),))
    ctx = ExecutionContext()
    x = [ctx.symvar("p0", 0.4), as_scalar(0.5), as_scalar(0.6)]
    res = forward(model, x, ctx)
    assert len(res.events) == 1
    assert res.events[0].layer_index == 1
    assert len(res.events[0].assoc_neurons) == 2


def test_forward_concrete_mode_matches_numpy_reference():
    rng = np.random.default_rng(2)
    for trial in range(8):
        model = random_toy_model(rng, seq_len=3, d_model=2, heads=2, key_dim=2,
                                 classes=3, relu=bool(trial % 2))
        x = rng.uniform(0, 1, size=(3, 2))
        res = forward(model, x.tolist())
        ref = concrete_forward(model, x)
        got = np.array([s.concrete for s in res.logits])
        assert np.allclose(got, ref, rtol=1e-9, atol=1e-12)
        assert res.events == ()  # fully concrete runs emit nothing


def test_forward_event_sequence_is_deterministic(golden_model):
    def run():
        ctx = ExecutionContext()
        res = forward(golden_model, golden_input(ctx), ctx)
        return [(e.guard.key(), e.taken, e.assoc_neurons) for e in res.events]

    assert run() == run()


def test_forward_audit_mode_checks_coherence(golden_model):
    ctx = ExecutionContext(audit=True)
    forward(golden_model, golden_input(ctx), ctx)  # must not raise


# ---------------------------------------------------------------------------
# model spec plumbing
# ---------------------------------------------------------------------------


def test_model_shape_inference_and_class_count():
    model = ModelSpec((2, 2), (golden_mha_2x2(), Flatten(),
                               Dense(weights=[[1, 0]] * 4, bias=[0, 0]),
                               Reshape((2, 1))))
    assert model.shapes == ((2, 2), (2, 2), (4,), (2,), (2, 1))
    assert model.class_count == 2


def golden_mha_2x2() -> MultiHeadAttention:
    return MultiHeadAttention(
        num_heads=1, key_dim=1,
        w_q=[[[1.0]], [[0.5]]], b_q=[[0.0]],
        w_k=[[[1.0]], [[0.5]]], b_k=[[0.0]],
        w_v=[[[1.0]], [[0.5]]], b_v=[[0.0]],
        w_o=[[[1.0, 0.5]]], b_o=[0.0, 0.0],
    )


def test_model_rejects_mismatched_weights():
    with pytest.raises(ModelConfigError):
        ModelSpec((2, 1), (Dense(weights=[[1.0]], bias=[0.0]),))  # needs flatten
    with pytest.raises(ModelConfigError):
        ModelSpec((3,), (Dense(weights=[[1.0], [1.0]], bias=[0.0]),))
    with pytest.raises(ModelConfigError):
        ModelSpec((2, 1), (Reshape((3, 1)),))
    with pytest.raises(ModelConfigError):
        ModelSpec((2, 2), (MultiHeadAttention(
            num_heads=1, key_dim=1,
            w_q=[[[1.0]]], b_q=[[0.0]], w_k=[[[1.0]], [[1.0]]], b_k=[[0.0]],
            w_v=[[[1.0]], [[1.0]]], b_v=[[0.0]],
            w_o=[[[1.0, 1.0]]], b_o=[0.0, 0.0]),))


def test_model_json_round_trip(golden_model, tmp_path):
    doc = golden_model.to_json()
    clone = ModelSpec.from_json(json.loads(json.dumps(doc)))
    assert clone.shapes == golden_model.shapes
    x = np.array([[0.3], [0.6]])
    assert np.allclose(concrete_forward(clone, x), concrete_forward(golden_model, x))


def test_association_rules_cover_all_event_kinds():
    rng = np.random.default_rng(7)
    model = random_toy_model(rng, seq_len=2, d_model=1, relu=True)
    ctx = ExecutionContext()
    x = [[ctx.symvar("p0", 0.3)], [as_scalar(0.8)]]
    res = forward(model, x, ctx)
    for event in res.events:
        if event.layer_index == 0:       # attention rowmax: one output row
            (nid,) = event.assoc_neurons
            assert nid.layer == 1 and len(nid.index) == 2
        elif event.layer_index == 2:     # dense relu: single neuron
            assert len(event.assoc_neurons) == 1
            assert event.assoc_neurons[0].layer == 3
        else:                            # argmax ladder: all output neurons
            assert event.layer_index == 3
            assert len(event.assoc_neurons) == model.class_count
