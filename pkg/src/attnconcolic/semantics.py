"""Forward semantics for the supported layer types over concolic scalars.

The instrumented path (:func:`forward` and the stage functions ``tas``,
``dpa``, ``stable_softmax``, ``rowmax``, ``concat``, ``dense_forward``) is
written in plain Python loops so every comparison stays visible to the branch
listener and every intermediate stays a :class:`~attnconcolic.symexpr.ConcolicScalar`.
A vectorized numpy twin (:func:`concrete_forward`) serves the attribution code
and equivalence tests, where no instrumentation is needed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .symexpr import (
    ConcolicScalar,
    ExecutionContext,
    NeuronId,
    Rel,
    as_scalar,
    concretize,
)

__all__ = [
    "Dense",
    "Flatten",
    "ForwardResult",
    "LayerSpec",
    "ModelConfigError",
    "ModelSpec",
    "MultiHeadAttention",
    "Reshape",
    "attention_scores",
    "concat",
    "concrete_forward",
    "concrete_label",
    "dense_forward",
    "dpa",
    "forward",
    "load_model",
    "load_seed_input",
    "rowmax",
    "stable_softmax",
    "tas",
]


class ModelConfigError(ValueError):
    """A layer or weight tensor does not fit the declared shapes."""


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------


def _dims(tensor) -> tuple[int, ...]:
    """Shape of a nested list, insisting on rectangularity."""
    shape: list[int] = []
    t = tensor
    while isinstance(t, (list, tuple)):
        shape.append(len(t))
        t = t[0] if t else None
    arr = np.asarray(tensor, dtype=float)
    if arr.shape != tuple(shape):
        raise ModelConfigError("ragged weight tensor")
    return tuple(shape)


@dataclass(frozen=True)
class MultiHeadAttention:
    """Multi-head self-attention with per-head projections and output merge.

    Weight shapes: ``w_q/w_k/w_v``: d_model x heads x d_k, ``b_q/b_k/b_v``:
    heads x d_k, ``w_o``: heads x d_k x d_model, ``b_o``: d_model.
    """

    num_heads: int
    key_dim: int
    w_q: tuple
    b_q: tuple
    w_k: tuple
    b_k: tuple
    w_v: tuple
    b_v: tuple
    w_o: tuple
    b_o: tuple

    def validate(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(in_shape) != 2:
            raise ModelConfigError(
                f"attention expects a (seq_len, model_dim) input, got {in_shape}")
        seq_len, d_model = in_shape
        h, d_k = self.num_heads, self.key_dim
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if _dims(w) != (d_model, h, d_k):
                raise ModelConfigError(
                    f"{name} must have shape ({d_model}, {h}, {d_k}), got {_dims(w)}")
        for name, b in (("b_q", self.b_q), ("b_k", self.b_k), ("b_v", self.b_v)):
            if _dims(b) != (h, d_k):
                raise ModelConfigError(
                    f"{name} must have shape ({h}, {d_k}), got {_dims(b)}")
        if _dims(self.w_o) != (h, d_k, d_model):
            raise ModelConfigError(
                f"w_o must have shape ({h}, {d_k}, {d_model}), got {_dims(self.w_o)}")
        if _dims(self.b_o) != (d_model,):
            raise ModelConfigError(f"b_o must have shape ({d_model},)")
        return (seq_len, d_model)


@dataclass(frozen=True)
class Dense:
    """Affine map on a flat vector with an optional ReLU."""

    weights: tuple  # in_width x out_width
    bias: tuple
    activation: str = "none"

    def validate(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(in_shape) != 1:
            raise ModelConfigError(f"dense expects a flat input, got {in_shape}")
        shape = _dims(self.weights)
        if len(shape) != 2 or shape[0] != in_shape[0]:
            raise ModelConfigError(
                f"dense weights must have {in_shape[0]} rows, got {shape}")
        if _dims(self.bias) != (shape[1],):
            raise ModelConfigError(f"dense bias must have shape ({shape[1]},)")
        if self.activation not in ("none", "relu"):
            raise ModelConfigError(f"unknown activation {self.activation!r}")
        return (shape[1],)


@dataclass(frozen=True)
class Flatten:
    def validate(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return (int(np.prod(in_shape)),)


@dataclass(frozen=True)
class Reshape:
    target_shape: tuple[int, ...]

    def validate(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        target = tuple(int(d) for d in self.target_shape)
        if int(np.prod(in_shape)) != int(np.prod(target)):
            raise ModelConfigError(
                f"cannot reshape {in_shape} into {target}")
        return target


LayerSpec = Union[MultiHeadAttention, Dense, Flatten, Reshape]


@dataclass(frozen=True)
class ModelSpec:
    """An ordered layer list with composed shapes.

    ``shapes[d]`` is the neuron grid at depth ``d``: depth 0 is the input,
    depth ``i + 1`` the output of ``layers[i]``.  The final grid holds the
    logits; ``class_count`` is its flat size.
    """

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False)
    class_count: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ModelConfigError("a model needs at least one layer")
        shapes = [tuple(int(d) for d in self.input_shape)]
        for layer in self.layers:
            shapes.append(layer.validate(shapes[-1]))
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "class_count", int(np.prod(shapes[-1])))

    @property
    def output_depth(self) -> int:
        return len(self.layers)

    def neuron_ids(self, depth: int) -> list[NeuronId]:
        shape = self.shapes[depth]
        return [NeuronId(depth, idx) for idx in np.ndindex(*shape)]

    def tail(self, depth: int) -> "ModelSpec":
        """Submodel starting strictly after depth ``depth``'s grid."""
        if not 0 <= depth < len(self.layers):
            raise ModelConfigError(f"no submodel starts at depth {depth}")
        return ModelSpec(self.shapes[depth], self.layers[depth:])

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, MultiHeadAttention):
                layers.append({
                    "type": "mha",
                    "num_heads": layer.num_heads,
                    "key_dim": layer.key_dim,
                    "w_q": layer.w_q, "b_q": layer.b_q,
                    "w_k": layer.w_k, "b_k": layer.b_k,
                    "w_v": layer.w_v, "b_v": layer.b_v,
                    "w_o": layer.w_o, "b_o": layer.b_o,
                })
            elif isinstance(layer, Dense):
                layers.append({"type": "dense", "weights": layer.weights,
                               "bias": layer.bias, "activation": layer.activation})
            elif isinstance(layer, Flatten):
                layers.append({"type": "flatten"})
            else:
                layers.append({"type": "reshape",
                               "target_shape": list(layer.target_shape)})
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        try:
            input_shape = tuple(int(d) for d in doc["input_shape"])
            raw_layers = doc["layers"]
        except (KeyError, TypeError) as exc:
            raise ModelConfigError(f"model document missing field: {exc}") from exc
        layers: list[LayerSpec] = []
        for i, spec in enumerate(raw_layers):
            kind = spec.get("type")
            try:
                if kind == "mha":
                    layers.append(MultiHeadAttention(
                        num_heads=int(spec["num_heads"]),
                        key_dim=int(spec["key_dim"]),
                        w_q=spec["w_q"], b_q=spec["b_q"],
                        w_k=spec["w_k"], b_k=spec["b_k"],
                        w_v=spec["w_v"], b_v=spec["b_v"],
                        w_o=spec["w_o"], b_o=spec["b_o"]))
                elif kind == "dense":
                    layers.append(Dense(weights=spec["weights"], bias=spec["bias"],
                                        activation=spec.get("activation", "none")))
                elif kind == "flatten":
                    layers.append(Flatten())
                elif kind == "reshape":
                    layers.append(Reshape(tuple(spec["target_shape"])))
                else:
                    raise ModelConfigError(f"layer {i}: unknown type {kind!r}")
            except KeyError as exc:
                raise ModelConfigError(f"layer {i} ({kind}): missing field {exc}") from exc
        return cls(input_shape, tuple(layers))


def load_model(path: str) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return ModelSpec.from_json(json.load(fh))


def load_seed_input(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return np.asarray(json.load(fh), dtype=float)


# ---------------------------------------------------------------------------
# Instrumented (pure Python) semantics
# ---------------------------------------------------------------------------

Matrix = list  # nested lists of ConcolicScalar


def _coerce_grid(x, shape: tuple[int, ...]):
    """Nested structure of ConcolicScalars matching ``shape``."""
    if not shape:
        raise ModelConfigError("scalar model inputs are not supported")

    def rec(node, dims):
        if not dims:
            return as_scalar(node)
        if len(node) != dims[0]:
            raise ModelConfigError(
                f"input does not match declared shape {shape}")
        return [rec(child, dims[1:]) for child in node]

    return rec(x, shape)


def tas(vectors: Matrix, weights, bias) -> Matrix:
    """Transform-and-split: per-head linear projection of the token matrix.

    out[i][t][j] = sum_k vectors[t][k] * weights[k][i][j] + bias[i][j]
    """
    d_model = len(weights)
    num_heads = len(weights[0])
    key_dim = len(weights[0][0])
    seq_len = len(vectors)
    out = []
    for i in range(num_heads):
        head = []
        for t in range(seq_len):
            row = []
            for j in range(key_dim):
                acc = as_scalar(bias[i][j])
                for k in range(d_model):
                    acc = acc + vectors[t][k] * weights[k][i][j]
                row.append(acc)
            head.append(row)
        out.append(head)
    return out


def attention_scores(q_head: Matrix, k_head: Matrix) -> Matrix:
    """Unscaled score matrix S[t][u] = sum_j Q[t][j] * K[u][j]."""
    seq_len = len(q_head)
    key_dim = len(q_head[0])
    scores = []
    for t in range(seq_len):
        row = []
        for u in range(seq_len):
            acc = q_head[t][0] * k_head[u][0]
            for j in range(1, key_dim):
                acc = acc + q_head[t][j] * k_head[u][j]
            row.append(acc)
        scores.append(row)
    return scores


def rowmax(row: Sequence[ConcolicScalar], ctx: Optional[ExecutionContext] = None,
           assoc: Optional[Sequence[NeuronId]] = None,
           layer_index: int = 0) -> ConcolicScalar:
    """Running maximum by a left-to-right strict ``>`` scan.

    Each comparison against the running max goes through the branch listener,
    so every symbolic entry scanned emits one event.
    """
    ctx = ctx if ctx is not None else ExecutionContext()
    best = as_scalar(row[0])
    scope = ctx.association(assoc, layer_index) if assoc is not None else None
    if scope is not None:
        scope.__enter__()
    try:
        for entry in row[1:]:
            entry = as_scalar(entry)
            if ctx.compare(Rel.GT, entry, best):
                best = entry
    finally:
        if scope is not None:
            scope.__exit__(None, None, None)
    return best


def stable_softmax(x: Matrix, ctx: Optional[ExecutionContext] = None,
                   row_assoc: Optional[Callable[[int], Sequence[NeuronId]]] = None,
                   layer_index: int = 0) -> Matrix:
    """Row-wise stable softmax with concretized exponent arguments.

    The row max comes from :func:`rowmax` (emitting branch events); arguments
    to ``exp`` are downgraded to their concrete values, so output rows are
    concrete, non-negative, and sum to one.  Without ``row_assoc``, a row's
    guards associate with the row's own cells.
    """
    ctx = ctx if ctx is not None else ExecutionContext()
    out = []
    for t, row in enumerate(x):
        if row_assoc is not None:
            assoc = row_assoc(t)
        else:
            assoc = [NeuronId(layer_index, (t, u)) for u in range(len(row))]
        m = rowmax(row, ctx, assoc, layer_index)
        exps = [math.exp(concretize(as_scalar(entry) - m).concrete) for entry in row]
        total = sum(exps)
        out.append([ConcolicScalar(e / total) for e in exps])
    return out


def dpa(Q: Matrix, K: Matrix, V: Matrix, ctx: Optional[ExecutionContext] = None,
        out_width: Optional[int] = None, depth: int = 0,
        layer_index: int = 0) -> Matrix:
    """Scaled dot-product attention per head: softmax(Q K^T / sqrt(d_k)) V.

    ``out_width`` is the attention layer's model dimension; the max scans in
    softmax associate row ``t`` with the output-row neurons ``(t, 0..out_width)``
    at ``depth``.
    """
    ctx = ctx if ctx is not None else ExecutionContext()
    num_heads = len(Q)
    key_dim = len(Q[0][0])
    seq_len = len(Q[0])
    if out_width is None:
        out_width = key_dim
    scale = 1.0 / math.sqrt(key_dim)
    out = []
    for i in range(num_heads):
        scores = attention_scores(Q[i], K[i])
        scaled = [[entry * scale for entry in row] for row in scores]

        def row_neurons(t: int) -> list[NeuronId]:
            return [NeuronId(depth, (t, k)) for k in range(out_width)]

        probs = stable_softmax(scaled, ctx, row_neurons, layer_index)
        head = []
        for t in range(seq_len):
            row = []
            for j in range(key_dim):
                acc = probs[t][0] * V[i][0][j]
                for u in range(1, seq_len):
                    acc = acc + probs[t][u] * V[i][u][j]
                row.append(acc)
            head.append(row)
        out.append(head)
    return out


def concat(attentions: Matrix, weights, bias) -> Matrix:
    """Concatenate head outputs and project: Y[t][l] = sum_i sum_j A[i][t][j] * W_O[i][j][l] + B_O[l]."""
    num_heads = len(attentions)
    seq_len = len(attentions[0])
    key_dim = len(attentions[0][0])
    d_model = len(bias)
    out = []
    for t in range(seq_len):
        row = []
        for ell in range(d_model):
            acc = as_scalar(bias[ell])
            for i in range(num_heads):
                for j in range(key_dim):
                    acc = acc + attentions[i][t][j] * weights[i][j][ell]
            row.append(acc)
        out.append(row)
    return out


def dense_forward(x: Sequence[ConcolicScalar], weights, bias, activation: str = "none",
                  ctx: Optional[ExecutionContext] = None, depth: int = 0,
                  layer_index: int = 0) -> list[ConcolicScalar]:
    """Affine map with optional ReLU.

    Each ReLU guard is ``pre > 0`` with the single affected output neuron as
    its association; the negative branch yields a plain concrete zero.
    """
    ctx = ctx if ctx is not None else ExecutionContext()
    in_width = len(weights)
    out_width = len(bias)
    if len(x) != in_width:
        raise ModelConfigError(
            f"dense input width {len(x)} does not match weights ({in_width} rows)")
    out = []
    for j in range(out_width):
        acc = as_scalar(bias[j])
        for k in range(in_width):
            acc = acc + as_scalar(x[k]) * weights[k][j]
        if activation == "relu":
            with ctx.association([NeuronId(depth, (j,))], layer_index):
                positive = ctx.compare(Rel.GT, acc, as_scalar(0.0))
            acc = acc if positive else ConcolicScalar(0.0)
        out.append(acc)
    return out


def _flatten_grid(vals) -> list[ConcolicScalar]:
    if isinstance(vals, ConcolicScalar):
        return [vals]
    flat: list[ConcolicScalar] = []
    for child in vals:
        flat.extend(_flatten_grid(child))
    return flat


def _reshape_flat(flat: list[ConcolicScalar], shape: tuple[int, ...]):
    if len(shape) == 1:
        return list(flat)
    step = int(np.prod(shape[1:]))
    return [_reshape_flat(flat[i * step:(i + 1) * step], shape[1:])
            for i in range(shape[0])]


@dataclass(frozen=True)
class ForwardResult:
    logits: tuple[ConcolicScalar, ...]
    events: tuple
    label: int


def forward(model: ModelSpec, x, ctx: Optional[ExecutionContext] = None) -> ForwardResult:
    """Run the instrumented model: all layers in order, then an argmax ladder
    over the flattened logits (associated with every output neuron).

    Returns the logits, the branch events in occurrence order, and the label.
    """
    ctx = ctx if ctx is not None else ExecutionContext()
    start = len(ctx.events)
    vals = _coerce_grid(x, model.shapes[0])
    for j, layer in enumerate(model.layers):
        depth = j + 1
        if isinstance(layer, MultiHeadAttention):
            Q = tas(vals, layer.w_q, layer.b_q)
            K = tas(vals, layer.w_k, layer.b_k)
            V = tas(vals, layer.w_v, layer.b_v)
            A = dpa(Q, K, V, ctx, out_width=model.shapes[depth][1],
                    depth=depth, layer_index=j)
            vals = concat(A, layer.w_o, layer.b_o)
        elif isinstance(layer, Dense):
            vals = dense_forward(vals, layer.weights, layer.bias, layer.activation,
                                 ctx, depth=depth, layer_index=j)
        elif isinstance(layer, Flatten):
            vals = _flatten_grid(vals)
        else:
            vals = _reshape_flat(_flatten_grid(vals), model.shapes[depth])
        if ctx.audit:
            for s in _flatten_grid(vals):
                ctx.audit_scalar(s)

    logits = _flatten_grid(vals)
    label = 0
    out_neurons = model.neuron_ids(model.output_depth)
    with ctx.association(out_neurons, len(model.layers)):
        for c in range(1, len(logits)):
            if ctx.compare(Rel.GT, logits[c], logits[label]):
                label = c
    return ForwardResult(tuple(logits), tuple(ctx.events[start:]), label)


# ---------------------------------------------------------------------------
# Concrete (numpy) reference path
# ---------------------------------------------------------------------------


def _np_weights(layer: MultiHeadAttention):
    return (np.asarray(layer.w_q, dtype=float), np.asarray(layer.b_q, dtype=float),
            np.asarray(layer.w_k, dtype=float), np.asarray(layer.b_k, dtype=float),
            np.asarray(layer.w_v, dtype=float), np.asarray(layer.b_v, dtype=float),
            np.asarray(layer.w_o, dtype=float), np.asarray(layer.b_o, dtype=float))


def apply_layer_concrete(layer: LayerSpec, batch: np.ndarray,
                         out_shape: tuple[int, ...]) -> np.ndarray:
    """Vectorized concrete semantics of one layer over a batch."""
    if isinstance(layer, MultiHeadAttention):
        wq, bq, wk, bk, wv, bv, wo, bo = _np_weights(layer)
        scale = 1.0 / math.sqrt(layer.key_dim)
        q = np.einsum("ntk,kij->nitj", batch, wq) + bq[None, :, None, :]
        k = np.einsum("ntk,kij->nitj", batch, wk) + bk[None, :, None, :]
        v = np.einsum("ntk,kij->nitj", batch, wv) + bv[None, :, None, :]
        scores = np.einsum("nitj,niuj->nitu", q, k) * scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs = probs / probs.sum(axis=-1, keepdims=True)
        heads = np.einsum("nitu,niuj->nitj", probs, v)
        return np.einsum("nitj,ijl->ntl", heads, wo) + bo[None, None, :]
    if isinstance(layer, Dense):
        w = np.asarray(layer.weights, dtype=float)
        b = np.asarray(layer.bias, dtype=float)
        out = batch @ w + b
        if layer.activation == "relu":
            out = np.where(out > 0.0, out, 0.0)
        return out
    # flatten / reshape
    return batch.reshape((batch.shape[0],) + out_shape)


def concrete_forward(model: ModelSpec, batch: np.ndarray,
                     upto_depth: Optional[int] = None) -> np.ndarray:
    """Concrete activations of a batch at ``upto_depth`` (default: the logits,
    flattened to (n, class_count))."""
    batch = np.asarray(batch, dtype=float)
    single = batch.shape == model.shapes[0]
    if single:
        batch = batch[None, ...]
    if batch.shape[1:] != model.shapes[0]:
        raise ModelConfigError(
            f"batch shape {batch.shape[1:]} does not match input {model.shapes[0]}")
    stop = len(model.layers) if upto_depth is None else upto_depth
    out = batch
    for j in range(stop):
        out = apply_layer_concrete(model.layers[j], out, model.shapes[j + 1])
    if upto_depth is None:
        out = out.reshape(out.shape[0], -1)
    return out[0] if single else out


def concrete_label(model: ModelSpec, x: np.ndarray) -> int:
    """Predicted class by the concrete reference path (first max wins)."""
    logits = concrete_forward(model, np.asarray(x, dtype=float))
    return int(np.argmax(logits))
