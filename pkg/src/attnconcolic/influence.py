"""Shapley-value attribution of neurons and branch-influence aggregation.

The value function of a coalition is the submodel's logit vector at a blended
input: coalition members keep the probe input's values, everyone else is set
to the background-set mean.  Small inputs are scored by exact enumeration over
all coalitions; larger ones by seeded permutation sampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .semantics import ModelSpec, apply_layer_concrete, concrete_forward
from .symexpr import BranchEvent, NeuronId

__all__ = [
    "BackgroundSet",
    "ConfigurationError",
    "InfluenceMap",
    "MissingInfluenceError",
    "branch_influence",
    "build_influence_map",
    "shap_matrix",
    "shapley",
]

EXACT_FEATURE_LIMIT = 12
DEFAULT_PERMUTATIONS = 128


class ConfigurationError(ValueError):
    """Ill-formed attribution inputs (empty background, bad feature index)."""


class MissingInfluenceError(KeyError):
    """A branch event references a neuron absent from the influence map."""


@dataclass(frozen=True)
class BackgroundSet:
    """Reference inputs defining the absent-feature baseline, plus the RNG
    seed used by the sampling estimator."""

    inputs: np.ndarray
    seed: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.inputs, dtype=float)
        if arr.ndim < 1 or arr.shape[0] == 0:
            raise ConfigurationError("background set must be non-empty")
        object.__setattr__(self, "inputs", arr)

    def conforming(self, input_shape: tuple[int, ...]) -> np.ndarray:
        if self.inputs.shape[1:] != input_shape:
            raise ConfigurationError(
                f"background inputs have shape {self.inputs.shape[1:]}, "
                f"model expects {input_shape}")
        return self.inputs


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def _coalition_logits(subnet: ModelSpec, x_flat: np.ndarray, baseline_flat: np.ndarray,
                      masks: np.ndarray) -> np.ndarray:
    blended = np.where(masks, x_flat, baseline_flat)
    batch = blended.reshape((-1,) + subnet.shapes[0])
    return concrete_forward(subnet, batch)


def _exact_matrix(subnet: ModelSpec, x_flat, baseline_flat) -> np.ndarray:
    d = x_flat.size
    bits = np.arange(1 << d, dtype=np.int64)
    masks = ((bits[:, None] >> np.arange(d)) & 1).astype(bool)
    values = _coalition_logits(subnet, x_flat, baseline_flat, masks)
    popcount = masks.sum(axis=1)
    fact = [math.factorial(s) for s in range(d + 1)]
    weights = np.array([fact[s] * fact[d - 1 - s] / fact[d] for s in range(d)])
    phi = np.zeros((d, subnet.class_count))
    for i in range(d):
        without = bits[~masks[:, i]]
        gains = values[without | (1 << i)] - values[without]
        phi[i] = (weights[popcount[without], None] * gains).sum(axis=0)
    return phi


def _permutation_matrix(subnet: ModelSpec, x_flat, baseline_flat,
                        n_permutations: int, rng: np.random.Generator) -> np.ndarray:
    d = x_flat.size
    perms = np.array([rng.permutation(d) for _ in range(n_permutations)])
    masks = np.zeros((n_permutations, d + 1, d), dtype=bool)
    for p in range(n_permutations):
        row = masks[p]
        for j, feature in enumerate(perms[p]):
            row[j + 1] = row[j]
            row[j + 1, feature] = True
    values = _coalition_logits(subnet, x_flat, baseline_flat, masks.reshape(-1, d))
    values = values.reshape(n_permutations, d + 1, subnet.class_count)
    gains = values[:, 1:] - values[:, :-1]
    phi = np.zeros((d, subnet.class_count))
    for p in range(n_permutations):
        phi[perms[p]] += gains[p]
    return phi / n_permutations


def shap_matrix(subnet: ModelSpec, background_inputs: np.ndarray, x: np.ndarray,
                *, method: str = "auto", n_permutations: int = DEFAULT_PERMUTATIONS,
                seed: Union[int, tuple[int, ...]] = 0) -> np.ndarray:
    """Shapley values of every flat input feature for every output logit.

    Returns a (features x outputs) array.  ``method`` is ``"exact"``,
    ``"permutation"``, or ``"auto"`` (exact up to 12 features).
    """
    x_flat = np.asarray(x, dtype=float).reshape(-1)
    bg = np.asarray(background_inputs, dtype=float).reshape(len(background_inputs), -1)
    if bg.shape[0] == 0:
        raise ConfigurationError("background set must be non-empty")
    if bg.shape[1] != x_flat.size:
        raise ConfigurationError(
            f"background feature width {bg.shape[1]} does not match input {x_flat.size}")
    baseline = bg.mean(axis=0)
    if method == "auto":
        method = "exact" if x_flat.size <= EXACT_FEATURE_LIMIT else "permutation"
    if method == "exact":
        if x_flat.size > 30:
            raise ConfigurationError("exact enumeration is limited to 30 features")
        return _exact_matrix(subnet, x_flat, baseline)
    if method == "permutation":
        rng = np.random.default_rng(seed)
        return _permutation_matrix(subnet, x_flat, baseline, n_permutations, rng)
    raise ConfigurationError(f"unknown estimator {method!r}")


def _feature_flat_index(feature, input_shape: tuple[int, ...]) -> int:
    if isinstance(feature, NeuronId):
        feature = feature.index
    if isinstance(feature, (tuple, list)):
        return int(np.ravel_multi_index(tuple(feature), input_shape))
    return int(feature)


def shapley(subnet: ModelSpec, background: BackgroundSet, input, feature,
            output: int, *, method: str = "auto",
            n_permutations: int = DEFAULT_PERMUTATIONS) -> float:
    """Shapley value of one input feature of ``subnet`` for one output logit.

    ``feature`` may be a flat index, a multi-index, or a :class:`NeuronId`
    whose index addresses the subnet's input grid.
    """
    if not 0 <= output < subnet.class_count:
        raise ConfigurationError(f"output {output} out of range")
    inputs = background.conforming(subnet.shapes[0])
    matrix = shap_matrix(subnet, inputs, input, method=method,
                         n_permutations=n_permutations, seed=background.seed)
    return float(matrix[_feature_flat_index(feature, subnet.shapes[0]), output])


# ---------------------------------------------------------------------------
# Influence maps
# ---------------------------------------------------------------------------


@dataclass
class InfluenceMap:
    """Per-neuron influence: the average absolute Shapley value over all
    output logits, keyed by (depth, multi-index)."""

    values: dict[NeuronId, float] = field(default_factory=dict)

    def __getitem__(self, neuron: NeuronId) -> float:
        return self.values[neuron]

    def __contains__(self, neuron: NeuronId) -> bool:
        return neuron in self.values

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    def layer_summary(self) -> dict[int, tuple[int, float, float, float]]:
        """Per-depth (count, min, max, mean) of influence values."""
        by_layer: dict[int, list[float]] = {}
        for nid, val in self.values.items():
            by_layer.setdefault(nid.layer, []).append(val)
        return {layer: (len(vals), min(vals), max(vals), sum(vals) / len(vals))
                for layer, vals in sorted(by_layer.items())}

    def to_json(self) -> dict[str, float]:
        return {nid.key(): val for nid, val in
                sorted(self.values.items(), key=lambda kv: kv[0])}

    @classmethod
    def from_json(cls, doc: Mapping[str, float]) -> "InfluenceMap":
        return cls({NeuronId.from_key(key): float(val) for key, val in doc.items()})

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "InfluenceMap":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def depth_activations(model: ModelSpec, background: BackgroundSet,
                      seed_input: np.ndarray):
    """Yield (depth, probe activations, background activations) for every
    neuron grid from the input up to and including the logits."""
    x_l = np.asarray(seed_input, dtype=float)[None, ...]
    if x_l.shape[1:] != model.shapes[0]:
        raise ConfigurationError(
            f"seed input shape {x_l.shape[1:]} does not match model {model.shapes[0]}")
    bg_l = background.conforming(model.shapes[0])
    for depth in range(len(model.layers) + 1):
        yield depth, x_l, bg_l
        if depth < len(model.layers):
            layer = model.layers[depth]
            out_shape = model.shapes[depth + 1]
            x_l = apply_layer_concrete(layer, x_l, out_shape)
            bg_l = apply_layer_concrete(layer, bg_l, out_shape)


def build_influence_map(model: ModelSpec, background: BackgroundSet, seed_input,
                        *, n_permutations: int = DEFAULT_PERMUTATIONS,
                        method: str = "auto") -> InfluenceMap:
    """Layer-by-layer influence of every neuron, computed once per seed.

    Walks the grids from the input down: at each depth the submodel starting
    strictly after that grid scores its inputs, the probe and background are
    advanced through the consumed layer, and the per-neuron influence is the
    mean absolute attribution over all output logits.  The logit grid itself
    is scored against the identity tail (its attribution has the closed form
    |activation - background mean| / class_count), so every neuron that can
    appear in a branch event has an influence, the final argmax included.
    """
    values: dict[NeuronId, float] = {}
    out_depth = model.output_depth
    for depth, x_l, bg_l in depth_activations(model, background, seed_input):
        neuron_ids = model.neuron_ids(depth)
        if depth == out_depth:
            x_flat = x_l.reshape(-1)
            mean_flat = bg_l.reshape(bg_l.shape[0], -1).mean(axis=0)
            per = np.abs(x_flat - mean_flat) / model.class_count
            for flat, nid in enumerate(neuron_ids):
                values[nid] = float(per[flat])
            break
        subnet = model.tail(depth)
        matrix = shap_matrix(subnet, bg_l, x_l[0], method=method,
                             n_permutations=n_permutations,
                             seed=(background.seed, depth))
        mean_abs = np.abs(matrix).mean(axis=1)
        for flat, nid in enumerate(neuron_ids):
            values[nid] = float(mean_abs[flat])
    return InfluenceMap(values)


def branch_influence(event: BranchEvent, influence_map: InfluenceMap) -> float:
    """Arithmetic mean of the map's values over the event's associated neurons."""
    total = 0.0
    for neuron in event.assoc_neurons:
        if neuron not in influence_map:
            raise MissingInfluenceError(
                f"neuron {neuron} missing from influence map "
                "(association/registration bug)")
        total += influence_map[neuron]
    return total / len(event.assoc_neurons)
