"""Influence-guided concolic search for label flips.

The loop alternates a concolic forward pass with SMT solving: bypassed
branches become work items (path prefix conjoined with the negated branch),
a scheduler picks the next item, a SAT solution is adopted as the next
concrete input, and any claimed flip is validated by a plain concrete
re-execution before being reported.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .influence import InfluenceMap, branch_influence
from .semantics import ModelSpec, forward
from .solver import (
    SAT,
    UNSAT,
    Backend,
    SolverRequest,
    assignment_satisfies,
)
from .symexpr import (
    BranchEvent,
    Comparison,
    ConcolicScalar,
    ExecutionContext,
    count_unique_nodes,
    sub,
    const,
)

__all__ = [
    "AttackResult",
    "PathTree",
    "RunStats",
    "Scheduler",
    "WorkItem",
    "attack_result_to_json",
    "build_constraint",
    "harvest",
    "make_symbolic_input",
    "run_attack",
    "schedule_pop",
]

SUCCESS = "success"
EXHAUSTED = "exhausted"
TIMEOUT = "timeout"

_POLICIES = ("fifo", "pq", "pq_layers", "pq_capped")


@dataclass(frozen=True)
class Scheduler:
    """Queue discipline: FIFO, influence-priority, layer-then-influence, or
    influence-priority with a per-constraint build-time cap."""

    policy: str
    build_cap_s: Optional[float] = None

    def __post_init__(self) -> None:
        if self.policy not in _POLICIES:
            raise ValueError(f"unknown scheduling policy {self.policy!r}")

    @classmethod
    def fifo(cls) -> "Scheduler":
        return cls("fifo")

    @classmethod
    def pq(cls) -> "Scheduler":
        return cls("pq")

    @classmethod
    def pq_layers(cls) -> "Scheduler":
        return cls("pq_layers")

    @classmethod
    def pq_capped(cls, cap_s: float = 30.0) -> "Scheduler":
        return cls("pq_capped", build_cap_s=cap_s)


@dataclass(frozen=True)
class WorkItem:
    """One bypassed branch: the path prefix in taken polarity conjoined with
    the negated guard, plus its scheduling metadata."""

    constraint: tuple[Comparison, ...]
    influence: float
    layer_index: int
    node_count: int
    ordinal: int


@dataclass
class RunStats:
    iterations: int = 0
    sat: int = 0
    unsat: int = 0
    unknown: int = 0
    generated_constraints: int = 0
    solved_constraints: int = 0
    skipped_builds: int = 0
    wall_seconds: float = 0.0
    cpu_seconds: float = 0.0
    outcome: str = ""


@dataclass
class AttackResult:
    seed: np.ndarray
    pixel_indices: tuple[int, ...]
    domains: tuple[tuple[float, float], ...]
    original_label: int
    flipped_label: Optional[int]
    adversarial: Optional[np.ndarray]
    stats: RunStats
    pop_trace: tuple[tuple[int, float], ...] = ()
    paths: tuple[tuple, ...] = ()


class PathTree:
    """Tree of guard outcomes across all executed paths.

    Edges are keyed by (guard key, outcome); the enqueued set remembers which
    bypassed branches were already turned into work items, so no (prefix node,
    predicate) pair is enqueued twice.
    """

    def __init__(self) -> None:
        self.children: list[dict[tuple, int]] = [{}]
        self.enqueued: set[tuple[int, tuple]] = set()
        self.next_ordinal: int = 0

    @property
    def root(self) -> int:
        return 0

    def child(self, node: int, edge: tuple) -> int:
        nxt = self.children[node].get(edge)
        if nxt is None:
            nxt = len(self.children)
            self.children.append({})
            self.children[node][edge] = nxt
        return nxt


def harvest(events: Sequence[BranchEvent], influence_map: InfluenceMap,
            tree: PathTree) -> list[WorkItem]:
    """Turn one run's bypassed branches into deduplicated work items.

    Walks the events in order, extending the path tree along the taken
    outcomes; each not-yet-seen bypassed branch yields an item whose
    constraint conjoins all ancestor literals with the bypassed predicate and
    whose influence is frozen from the seed-input influence map.
    """
    items: list[WorkItem] = []
    node = tree.root
    prefix: list[Comparison] = []
    for event in events:
        guard_key = event.guard.key()
        bypass_edge = (guard_key, not event.taken)
        if bypass_edge not in tree.children[node] and \
                (node, bypass_edge) not in tree.enqueued:
            tree.enqueued.add((node, bypass_edge))
            constraint = (*prefix, event.bypassed_predicate)
            exprs = [e for cmp in constraint for e in (cmp.lhs, cmp.rhs)]
            items.append(WorkItem(
                constraint=constraint,
                influence=branch_influence(event, influence_map),
                layer_index=event.layer_index,
                node_count=count_unique_nodes(exprs),
                ordinal=tree.next_ordinal,
            ))
            tree.next_ordinal += 1
        node = tree.child(node, (guard_key, event.taken))
        prefix.append(event.taken_literal())
    return items


def build_constraint(item: WorkItem, cap_seconds: Optional[float] = None
                     ) -> Optional[tuple[Comparison, ...]]:
    """Materialize the conjunction with each comparison normalized to
    ``expr relop 0``; returns None (skipped) if the build exceeds the cap."""
    start = time.monotonic()

    def over_cap() -> bool:
        return cap_seconds is not None and time.monotonic() - start >= cap_seconds

    normalized: list[Comparison] = []
    for cmp in item.constraint:
        if over_cap():
            return None
        normalized.append(Comparison(cmp.rel, sub(cmp.lhs, cmp.rhs), const(0.0)))
    if cap_seconds is not None:
        # size the normalized conjunction, checking the clock as we walk
        seen: set[int] = set()
        stack = [e for cmp in normalized for e in (cmp.lhs, cmp.rhs)]
        visited = 0
        while stack:
            node = stack.pop()
            if node.serial in seen:
                continue
            seen.add(node.serial)
            stack.extend(node.args)
            visited += 1
            if visited % 2048 == 0 and over_cap():
                return None
        if over_cap():
            return None
    return tuple(normalized)


def _pop_key(item: WorkItem, policy: str):
    if policy == "fifo":
        return (item.ordinal,)
    if policy == "pq_layers":
        return (item.layer_index, -item.influence, item.ordinal)
    return (-item.influence, item.ordinal)  # pq and pq_capped


def schedule_pop(queue: list[WorkItem], scheduler: Scheduler) -> WorkItem:
    """Remove and return the next item under the scheduler's policy."""
    if not queue:
        raise ValueError("schedule_pop on an empty queue")
    best = min(range(len(queue)), key=lambda i: _pop_key(queue[i], scheduler.policy))
    return queue.pop(best)


def make_symbolic_input(x: np.ndarray, pixel_indices: Sequence[int],
                        ctx: ExecutionContext, var_prefix: str = "p"):
    """Nested concolic input grid: the chosen flat pixels become symbolic
    variables seeded at their current concrete values."""
    flat = [ConcolicScalar(float(v)) for v in np.asarray(x, dtype=float).reshape(-1)]
    for idx in pixel_indices:
        flat[idx] = ctx.symvar(f"{var_prefix}{idx}", float(x.reshape(-1)[idx]))

    def rebuild(values, shape):
        if len(shape) == 1:
            return list(values)
        step = int(np.prod(shape[1:]))
        return [rebuild(values[i * step:(i + 1) * step], shape[1:])
                for i in range(shape[0])]

    return rebuild(flat, x.shape)


def _normalize_domains(domain, n_pixels: int) -> tuple[tuple[float, float], ...]:
    if isinstance(domain, (tuple, list)) and len(domain) == 2 \
            and not isinstance(domain[0], (tuple, list)):
        domain = [domain] * n_pixels
    domains = tuple((float(lo), float(hi)) for lo, hi in domain)
    if len(domains) != n_pixels:
        raise ValueError("one (lo, hi) pair per perturbed pixel required")
    for lo, hi in domains:
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise ValueError(f"invalid pixel domain [{lo}, {hi}]")
    return domains


def run_attack(model: ModelSpec, influence_map: InfluenceMap, seed,
               pixels: Sequence[int], domain=(0.0, 1.0),
               scheduler: Optional[Scheduler] = None,
               wall_budget_s: Optional[float] = None, *,
               backend: Backend, solver_timeout_s: float = 60.0,
               audit: bool = False, var_prefix: str = "p") -> AttackResult:
    """Search for a label flip by perturbing the chosen pixels within bounds.

    Implements the concolic loop: forward at the current input, harvest
    bypassed branches, pop per scheduler, solve, adopt SAT solutions as the
    next input; stops on a validated flip, a drained queue, or the wall
    budget.  Every reported adversarial input has been re-executed concretely.
    """
    scheduler = scheduler if scheduler is not None else Scheduler.pq()
    seed_arr = np.asarray(seed, dtype=float)
    if seed_arr.shape != model.shapes[0]:
        raise ValueError(
            f"seed shape {seed_arr.shape} does not match model input {model.shapes[0]}")
    pixels = tuple(int(p) for p in pixels)
    if not pixels:
        raise ValueError("at least one pixel to perturb is required")
    if len(set(pixels)) != len(pixels):
        raise ValueError("duplicate pixel indices")
    total = seed_arr.size
    if any(not 0 <= p < total for p in pixels):
        raise ValueError("pixel index out of range")
    domains = _normalize_domains(domain, len(pixels))
    var_names = [f"{var_prefix}{p}" for p in pixels]
    variables = tuple((name, lo, hi)
                      for name, (lo, hi) in zip(var_names, domains))

    stats = RunStats()
    tree = PathTree()
    queue: list[WorkItem] = []
    pop_trace: list[tuple[int, float]] = []
    paths: list[tuple] = []
    x_cur = seed_arr.copy()
    y0: Optional[int] = None
    flipped: Optional[int] = None
    adversarial: Optional[np.ndarray] = None
    start_wall = time.monotonic()
    start_cpu = time.process_time()

    def out_of_budget() -> bool:
        return wall_budget_s is not None and \
            time.monotonic() - start_wall >= wall_budget_s

    outcome = ""
    while True:
        stats.iterations += 1
        ctx = ExecutionContext(audit=audit)
        result = forward(model, make_symbolic_input(x_cur, pixels, ctx, var_prefix), ctx)
        # control-path signature: guard sites execute in a fixed order, so the
        # outcome sequence identifies the concrete path (guard formulas differ
        # across inputs once softmax constants are baked in)
        paths.append(tuple((e.layer_index, e.taken) for e in result.events))
        if y0 is None:
            y0 = result.label
        elif any(x_cur.reshape(-1)[p] != seed_arr.reshape(-1)[p] for p in pixels) \
                and result.label != y0:
            confirm = forward(model, x_cur).label
            if confirm != y0:
                adversarial = x_cur.copy()
                flipped = confirm
                outcome = SUCCESS
                break

        new_items = harvest(result.events, influence_map, tree)
        stats.generated_constraints += len(new_items)
        queue.extend(new_items)

        adopted = False
        while queue:
            if out_of_budget():
                outcome = TIMEOUT
                break
            item = schedule_pop(queue, scheduler)
            pop_trace.append((item.layer_index, item.influence))
            built = build_constraint(item, scheduler.build_cap_s)
            if built is None:
                stats.skipped_builds += 1
                continue
            request = SolverRequest(variables, built, solver_timeout_s)
            verdict = backend.check(request)
            stats.solved_constraints += 1
            if verdict.status == SAT:
                stats.sat += 1
                candidate = _adopt(verdict.assignment, request)
                if candidate is None:
                    continue
                nxt = x_cur.copy().reshape(-1)
                for name, pixel in zip(var_names, pixels):
                    nxt[pixel] = candidate[name]
                x_cur = nxt.reshape(seed_arr.shape)
                adopted = True
                break
            if verdict.status == UNSAT:
                stats.unsat += 1
            else:
                stats.unknown += 1
        if outcome:
            break
        if not adopted:
            outcome = EXHAUSTED
            break
        if out_of_budget():
            outcome = TIMEOUT
            break

    stats.outcome = outcome
    stats.wall_seconds = time.monotonic() - start_wall
    stats.cpu_seconds = time.process_time() - start_cpu
    return AttackResult(
        seed=seed_arr, pixel_indices=pixels, domains=domains,
        original_label=int(y0), flipped_label=flipped, adversarial=adversarial,
        stats=stats, pop_trace=tuple(pop_trace), paths=tuple(paths))


def _adopt(assignment, request: SolverRequest) -> Optional[dict[str, float]]:
    """Clamp a solver model into bounds and re-verify it; None if unusable."""
    if assignment is None:
        return None
    clamped: dict[str, float] = {}
    for name, lo, hi in request.variables:
        value = assignment.get(name)
        if value is None or value < lo - 1e-9 or value > hi + 1e-9:
            return None
        clamped[name] = min(max(value, lo), hi)
    if not assignment_satisfies(request, clamped):
        return None
    return clamped


def attack_result_to_json(result: AttackResult, seed_ref: str = "") -> dict:
    """Flat export: seed reference, pixels, labels, adversarial pixel values,
    and the run statistics under their reporting names."""
    adversarial_values = None
    if result.adversarial is not None:
        flat = result.adversarial.reshape(-1)
        adversarial_values = {f"p{p}": float(flat[p]) for p in result.pixel_indices}
    stats = result.stats
    return {
        "seed": seed_ref or [float(v) for v in result.seed.reshape(-1)],
        "pixel_indices": list(result.pixel_indices),
        "domain": [[lo, hi] for lo, hi in result.domains],
        "original_label": result.original_label,
        "flipped_label": result.flipped_label,
        "adversarial_values": adversarial_values,
        "iterations": stats.iterations,
        "sat": stats.sat,
        "unsat": stats.unsat,
        "gen_constraints": stats.generated_constraints,
        "sol_constraints": stats.solved_constraints,
        "wall_s": stats.wall_seconds,
        "cpu_s": stats.cpu_seconds,
        "outcome": stats.outcome,
        "pop_trace": [[layer, influence] for layer, influence in result.pop_trace],
    }
