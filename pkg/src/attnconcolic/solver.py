"""Constraint lowering to SMT-LIB2, solver subprocess management, model
parsing, and a brute-force grid oracle.

The engine never links a solver library: the external backend writes an
SMT-LIB2 script over quantifier-free nonlinear reals to a configurable child
process and parses sat/unsat/unknown plus a model from its standard output.
The grid oracle is an in-process fallback used for testing and small-instance
verification; its "no point found" answer is reported as unknown, never as a
proof of unsatisfiability.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .symexpr import Comparison, Rel, SymExpr, evaluate

__all__ = [
    "ExternalSolver",
    "GridOracle",
    "SolverError",
    "SolverRequest",
    "SolverVerdict",
    "assignment_satisfies",
    "check",
    "emit_smtlib",
    "grid_oracle",
    "parse_model_value",
]

SAT = "sat"
UNSAT = "unsat"
UNKNOWN = "unknown"
TIMEOUT = "timeout"
SOLVER_ERROR = "solver_error"


class SolverError(RuntimeError):
    """Misconfigured solver command or unusable solver output."""


@dataclass(frozen=True)
class SolverRequest:
    """Bounded variables plus a conjunction of normalized comparisons."""

    variables: tuple[tuple[str, float, float], ...]
    assertion: tuple[Comparison, ...]
    timeout_s: Optional[float] = None

    def __post_init__(self) -> None:
        declared = {name for name, _, _ in self.variables}
        free = _free_variables(cmp.lhs for cmp in self.assertion)
        free |= _free_variables(cmp.rhs for cmp in self.assertion)
        missing = free - declared
        if missing:
            raise SolverError(f"assertion uses undeclared variables: {sorted(missing)}")


@dataclass(frozen=True)
class SolverVerdict:
    status: str
    assignment: Optional[dict[str, float]] = None
    transcript: str = ""


def _free_variables(exprs) -> set[str]:
    names: set[str] = set()
    stack = list(exprs)
    while stack:
        node = stack.pop()
        if node.kind == "var":
            names.add(node.name)
        stack.extend(node.args)
    return names


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _render_decimal(value: float) -> str:
    """Shortest round-trip decimal with a trailing .0 for integers; negatives
    wrapped as (- x) per SMT-LIB syntax."""
    if value != value or value in (float("inf"), float("-inf")):
        raise SolverError(f"cannot emit non-finite constant {value!r}")
    if value < 0:
        return f"(- {_render_decimal(-value)})"
    text = repr(value)
    if "e" in text or "E" in text:
        text = format(Decimal(text), "f")
    if "." not in text:
        text += ".0"
    return text


def _reciprocal_exact(value: float) -> Optional[float]:
    """The float 1/value when it is exactly the real reciprocal, else None."""
    if value == 0.0:
        return None
    recip = 1.0 / value
    if Fraction(recip) == 1 / Fraction(value):
        return recip
    return None


def _render_expr(expr: SymExpr) -> str:
    memo: dict[int, str] = {}
    stack: list[tuple[SymExpr, bool]] = [(expr, False)]
    while stack:
        node, ready = stack.pop()
        if node.serial in memo:
            continue
        if node.kind == "const":
            memo[node.serial] = _render_decimal(node.value)
        elif node.kind == "var":
            memo[node.serial] = node.name
        elif not ready:
            stack.append((node, True))
            for child in node.args:
                stack.append((child, False))
        elif node.kind == "neg":
            memo[node.serial] = f"(- {memo[node.args[0].serial]})"
        else:
            a, b = node.args
            if node.op == "/" and b.is_const:
                recip = _reciprocal_exact(b.value)
                if recip is not None:
                    memo[node.serial] = f"(* {memo[a.serial]} {_render_decimal(recip)})"
                    continue
            memo[node.serial] = f"({node.op} {memo[a.serial]} {memo[b.serial]})"
    return memo[expr.serial]


def _render_comparison(cmp: Comparison) -> str:
    lhs, rhs = _render_expr(cmp.lhs), _render_expr(cmp.rhs)
    if cmp.rel is Rel.NE:
        return f"(not (= {lhs} {rhs}))"
    return f"({cmp.rel.value} {lhs} {rhs})"


def emit_smtlib(request: SolverRequest) -> str:
    """Deterministic SMT-LIB2 text over quantifier-free nonlinear reals."""
    lines = ["(set-logic QF_NRA)"]
    for name, lo, hi in request.variables:
        lines.append(f"(declare-const {name} Real)")
        lines.append(f"(assert (>= {name} {_render_decimal(lo)}))")
        lines.append(f"(assert (<= {name} {_render_decimal(hi)}))")
    for cmp in request.assertion:
        lines.append(f"(assert {_render_comparison(cmp)})")
    lines.append("(check-sat)")
    lines.append("(get-model)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Model parsing
# ---------------------------------------------------------------------------


def _tokenize(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def _parse_sexprs(tokens: list[str]):
    forms = []
    stack: list[list] = []
    for token in tokens:
        if token == "(":
            stack.append([])
        elif token == ")":
            if not stack:
                raise SolverError("unbalanced solver output")
            done = stack.pop()
            if stack:
                stack[-1].append(done)
            else:
                forms.append(done)
        elif stack:
            stack[-1].append(token)
        else:
            forms.append(token)
    if stack:
        raise SolverError("unbalanced solver output")
    return forms


def parse_model_value(form) -> float:
    """Parse one model value: plain decimals, rationals (/ a b), and negation
    (- x), nested arbitrarily; rationals are evaluated exactly."""

    def as_fraction(node) -> Fraction:
        if isinstance(node, str):
            try:
                return Fraction(node)
            except ValueError as exc:
                raise SolverError(f"unparseable model value {node!r}") from exc
        if not node:
            raise SolverError("empty model value")
        head, *args = node
        if head == "-" and len(args) == 1:
            return -as_fraction(args[0])
        if head == "/" and len(args) == 2:
            denom = as_fraction(args[1])
            if denom == 0:
                raise SolverError("division by zero in model value")
            return as_fraction(args[0]) / denom
        raise SolverError(f"unparseable model value {node!r}")

    return float(as_fraction(form))


def _extract_assignment(forms, variables: Sequence[str]) -> dict[str, float]:
    wanted = set(variables)
    assignment: dict[str, float] = {}

    def walk(node) -> None:
        if not isinstance(node, list):
            return
        if len(node) >= 2 and node[0] == "define-fun" and isinstance(node[1], str):
            name = node[1]
            if name in wanted:
                assignment[name] = parse_model_value(node[-1])
            return
        for child in node:
            walk(child)

    for form in forms:
        walk(form)
    missing = wanted - assignment.keys()
    if missing:
        raise SolverError(f"model omits variables: {sorted(missing)}")
    return assignment


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExternalSolver:
    """An SMT-LIB2 solver run as a child process per check call.

    ``command`` is the executable plus arguments (string or argv list); the
    script goes to the child's stdin, the answer comes from stdout.
    """

    command: Union[str, Sequence[str]]
    default_timeout_s: float = 60.0

    def argv(self) -> list[str]:
        if isinstance(self.command, str):
            return shlex.split(self.command)
        return list(self.command)

    def check(self, request: SolverRequest) -> SolverVerdict:
        script = emit_smtlib(request)
        timeout = request.timeout_s if request.timeout_s is not None else self.default_timeout_s
        try:
            proc = subprocess.run(
                self.argv(), input=script, capture_output=True, text=True,
                timeout=timeout)
        except subprocess.TimeoutExpired:
            return SolverVerdict(TIMEOUT)
        except OSError as exc:
            raise SolverError(f"cannot run solver command {self.argv()!r}: {exc}") from exc
        transcript = proc.stdout + (("\n" + proc.stderr) if proc.stderr else "")
        if proc.returncode != 0:
            return SolverVerdict(SOLVER_ERROR, transcript=transcript)
        answer = None
        for line in proc.stdout.splitlines():
            line = line.strip()
            if line in (SAT, UNSAT, UNKNOWN):
                answer = line
                break
        if answer == UNSAT:
            return SolverVerdict(UNSAT, transcript=transcript)
        if answer == UNKNOWN:
            return SolverVerdict(UNKNOWN, transcript=transcript)
        if answer == SAT:
            rest = proc.stdout.split(SAT, 1)[1]
            try:
                forms = _parse_sexprs(_tokenize(rest))
                names = [name for name, _, _ in request.variables]
                assignment = _extract_assignment(forms, names)
            except SolverError:
                return SolverVerdict(SOLVER_ERROR, transcript=transcript)
            return SolverVerdict(SAT, assignment=assignment, transcript=transcript)
        return SolverVerdict(SOLVER_ERROR, transcript=transcript)


def grid_oracle(request: SolverRequest, resolution: int = 1024) -> SolverVerdict:
    """Evaluate the assertion on a uniform grid over the variable bounds.

    Returns sat with the first satisfying grid point (lexicographic scan), or
    unknown when no grid point satisfies: absence at a finite resolution is
    not an unsatisfiability proof.
    """
    if len(request.variables) > 2:
        raise SolverError("grid oracle supports at most 2 variables")
    if not request.variables:
        return SolverVerdict(SAT, assignment={})
    axes = []
    for _, lo, hi in request.variables:
        steps = np.arange(resolution + 1, dtype=float) / resolution
        axes.append(lo + (hi - lo) * steps)
    grids = np.meshgrid(*axes, indexing="ij")
    assignment_arrays = {name: grid.reshape(-1)
                         for (name, _, _), grid in zip(request.variables, grids)}
    ok = np.ones(grids[0].size, dtype=bool)
    memo: dict[int, object] = {}  # conjuncts share most of their DAGs
    with np.errstate(all="ignore"):
        for cmp in request.assertion:
            lhs = evaluate(cmp.lhs, assignment_arrays, memo)
            rhs = evaluate(cmp.rhs, assignment_arrays, memo)
            if cmp.rel is Rel.LT:
                ok &= lhs < rhs
            elif cmp.rel is Rel.LE:
                ok &= lhs <= rhs
            elif cmp.rel is Rel.GT:
                ok &= lhs > rhs
            elif cmp.rel is Rel.GE:
                ok &= lhs >= rhs
            elif cmp.rel is Rel.EQ:
                ok &= lhs == rhs
            else:
                ok &= lhs != rhs
            if not ok.any():
                return SolverVerdict(UNKNOWN)
    hit = int(np.argmax(ok))
    assignment = {name: float(vals[hit]) for name, vals in assignment_arrays.items()}
    return SolverVerdict(SAT, assignment=assignment)


@dataclass(frozen=True)
class GridOracle:
    """Backend wrapper so the grid oracle can stand in for a solver."""

    resolution: int = 1024

    def check(self, request: SolverRequest) -> SolverVerdict:
        return grid_oracle(request, self.resolution)


Backend = Union[ExternalSolver, GridOracle]


def check(backend: Backend, request: SolverRequest) -> SolverVerdict:
    """Dispatch a request to the configured backend."""
    return backend.check(request)


# ---------------------------------------------------------------------------
# Verification of returned assignments
# ---------------------------------------------------------------------------


def assignment_satisfies(request: SolverRequest, assignment: dict[str, float],
                         slack: float = 1e-9) -> bool:
    """Direct evaluation of the original assertion at the assignment: strict
    relations exactly, non-strict within ``slack``."""
    for name, lo, hi in request.variables:
        value = assignment.get(name)
        if value is None or not (lo - slack <= value <= hi + slack):
            return False
    memo: dict[int, object] = {}
    for cmp in request.assertion:
        lhs = evaluate(cmp.lhs, assignment, memo)
        rhs = evaluate(cmp.rhs, assignment, memo)
        if cmp.rel is Rel.LT:
            ok = lhs < rhs
        elif cmp.rel is Rel.GT:
            ok = lhs > rhs
        elif cmp.rel is Rel.NE:
            ok = lhs != rhs
        elif cmp.rel is Rel.LE:
            ok = lhs <= rhs + slack
        elif cmp.rel is Rel.GE:
            ok = lhs >= rhs - slack
        else:
            ok = abs(lhs - rhs) <= slack
        if not ok:
            return False
    return True
