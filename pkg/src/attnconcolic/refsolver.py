"""A numerical stand-in for an SMT solver, speaking SMT-LIB2 on stdin/stdout.

Run as ``python -m attnconcolic.refsolver``.  It reads a script (declare-const
/ assert / check-sat / get-model) to EOF, extracts a search box from simple
variable-vs-constant bound assertions, and scans staged uniform grids plus
seeded random samples for a point satisfying every assertion under float
evaluation.

Answers are honest about their strength: ``sat`` comes with a model that is a
verified witness, ``unsat`` is emitted only when the bound assertions already
make the box empty, and everything else is ``unknown``.  This keeps a fully
working out-of-the-box pipeline on machines without z3/cvc5 installed; point
a real solver at the engine for completeness.
"""

from __future__ import annotations

import hashlib
import sys
from fractions import Fraction

import numpy as np

GRID_STAGES_1D = (256, 1024, 4096)
GRID_STAGES_2D = (256, 1024)
RANDOM_SAMPLES = 65536
DEFAULT_BOX = (-1e9, 1e9)


class ScriptError(ValueError):
    pass


def _tokenize(text: str) -> list[str]:
    out: list[str] = []
    for raw_line in text.splitlines():
        line = raw_line.split(";", 1)[0]
        out.extend(line.replace("(", " ( ").replace(")", " ) ").split())
    return out


def _parse(tokens: list[str]) -> list:
    forms: list = []
    stack: list[list] = []
    for token in tokens:
        if token == "(":
            stack.append([])
        elif token == ")":
            if not stack:
                raise ScriptError("unbalanced parentheses")
            done = stack.pop()
            (stack[-1] if stack else forms).append(done)
        else:
            (stack[-1] if stack else forms).append(token)
    if stack:
        raise ScriptError("unbalanced parentheses")
    return forms


def _atom_value(token: str):
    try:
        return float(token)
    except ValueError:
        return None


def compile_expr(node, declared: set[str]):
    """Compile a term to a closure over an environment of per-variable values
    (floats or aligned numpy arrays)."""
    if isinstance(node, str):
        value = _atom_value(node)
        if value is not None:
            return lambda env, v=value: v
        if node in declared:
            return lambda env, n=node: env[n]
        raise ScriptError(f"unknown symbol {node!r}")
    if not node:
        raise ScriptError("empty term")
    head, *args = node
    sub = [compile_expr(arg, declared) for arg in args]
    if head == "+":
        return lambda env: sum(f(env) for f in sub)
    if head == "*":
        def product(env):
            out = sub[0](env)
            for f in sub[1:]:
                out = out * f(env)
            return out
        return product
    if head == "-":
        if len(sub) == 1:
            return lambda env: -sub[0](env)
        return lambda env: sub[0](env) - sub[1](env)
    if head == "/":
        def quotient(env):
            with np.errstate(all="ignore"):
                return sub[0](env) / sub[1](env)
        return quotient
    if head in ("<", "<=", ">", ">=", "="):
        ops = {"<": np.less, "<=": np.less_equal, ">": np.greater,
               ">=": np.greater_equal, "=": np.equal}
        return lambda env, op=ops[head]: op(sub[0](env), sub[1](env))
    if head == "not":
        return lambda env: np.logical_not(sub[0](env))
    if head == "and":
        def conj(env):
            out = sub[0](env)
            for f in sub[1:]:
                out = np.logical_and(out, f(env))
            return out
        return conj
    if head == "or":
        def disj(env):
            out = sub[0](env)
            for f in sub[1:]:
                out = np.logical_or(out, f(env))
            return out
        return disj
    raise ScriptError(f"unsupported operator {head!r}")


def _bound_from_assert(form, declared: set[str]):
    """Recognize (rel var const) / (rel const var); returns (var, lo?, hi?)."""
    if not (isinstance(form, list) and len(form) == 3):
        return None
    rel, a, b = form
    if rel not in ("<", "<=", ">", ">="):
        return None
    if isinstance(a, str) and a in declared:
        value = _atom_value(b) if isinstance(b, str) else None
        if value is None:
            return None
        return (a, value, None) if rel in (">", ">=") else (a, None, value)
    if isinstance(b, str) and b in declared:
        value = _atom_value(a) if isinstance(a, str) else None
        if value is None:
            return None
        return (b, None, value) if rel in (">", ">=") else (b, value, None)
    return None


def _grid_axis(lo: float, hi: float, resolution: int) -> np.ndarray:
    steps = np.arange(resolution + 1, dtype=float) / resolution
    return lo + (hi - lo) * steps


def _search(variables: list[str], boxes: dict[str, tuple[float, float]],
            constraints, seed: int):
    """Staged grid scan then random sampling; returns a witness dict or None."""

    def satisfied_at(env) -> np.ndarray:
        size = None
        for value in env.values():
            if isinstance(value, np.ndarray):
                size = value.size
        ok = np.ones(size if size is not None else 1, dtype=bool)
        with np.errstate(all="ignore"):
            for fn in constraints:
                result = np.asarray(fn(env), dtype=bool).reshape(-1)
                ok = ok & (result if result.size > 1 else result[0])
                if not ok.any():
                    break
        return ok

    if len(variables) == 1:
        stages: tuple[int, ...] = GRID_STAGES_1D
    elif len(variables) == 2:
        stages = GRID_STAGES_2D
    else:
        stages = (16,)  # dense meshes blow up past two variables
    for resolution in stages:
        axes = [_grid_axis(*boxes[name], resolution) for name in variables]
        grids = np.meshgrid(*axes, indexing="ij")
        env = {name: grid.reshape(-1) for name, grid in zip(variables, grids)}
        ok = satisfied_at(env)
        if ok.any():
            hit = int(np.argmax(ok))
            return {name: float(env[name][hit]) for name in variables}
    rng = np.random.default_rng(seed)
    lows = np.array([boxes[name][0] for name in variables])
    highs = np.array([boxes[name][1] for name in variables])
    samples = rng.uniform(lows, highs, size=(RANDOM_SAMPLES, len(variables)))
    env = {name: samples[:, i] for i, name in enumerate(variables)}
    ok = satisfied_at(env)
    if ok.any():
        hit = int(np.argmax(ok))
        return {name: float(env[name][hit]) for name in variables}
    return None


def _render_value(value: float) -> str:
    fraction = Fraction(value)
    if abs(fraction.numerator) < 2**62 and fraction.denominator < 2**62:
        if fraction.denominator == 1:
            text = f"{fraction.numerator}.0" if fraction.numerator >= 0 \
                else f"(- {-fraction.numerator}.0)"
            return text
        if fraction.numerator < 0:
            return f"(- (/ {-fraction.numerator} {fraction.denominator}))"
        return f"(/ {fraction.numerator} {fraction.denominator})"
    return repr(value)


def solve_script(text: str) -> tuple[str, dict[str, float] | None, list[str]]:
    """Returns (status, witness, declared variable order)."""
    forms = _parse(_tokenize(text))
    declared: list[str] = []
    declared_set: set[str] = set()
    asserts: list = []
    check_requested = False
    for form in forms:
        if not isinstance(form, list) or not form:
            continue
        head = form[0]
        if head in ("set-logic", "set-option", "set-info", "get-model", "exit"):
            continue
        if head == "declare-const" and len(form) >= 2:
            declared.append(form[1])
            declared_set.add(form[1])
        elif head == "declare-fun" and len(form) >= 2:
            declared.append(form[1])
            declared_set.add(form[1])
        elif head == "assert" and len(form) == 2:
            asserts.append(form[1])
        elif head == "check-sat":
            check_requested = True
        else:
            raise ScriptError(f"unsupported command {head!r}")
    if not check_requested:
        return ("unknown", None, declared)

    boxes = {name: list(DEFAULT_BOX) for name in declared}
    for form in asserts:
        bound = _bound_from_assert(form, declared_set)
        if bound is not None:
            name, lo, hi = bound
            if lo is not None:
                boxes[name][0] = max(boxes[name][0], lo)
            if hi is not None:
                boxes[name][1] = min(boxes[name][1], hi)
    for name in declared:
        if boxes[name][0] > boxes[name][1]:
            return ("unsat", None, declared)

    constraints = [compile_expr(form, declared_set) for form in asserts]
    if not declared:
        env: dict[str, float] = {}
        with np.errstate(all="ignore"):
            ok = all(bool(np.all(fn(env))) for fn in constraints)
        return ("sat", {}, declared) if ok else ("unknown", None, declared)

    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")
    witness = _search(declared, {n: tuple(b) for n, b in boxes.items()},
                      constraints, seed)
    if witness is None:
        return ("unknown", None, declared)
    return ("sat", witness, declared)


def main() -> int:
    text = sys.stdin.read()
    try:
        status, witness, declared = solve_script(text)
    except ScriptError as exc:
        print(f"(error \"{exc}\")", file=sys.stderr)
        return 2
    print(status)
    if status == "sat" and witness is not None:
        print("(")
        for name in declared:
            print(f"  (define-fun {name} () Real {_render_value(witness[name])})")
        print(")")
    return 0


if __name__ == "__main__":
    sys.exit(main())
