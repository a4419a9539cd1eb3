"""Symbolic expression DAG, concolic scalars, and branch-event recording.

Every value flowing through an instrumented model is a :class:`ConcolicScalar`:
a concrete float paired with an optional symbolic expression over declared
input variables.  Expressions are immutable, constant-folded at construction,
and hash-consed so that structurally identical subterms are shared (large path
constraints would otherwise blow up in memory).
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Mapping, NamedTuple, Optional, Sequence, Union

Number = Union[int, float]

__all__ = [
    "AssociationScopeError",
    "BranchEvent",
    "Comparison",
    "ConcolicArithmeticError",
    "ConcolicScalar",
    "DeclarationError",
    "ExecutionContext",
    "NeuronId",
    "Rel",
    "SymExpr",
    "arith",
    "as_scalar",
    "compare",
    "concretize",
    "const",
    "count_unique_nodes",
    "evaluate",
    "neg",
    "to_infix",
    "var",
]


class DeclarationError(ValueError):
    """An input variable name was declared twice in one execution context."""


class ConcolicArithmeticError(ArithmeticError):
    """Invalid arithmetic (division by a concrete zero), with the offending term."""

    def __init__(self, message: str, expression: Optional["SymExpr"] = None) -> None:
        super().__init__(message)
        self.expression = expression


class AssociationScopeError(RuntimeError):
    """A symbolic comparison ran without an active association scope."""


# ---------------------------------------------------------------------------
# Expression DAG
# ---------------------------------------------------------------------------

_BINOPS = ("+", "-", "*", "/")


class SymExpr:
    """One interned node of the expression DAG.

    ``kind`` is one of ``"const"``, ``"var"``, ``"bin"``, ``"neg"``.  Nodes are
    created only through :func:`const`, :func:`var`, the binary builders, and
    :func:`neg`; direct construction bypasses interning and folding.
    """

    __slots__ = ("kind", "op", "value", "name", "args", "serial")

    kind: str
    op: Optional[str]
    value: Optional[float]
    name: Optional[str]
    args: tuple["SymExpr", ...]
    serial: int

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"SymExpr({to_infix(self)})"

    @property
    def is_const(self) -> bool:
        return self.kind == "const"

    def node_count(self) -> int:
        """Number of unique nodes reachable from this expression."""
        return count_unique_nodes([self])


_intern_table: dict[tuple, SymExpr] = {}
_serial_counter = itertools.count()


def _make(key: tuple, kind: str, op: Optional[str], value: Optional[float],
          name: Optional[str], args: tuple[SymExpr, ...]) -> SymExpr:
    node = _intern_table.get(key)
    if node is not None:
        return node
    node = SymExpr.__new__(SymExpr)
    node.kind = kind
    node.op = op
    node.value = value
    node.name = name
    node.args = args
    node.serial = next(_serial_counter)
    _intern_table[key] = node
    return node


def clear_intern_table() -> None:
    """Drop all interned expressions (useful to bound memory between runs)."""
    _intern_table.clear()


def const(value: Number) -> SymExpr:
    v = float(value)
    if v == 0.0:
        v = 0.0  # collapse -0.0 so folded zeros compare equal
    return _make(("c", v), "const", None, v, None, ())


def var(name: str) -> SymExpr:
    return _make(("v", name), "var", None, None, name, ())


def _fold_bin(op: str, a: float, b: float, rhs: SymExpr) -> SymExpr:
    if op == "+":
        return const(a + b)
    if op == "-":
        return const(a - b)
    if op == "*":
        return const(a * b)
    if b == 0.0:
        raise ConcolicArithmeticError("division by zero constant", rhs)
    return const(a / b)


def _bin(op: str, a: SymExpr, b: SymExpr) -> SymExpr:
    if a.is_const and b.is_const:
        return _fold_bin(op, a.value, b.value, b)
    if op == "+":
        if a.is_const and a.value == 0.0:
            return b
        if b.is_const and b.value == 0.0:
            return a
    elif op == "-":
        if b.is_const and b.value == 0.0:
            return a
    elif op == "*":
        if (a.is_const and a.value == 0.0) or (b.is_const and b.value == 0.0):
            return const(0.0)
        if a.is_const and a.value == 1.0:
            return b
        if b.is_const and b.value == 1.0:
            return a
    elif op == "/":
        if b.is_const and b.value == 0.0:
            raise ConcolicArithmeticError("division by zero constant", a)
        if b.is_const and b.value == 1.0:
            return a
    return _make((op, a.serial, b.serial), "bin", op, None, None, (a, b))


def add(a: SymExpr, b: SymExpr) -> SymExpr:
    return _bin("+", a, b)


def sub(a: SymExpr, b: SymExpr) -> SymExpr:
    return _bin("-", a, b)


def mul(a: SymExpr, b: SymExpr) -> SymExpr:
    return _bin("*", a, b)


def div(a: SymExpr, b: SymExpr) -> SymExpr:
    return _bin("/", a, b)


def neg(a: SymExpr) -> SymExpr:
    if a.is_const:
        return const(-a.value)
    if a.kind == "neg":
        return a.args[0]
    return _make(("~", a.serial), "neg", None, None, None, (a,))


def evaluate(expr: SymExpr, assignment: Mapping[str, object],
             memo: Optional[dict[int, object]] = None):
    """Evaluate the DAG at an assignment of input variables.

    Values may be floats or numpy arrays; each shared node is computed once.
    Passing the same ``memo`` across calls shares work between expressions
    with common subterms (path-prefix conjunctions overlap almost entirely).
    Division by a (scalar) zero raises :class:`ConcolicArithmeticError`.
    """
    if memo is None:
        memo = {}
    stack: list[tuple[SymExpr, bool]] = [(expr, False)]
    while stack:
        node, ready = stack.pop()
        if node.serial in memo:
            continue
        if node.kind == "const":
            memo[node.serial] = node.value
        elif node.kind == "var":
            try:
                memo[node.serial] = assignment[node.name]
            except KeyError:
                raise KeyError(f"no value for input variable {node.name!r}") from None
        elif not ready:
            stack.append((node, True))
            for child in node.args:
                stack.append((child, False))
        elif node.kind == "neg":
            memo[node.serial] = -memo[node.args[0].serial]
        else:
            a = memo[node.args[0].serial]
            b = memo[node.args[1].serial]
            op = node.op
            if op == "+":
                memo[node.serial] = a + b
            elif op == "-":
                memo[node.serial] = a - b
            elif op == "*":
                memo[node.serial] = a * b
            else:
                if isinstance(b, float) and b == 0.0:
                    raise ConcolicArithmeticError("division by zero at evaluation", node)
                memo[node.serial] = a / b
    return memo[expr.serial]


def count_unique_nodes(roots: Iterable[SymExpr]) -> int:
    """Unique node count of the union DAG spanned by ``roots``."""
    seen: set[int] = set()
    stack = list(roots)
    while stack:
        node = stack.pop()
        if node.serial in seen:
            continue
        seen.add(node.serial)
        stack.extend(node.args)
    return len(seen)


def to_infix(expr: SymExpr) -> str:
    """Parenthesized infix text: variables by name, constants in shortest
    round-trip decimal.  Intended for logs and golden tests."""
    memo: dict[int, str] = {}
    stack: list[tuple[SymExpr, bool]] = [(expr, False)]
    while stack:
        node, ready = stack.pop()
        if node.serial in memo:
            continue
        if node.kind == "const":
            memo[node.serial] = repr(node.value)
        elif node.kind == "var":
            memo[node.serial] = node.name
        elif not ready:
            stack.append((node, True))
            for child in node.args:
                stack.append((child, False))
        elif node.kind == "neg":
            memo[node.serial] = f"(-{memo[node.args[0].serial]})"
        else:
            a = memo[node.args[0].serial]
            b = memo[node.args[1].serial]
            memo[node.serial] = f"({a} {node.op} {b})"
    return memo[expr.serial]


# ---------------------------------------------------------------------------
# Concolic scalars
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConcolicScalar:
    """A concrete float with an optional symbolic expression.

    An absent symbolic part means the value is a plain real; it behaves
    identically to a float under all operations.
    """

    concrete: float
    sym: Optional[SymExpr] = None

    @property
    def is_symbolic(self) -> bool:
        return self.sym is not None

    def expr(self) -> SymExpr:
        """The symbolic part, substituting the concrete value when absent."""
        return self.sym if self.sym is not None else const(self.concrete)

    def __add__(self, other):
        return arith("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return arith("sub", self, other)

    def __rsub__(self, other):
        return arith("sub", as_scalar(other), self)

    def __mul__(self, other):
        return arith("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return arith("div", self, other)

    def __rtruediv__(self, other):
        return arith("div", as_scalar(other), self)

    def __neg__(self):
        return arith("neg", self)


def as_scalar(x: Union[ConcolicScalar, Number]) -> ConcolicScalar:
    if isinstance(x, ConcolicScalar):
        return x
    return ConcolicScalar(float(x))


_CONCRETE_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}

_SYMBOLIC_OPS = {"add": add, "sub": sub, "mul": mul, "div": div}


def arith(op: str, a: Union[ConcolicScalar, Number],
          b: Union[ConcolicScalar, Number, None] = None) -> ConcolicScalar:
    """Concolic arithmetic: real arithmetic on the concrete parts, a folded
    expression node on the symbolic parts.  Results of two plain scalars stay
    plain."""
    a = as_scalar(a)
    if op == "neg":
        sym = neg(a.sym) if a.sym is not None else None
        return ConcolicScalar(-a.concrete, sym)
    b = as_scalar(b)
    if op == "div" and b.concrete == 0.0:
        raise ConcolicArithmeticError(
            "division by concrete zero", b.sym if b.sym is not None else const(0.0))
    value = _CONCRETE_OPS[op](a.concrete, b.concrete)
    if a.sym is None and b.sym is None:
        return ConcolicScalar(value)
    sym = _SYMBOLIC_OPS[op](a.expr(), b.expr())
    return ConcolicScalar(value, sym)


def concretize(a: Union[ConcolicScalar, Number]) -> ConcolicScalar:
    """Drop the symbolic part: conc(<c, phi>) = <c, absent>."""
    a = as_scalar(a)
    return ConcolicScalar(a.concrete) if a.sym is not None else a


# ---------------------------------------------------------------------------
# Comparisons and branch events
# ---------------------------------------------------------------------------


class Rel(Enum):
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="
    EQ = "="
    NE = "!="


_NEGATION = {
    Rel.LT: Rel.GE,
    Rel.GE: Rel.LT,
    Rel.LE: Rel.GT,
    Rel.GT: Rel.LE,
    Rel.EQ: Rel.NE,
    Rel.NE: Rel.EQ,
}

_REL_APPLY = {
    Rel.LT: lambda a, b: a < b,
    Rel.LE: lambda a, b: a <= b,
    Rel.GT: lambda a, b: a > b,
    Rel.GE: lambda a, b: a >= b,
    Rel.EQ: lambda a, b: a == b,
    Rel.NE: lambda a, b: a != b,
}


class NeuronId(NamedTuple):
    """A neuron addressed by depth and multi-index.

    Depth 0 is the model input grid; depth ``i + 1`` is the output grid of the
    i-th layer.  ``index`` is the multi-index within that grid's shape.
    """

    layer: int
    index: tuple[int, ...]

    def key(self) -> str:
        return ".".join([str(self.layer), *map(str, self.index)])

    @classmethod
    def from_key(cls, key: str) -> "NeuronId":
        parts = key.split(".")
        return cls(int(parts[0]), tuple(int(p) for p in parts[1:]))


@dataclass(frozen=True)
class Comparison:
    """A relational guard over symbolic expressions."""

    rel: Rel
    lhs: SymExpr
    rhs: SymExpr

    def negate(self) -> "Comparison":
        return Comparison(_NEGATION[self.rel], self.lhs, self.rhs)

    def holds_at(self, assignment: Mapping[str, object]) -> bool:
        return bool(_REL_APPLY[self.rel](evaluate(self.lhs, assignment),
                                         evaluate(self.rhs, assignment)))

    def key(self) -> tuple:
        # structural identity is node identity thanks to hash-consing
        return (self.rel.value, self.lhs.serial, self.rhs.serial)

    def to_infix(self) -> str:
        return f"{to_infix(self.lhs)} {self.rel.value} {to_infix(self.rhs)}"


@dataclass(frozen=True)
class BranchEvent:
    """One guarded comparison observed on the concrete path.

    ``bypassed_predicate`` is the condition of the branch that was *not*
    entered: the negated guard when the guard held, the guard itself when it
    did not.
    """

    guard: Comparison
    taken: bool
    bypassed_predicate: Comparison
    assoc_neurons: tuple[NeuronId, ...]
    layer_index: int
    path_prefix_id: int

    def taken_literal(self) -> Comparison:
        """The literal that held on the concrete path."""
        return self.guard if self.taken else self.guard.negate()


# ---------------------------------------------------------------------------
# Execution context
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Scope:
    neurons: tuple[NeuronId, ...]
    layer_index: int


class ExecutionContext:
    """Per-execution state: declared inputs, the branch-event log, and the
    current association scope.  Single-writer; one concolic execution owns
    one context."""

    def __init__(self, audit: bool = False) -> None:
        self.variables: dict[str, float] = {}
        self.events: list[BranchEvent] = []
        self.audit = audit
        self._scope: Optional[_Scope] = None

    def symvar(self, name: str, c0: Number) -> ConcolicScalar:
        """Declare an input variable with concrete seed ``c0``."""
        if name in self.variables:
            raise DeclarationError(f"input variable {name!r} already declared")
        self.variables[name] = float(c0)
        return ConcolicScalar(float(c0), var(name))

    @contextmanager
    def association(self, neurons: Sequence[NeuronId], layer_index: int) -> Iterator[None]:
        """Set the associated output neurons for the guarded region."""
        if not neurons:
            raise AssociationScopeError("association scope must be non-empty")
        previous = self._scope
        self._scope = _Scope(tuple(neurons), layer_index)
        try:
            yield
        finally:
            self._scope = previous

    def compare(self, rel: Rel, a: Union[ConcolicScalar, Number],
                b: Union[ConcolicScalar, Number]) -> bool:
        """Evaluate a guard concretely; log a branch event when symbolic."""
        a = as_scalar(a)
        b = as_scalar(b)
        truth = bool(_REL_APPLY[rel](a.concrete, b.concrete))
        if a.sym is None and b.sym is None:
            return truth
        if self._scope is None:
            raise AssociationScopeError(
                "symbolic comparison outside an association scope")
        guard = Comparison(rel, a.expr(), b.expr())
        bypassed = guard.negate() if truth else guard
        self.events.append(BranchEvent(
            guard=guard,
            taken=truth,
            bypassed_predicate=bypassed,
            assoc_neurons=self._scope.neurons,
            layer_index=self._scope.layer_index,
            path_prefix_id=len(self.events),
        ))
        return truth

    def audit_scalar(self, s: ConcolicScalar, rel_tol: float = 1e-9) -> None:
        """Debug hook: the symbolic part evaluated at the declared seeds must
        reproduce the concrete part within relative tolerance."""
        if s.sym is None:
            return
        symbolic_value = evaluate(s.sym, self.variables)
        if not math.isclose(symbolic_value, s.concrete, rel_tol=rel_tol, abs_tol=1e-12):
            raise AssertionError(
                f"concolic coherence violated: concrete={s.concrete!r} "
                f"symbolic={symbolic_value!r} for {to_infix(s.sym)}")


def compare(rel: Rel, a: Union[ConcolicScalar, Number],
            b: Union[ConcolicScalar, Number], ctx: ExecutionContext) -> bool:
    """Free-function form of :meth:`ExecutionContext.compare`."""
    return ctx.compare(rel, a, b)
