"""Scalar expression graphs with exact reverse-mode first derivatives.

An :class:`ExprGraph` is an append-only tape of scalar operations. Nodes are
created through :class:`Expr` handles (operator overloading plus the module
functions ``sin``, ``cos``, ``tan``, ``atan``, ``exp``, ``plus``, ``wsq``),
hash-consed so that structurally identical subexpressions share one node.
Evaluation and differentiation run as two numba-compiled sweeps over flat
arrays, which keeps graphs with tens of thousands of nodes inside a
real-time control budget.

Derivatives are exact reverse-mode accumulations. At the kink of
``plus(x) = max(0, x)`` the subgradient 0 is used, so the gradient of the
clamped-product obstacle terms vanishes outside the obstacle.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba present in all supported envs
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco


class GraphConfigError(ValueError):
    """Unbound variable, bad operand, or malformed graph usage."""


class NumericError(ArithmeticError):
    """A non-finite value appeared while evaluating a graph."""


# Operator codes. STEP is internal: it only appears in derivative graphs
# produced by grad_exprs (derivative of PLUS), and differentiates to 0.
OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_POW = 6
OP_SIN = 7
OP_COS = 8
OP_TAN = 9
OP_ATAN = 10
OP_EXP = 11
OP_NEG = 12
OP_PLUS = 13
OP_WSQ = 14
OP_STEP = 15

_COMMUTATIVE = (OP_ADD, OP_MUL)

Scalar = Union[int, float]
ExprLike = Union["Expr", Scalar]


@njit(cache=True, error_model="numpy")
def _forward(ops, a, b, payload, x, val):
    n = ops.shape[0]
    for i in range(n):
        op = ops[i]
        if op == OP_CONST:
            val[i] = payload[i]
        elif op == OP_VAR:
            val[i] = x[a[i]]
        elif op == OP_ADD:
            val[i] = val[a[i]] + val[b[i]]
        elif op == OP_SUB:
            val[i] = val[a[i]] - val[b[i]]
        elif op == OP_MUL:
            val[i] = val[a[i]] * val[b[i]]
        elif op == OP_DIV:
            val[i] = val[a[i]] / val[b[i]]
        elif op == OP_POW:
            val[i] = val[a[i]] ** payload[i]
        elif op == OP_SIN:
            val[i] = np.sin(val[a[i]])
        elif op == OP_COS:
            val[i] = np.cos(val[a[i]])
        elif op == OP_TAN:
            val[i] = np.tan(val[a[i]])
        elif op == OP_ATAN:
            val[i] = np.arctan(val[a[i]])
        elif op == OP_EXP:
            val[i] = np.exp(val[a[i]])
        elif op == OP_NEG:
            val[i] = -val[a[i]]
        elif op == OP_PLUS:
            v = val[a[i]]
            val[i] = v if v > 0.0 else 0.0
        elif op == OP_WSQ:
            v = val[a[i]]
            val[i] = payload[i] * v * v
        else:  # OP_STEP
            val[i] = 1.0 if val[a[i]] > 0.0 else 0.0


@njit(cache=True, error_model="numpy")
def _reverse(ops, a, b, payload, val, adj, out):
    adj[: out + 1] = 0.0
    adj[out] = 1.0
    for i in range(out, -1, -1):
        d = adj[i]
        if d == 0.0:
            continue
        op = ops[i]
        if op == OP_ADD:
            adj[a[i]] += d
            adj[b[i]] += d
        elif op == OP_SUB:
            adj[a[i]] += d
            adj[b[i]] -= d
        elif op == OP_MUL:
            adj[a[i]] += d * val[b[i]]
            adj[b[i]] += d * val[a[i]]
        elif op == OP_DIV:
            adj[a[i]] += d / val[b[i]]
            adj[b[i]] -= d * val[i] / val[b[i]]
        elif op == OP_POW:
            adj[a[i]] += d * payload[i] * val[a[i]] ** (payload[i] - 1.0)
        elif op == OP_SIN:
            adj[a[i]] += d * np.cos(val[a[i]])
        elif op == OP_COS:
            adj[a[i]] -= d * np.sin(val[a[i]])
        elif op == OP_TAN:
            c = np.cos(val[a[i]])
            adj[a[i]] += d / (c * c)
        elif op == OP_ATAN:
            v = val[a[i]]
            adj[a[i]] += d / (1.0 + v * v)
        elif op == OP_EXP:
            adj[a[i]] += d * val[i]
        elif op == OP_NEG:
            adj[a[i]] -= d
        elif op == OP_PLUS:
            if val[a[i]] > 0.0:
                adj[a[i]] += d
        elif op == OP_WSQ:
            adj[a[i]] += d * 2.0 * payload[i] * val[a[i]]
        # OP_CONST, OP_VAR, OP_STEP: no propagation


class Expr:
    """Handle to one node of an :class:`ExprGraph`."""

    __slots__ = ("graph", "node")

    def __init__(self, graph: "ExprGraph", node: int):
        self.graph = graph
        self.node = node

    def _coerce(self, other: ExprLike) -> "Expr":
        if isinstance(other, Expr):
            if other.graph is not self.graph:
                raise GraphConfigError("operands belong to different graphs")
            return other
        return self.graph.const(float(other))

    def __add__(self, other: ExprLike) -> "Expr":
        o = self._coerce(other)
        return Expr(self.graph, self.graph._emit(OP_ADD, self.node, o.node))

    __radd__ = __add__

    def __sub__(self, other: ExprLike) -> "Expr":
        o = self._coerce(other)
        return Expr(self.graph, self.graph._emit(OP_SUB, self.node, o.node))

    def __rsub__(self, other: ExprLike) -> "Expr":
        o = self._coerce(other)
        return Expr(self.graph, self.graph._emit(OP_SUB, o.node, self.node))

    def __mul__(self, other: ExprLike) -> "Expr":
        o = self._coerce(other)
        return Expr(self.graph, self.graph._emit(OP_MUL, self.node, o.node))

    __rmul__ = __mul__

    def __truediv__(self, other: ExprLike) -> "Expr":
        o = self._coerce(other)
        return Expr(self.graph, self.graph._emit(OP_DIV, self.node, o.node))

    def __rtruediv__(self, other: ExprLike) -> "Expr":
        o = self._coerce(other)
        return Expr(self.graph, self.graph._emit(OP_DIV, o.node, self.node))

    def __pow__(self, exponent: Scalar) -> "Expr":
        return Expr(self.graph, self.graph._emit(OP_POW, self.node, payload=float(exponent)))

    def __neg__(self) -> "Expr":
        return Expr(self.graph, self.graph._emit(OP_NEG, self.node))

    def __repr__(self) -> str:
        return f"Expr(node={self.node})"


class ExprGraph:
    """Append-only scalar expression tape with named variable slots.

    Structurally identical nodes are shared (hash-consing) and constant
    subexpressions are folded, so rollouts of scripted vehicles collapse to
    constants at build time. Once built, a graph is treated as immutable;
    concurrent evaluation must go through per-thread :class:`Evaluator`
    instances since evaluation buffers are reused.
    """

    def __init__(self):
        self._ops: list[int] = []
        self._a: list[int] = []
        self._b: list[int] = []
        self._payload: list[float] = []
        self._vars: dict[str, int] = {}  # name -> slot index
        self._var_nodes: list[int] = []  # slot index -> node index
        self._cse: dict[tuple, int] = {}
        self._arrays = None

    # -- construction ---------------------------------------------------

    def var(self, name: str) -> Expr:
        """Return the variable named `name`, creating its slot on first use."""
        if name in self._vars:
            return Expr(self, self._var_nodes[self._vars[name]])
        slot = len(self._var_nodes)
        self._vars[name] = slot
        node = self._append(OP_VAR, slot, -1, 0.0)
        self._var_nodes.append(node)
        return Expr(self, node)

    def vars(self, names: Iterable[str]) -> list[Expr]:
        return [self.var(n) for n in names]

    def const(self, value: Scalar) -> Expr:
        return Expr(self, self._emit(OP_CONST, payload=float(value)))

    def _append(self, op: int, a: int, b: int, payload: float) -> int:
        self._ops.append(op)
        self._a.append(a)
        self._b.append(b)
        self._payload.append(payload)
        self._arrays = None
        return len(self._ops) - 1

    def _const_of(self, node: int) -> float | None:
        if self._ops[node] == OP_CONST:
            return self._payload[node]
        return None

    def _emit(self, op: int, a: int = -1, b: int = -1, payload: float = 0.0) -> int:
        # Constant folding keeps scripted-vehicle subgraphs from bloating the
        # tape; only rules that are exact in IEEE arithmetic are applied.
        ca = self._const_of(a) if a >= 0 else None
        cb = self._const_of(b) if b >= 0 else None
        if op != OP_CONST:
            folded = self._fold(op, a, b, payload, ca, cb)
            if folded is not None:
                return folded
        if op in _COMMUTATIVE and b < a:
            a, b = b, a
        key = (op, a, b, payload)
        hit = self._cse.get(key)
        if hit is not None:
            return hit
        node = self._append(op, a, b, payload)
        self._cse[key] = node
        return node

    def _fold(self, op, a, b, payload, ca, cb) -> int | None:
        if ca is not None and cb is not None:
            if op == OP_ADD:
                return self._emit(OP_CONST, payload=ca + cb)
            if op == OP_SUB:
                return self._emit(OP_CONST, payload=ca - cb)
            if op == OP_MUL:
                return self._emit(OP_CONST, payload=ca * cb)
            if op == OP_DIV and cb != 0.0:
                return self._emit(OP_CONST, payload=ca / cb)
        if ca is not None and b < 0:
            unary = {
                OP_POW: lambda v: v**payload,
                OP_SIN: math.sin,
                OP_COS: math.cos,
                OP_TAN: math.tan,
                OP_ATAN: math.atan,
                OP_EXP: math.exp,
                OP_NEG: lambda v: -v,
                OP_PLUS: lambda v: v if v > 0.0 else 0.0,
                OP_WSQ: lambda v: payload * v * v,
                OP_STEP: lambda v: 1.0 if v > 0.0 else 0.0,
            }
            fn = unary.get(op)
            if fn is not None:
                return self._emit(OP_CONST, payload=float(fn(ca)))
        if op == OP_ADD:
            if ca == 0.0:
                return b
            if cb == 0.0:
                return a
        elif op == OP_SUB:
            if cb == 0.0:
                return a
            if ca == 0.0:
                return self._emit(OP_NEG, b)
        elif op == OP_MUL:
            if ca == 0.0 or cb == 0.0:
                return self._emit(OP_CONST, payload=0.0)
            if ca == 1.0:
                return b
            if cb == 1.0:
                return a
        elif op == OP_DIV:
            if cb == 1.0:
                return a
        elif op == OP_POW:
            if payload == 1.0:
                return a
            if payload == 0.0:
                return self._emit(OP_CONST, payload=1.0)
        elif op == OP_WSQ:
            if payload == 0.0:
                return self._emit(OP_CONST, payload=0.0)
        return None

    def copy(self) -> "ExprGraph":
        """Independent copy; extending the copy leaves this graph untouched."""
        g = ExprGraph.__new__(ExprGraph)
        g._ops = list(self._ops)
        g._a = list(self._a)
        g._b = list(self._b)
        g._payload = list(self._payload)
        g._vars = dict(self._vars)
        g._var_nodes = list(self._var_nodes)
        g._cse = dict(self._cse)
        g._arrays = self._arrays
        return g

    # -- introspection ----------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self._ops)

    @property
    def num_vars(self) -> int:
        return len(self._var_nodes)

    @property
    def var_names(self) -> list[str]:
        names = [""] * len(self._vars)
        for name, slot in self._vars.items():
            names[slot] = name
        return names

    def slot_of(self, name: str) -> int:
        try:
            return self._vars[name]
        except KeyError:
            raise GraphConfigError(f"unknown variable {name!r}") from None

    def is_const(self, e: Expr) -> bool:
        return self._ops[e.node] == OP_CONST

    def const_value(self, e: Expr) -> float:
        if not self.is_const(e):
            raise GraphConfigError("node is not a constant")
        return self._payload[e.node]

    # -- numeric evaluation ----------------------------------------------

    def _frozen(self):
        if self._arrays is None:
            self._arrays = (
                np.asarray(self._ops, dtype=np.int32),
                np.asarray(self._a, dtype=np.int32),
                np.asarray(self._b, dtype=np.int32),
                np.asarray(self._payload, dtype=np.float64),
            )
        return self._arrays

    def pack(self, assignment: Mapping[str, Scalar]) -> np.ndarray:
        """Order an Assignment mapping into the slot-indexed vector."""
        x = np.empty(len(self._var_nodes))
        seen = 0
        for name, slot in self._vars.items():
            if name in assignment:
                x[slot] = float(assignment[name])
                seen += 1
            else:
                raise GraphConfigError(f"assignment misses variable {name!r}")
        if seen != len(assignment):
            extra = set(assignment) - set(self._vars)
            raise GraphConfigError(f"assignment binds unknown variables {sorted(extra)}")
        return x

    # -- symbolic differentiation ------------------------------------------

    def grad_exprs(self, output: Expr, wrt: Sequence[Expr]) -> list[Expr]:
        """Build derivative nodes d(output)/d(w) for each w in `wrt`.

        One symbolic reverse sweep; the returned handles live in this graph,
        so the derivatives can themselves be evaluated, differentiated, and
        combined like any other expression.
        """
        out = output.node
        adj: dict[int, int] = {out: self._emit(OP_CONST, payload=1.0)}

        def acc(node: int, term: int) -> None:
            prev = adj.get(node)
            adj[node] = term if prev is None else self._emit(OP_ADD, prev, term)

        for i in range(out, -1, -1):
            d = adj.get(i)
            if d is None:
                continue
            op, a, b, payload = self._ops[i], self._a[i], self._b[i], self._payload[i]
            if op == OP_ADD:
                acc(a, d)
                acc(b, d)
            elif op == OP_SUB:
                acc(a, d)
                acc(b, self._emit(OP_NEG, d))
            elif op == OP_MUL:
                acc(a, self._emit(OP_MUL, d, b))
                acc(b, self._emit(OP_MUL, d, a))
            elif op == OP_DIV:
                acc(a, self._emit(OP_DIV, d, b))
                acc(b, self._emit(OP_NEG, self._emit(OP_DIV, self._emit(OP_MUL, d, i), b)))
            elif op == OP_POW:
                t = self._emit(OP_POW, a, payload=payload - 1.0)
                acc(a, self._emit(OP_MUL, d, self._emit(OP_MUL, self._emit(OP_CONST, payload=payload), t)))
            elif op == OP_SIN:
                acc(a, self._emit(OP_MUL, d, self._emit(OP_COS, a)))
            elif op == OP_COS:
                acc(a, self._emit(OP_NEG, self._emit(OP_MUL, d, self._emit(OP_SIN, a))))
            elif op == OP_TAN:
                c2 = self._emit(OP_POW, self._emit(OP_COS, a), payload=2.0)
                acc(a, self._emit(OP_DIV, d, c2))
            elif op == OP_ATAN:
                den = self._emit(OP_ADD, self._emit(OP_CONST, payload=1.0), self._emit(OP_POW, a, payload=2.0))
                acc(a, self._emit(OP_DIV, d, den))
            elif op == OP_EXP:
                acc(a, self._emit(OP_MUL, d, i))
            elif op == OP_NEG:
                acc(a, self._emit(OP_NEG, d))
            elif op == OP_PLUS:
                acc(a, self._emit(OP_MUL, d, self._emit(OP_STEP, a)))
            elif op == OP_WSQ:
                w2 = self._emit(OP_CONST, payload=2.0 * payload)
                acc(a, self._emit(OP_MUL, d, self._emit(OP_MUL, w2, a)))
            # OP_CONST, OP_VAR, OP_STEP: nothing upstream

        zero = None
        result = []
        for w in wrt:
            node = adj.get(w.node)
            if node is None:
                if zero is None:
                    zero = self._emit(OP_CONST, payload=0.0)
                node = zero
            result.append(Expr(self, node))
        return result


class Evaluator:
    """Reusable evaluation buffers for one graph (not thread-safe itself)."""

    def __init__(self, graph: ExprGraph):
        self.graph = graph
        self._ops, self._a, self._b, self._payload = graph._frozen()
        n = graph.num_nodes
        self._val = np.zeros(n)
        self._adj = np.zeros(n)
        self._var_nodes = np.asarray(graph._var_nodes, dtype=np.int64)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the forward sweep; returns the full node-value buffer."""
        if x.shape[0] != self._var_nodes.shape[0]:
            raise GraphConfigError(
                f"expected {self._var_nodes.shape[0]} variable values, got {x.shape[0]}"
            )
        _forward(self._ops, self._a, self._b, self._payload, x, self._val)
        return self._val

    def value(self, x: np.ndarray, node: int) -> float:
        return float(self.forward(x)[node])

    def values(self, x: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        return self.forward(x)[nodes].copy()

    def value_and_grad(self, x: np.ndarray, node: int) -> tuple[float, np.ndarray]:
        """Value plus d(node)/d(slot) for every variable slot."""
        val = self.forward(x)
        _reverse(self._ops, self._a, self._b, self._payload, val, self._adj, node)
        return float(val[node]), self._adj[self._var_nodes].copy()

    def grad_after_forward(self, node: int) -> np.ndarray:
        """Reverse sweep reusing the last forward() values."""
        _reverse(self._ops, self._a, self._b, self._payload, self._val, self._adj, node)
        return self._adj[self._var_nodes].copy()


# -- spec-level convenience API ----------------------------------------------


def eval(g: ExprGraph, assignment: Mapping[str, Scalar], output: Expr | None = None) -> float:
    """Evaluate `output` (default: last node) at the given assignment."""
    x = g.pack(assignment)
    node = output.node if output is not None else g.num_nodes - 1
    v = Evaluator(g).value(x, node)
    if not math.isfinite(v):
        raise NumericError(f"non-finite value {v!r} at output node {node}")
    return v


def gradient(
    g: ExprGraph,
    assignment: Mapping[str, Scalar],
    wrt: Sequence[str],
    output: Expr | None = None,
) -> np.ndarray:
    """Partial derivatives of `output` in the order given by `wrt`."""
    x = g.pack(assignment)
    node = output.node if output is not None else g.num_nodes - 1
    v, full = Evaluator(g).value_and_grad(x, node)
    if not math.isfinite(v) or not np.all(np.isfinite(full)):
        raise NumericError("non-finite value while differentiating")
    return np.array([full[g.slot_of(name)] for name in wrt])


def check_gradient(
    g: ExprGraph,
    assignment: Mapping[str, Scalar],
    h: float = 1e-6,
    output: Expr | None = None,
    wrt: Sequence[str] | None = None,
) -> float:
    """Max relative error of reverse-mode vs central finite differences."""
    names = list(wrt) if wrt is not None else g.var_names
    grad = gradient(g, assignment, names, output=output)
    worst = 0.0
    point = dict(assignment)
    for name, gval in zip(names, grad):
        x0 = float(point[name])
        step = h * (1.0 + abs(x0))
        point[name] = x0 + step
        fp = eval(g, point, output=output)
        point[name] = x0 - step
        fm = eval(g, point, output=output)
        point[name] = x0
        fd = (fp - fm) / (2.0 * step)
        err = abs(gval - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


# -- generic scalar math (works on Expr and on plain floats) ------------------


def _unary(e: ExprLike, op: int, pyfn) -> ExprLike:
    if isinstance(e, Expr):
        return Expr(e.graph, e.graph._emit(op, e.node))
    return pyfn(e)


def sin(e: ExprLike) -> ExprLike:
    return _unary(e, OP_SIN, math.sin)


def cos(e: ExprLike) -> ExprLike:
    return _unary(e, OP_COS, math.cos)


def tan(e: ExprLike) -> ExprLike:
    return _unary(e, OP_TAN, math.tan)


def atan(e: ExprLike) -> ExprLike:
    return _unary(e, OP_ATAN, math.atan)


def exp(e: ExprLike) -> ExprLike:
    return _unary(e, OP_EXP, math.exp)


def plus(e: ExprLike) -> ExprLike:
    """max(0, e), differentiating to 0 at and below the kink."""
    return _unary(e, OP_PLUS, lambda v: v if v > 0.0 else 0.0)


def wsq(e: ExprLike, weight: float) -> ExprLike:
    """weight * e**2 as a single fused node."""
    if isinstance(e, Expr):
        return Expr(e.graph, e.graph._emit(OP_WSQ, e.node, payload=float(weight)))
    return weight * e * e


def weighted_sq_norm(terms: Sequence[ExprLike], weights: Sequence[float]) -> ExprLike:
    """sum_i weights[i] * terms[i]**2."""
    if len(terms) != len(weights):
        raise GraphConfigError("terms and weights must have equal length")
    total = None
    for t, w in zip(terms, weights):
        sq = wsq(t, w)
        total = sq if total is None else total + sq
    return 0.0 if total is None else total


def warmup() -> None:
    """Force numba compilation of the sweeps (cached on disk afterwards)."""
    g = ExprGraph()
    x = g.var("x")
    y = plus(sin(x) * exp(x) + atan(x) / (x - 3.0) + tan(x) ** 2.0 - wsq(x, 0.5))
    gradient(g, {"x": 0.3}, ["x"], output=y)
