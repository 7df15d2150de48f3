"""Small reverse-mode differentiation engine over dense numpy arrays.

Every node of a traced computation is a :class:`Var`. Backward passes can be
run in two modes: plain numeric mode, where adjoints are numpy arrays, and
``create_graph`` mode, where adjoints are themselves :class:`Var` nodes that
reference the forward graph. The second mode is what makes Hessian-vector
and mixed-partial-vector products exact: they are reverse passes through the
graph of the gradient.

The public surface is organized around :class:`Graph` (a traced function of
named parameter segments and named inputs) and :class:`ParameterVector`
(flat float64 storage plus a layout).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Var",
    "Layout",
    "ParameterVector",
    "Graph",
    "Session",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "relu",
    "square",
    "vsum",
    "mean",
    "inner",
    "affine",
    "mean_over_batch",
    "evaluate",
    "gradient",
    "hvp",
    "mixed_pvp",
    "backward",
]


class ShapeError(ValueError):
    """Raised when an input, parameter or direction has the wrong size."""


class Var:
    """A node in a traced computation.

    ``vjp(g, ins, out, need)`` returns the adjoints for ``parents``; it is
    written once and works for both array and Var arguments.
    """

    __slots__ = ("value", "parents", "vjp", "op")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"


def _lift(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def _sum_to_array(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# dispatching helpers used inside vjps

def _sum_to(g, shape):
    if isinstance(g, Var):
        return sum_to(g, shape)
    return _sum_to_array(g, shape)


def _broadcast(g, shape):
    if isinstance(g, Var):
        return broadcast_to(g, shape)
    return np.broadcast_to(g, shape)


def _reshape(g, shape):
    if isinstance(g, Var):
        return reshape(g, shape)
    return np.reshape(g, shape)


# primitive operations

def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def vjp(g, ins, out, need):
        return (_sum_to(g, sa) if need[0] else None, _sum_to(g, sb) if need[1] else None)

    return Var(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def vjp(g, ins, out, need):
        return (_sum_to(g, sa) if need[0] else None, _sum_to(-g, sb) if need[1] else None)

    return Var(a.value - b.value, (a, b), vjp, "sub")


def neg(a) -> Var:
    a = _lift(a)
    return Var(-a.value, (a,), lambda g, ins, out, need: (-g,), "neg")


def mul(a, b) -> Var:
    """Elementwise product with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def vjp(g, ins, out, need):
        x, y = ins
        return (
            _sum_to(g * y, sa) if need[0] else None,
            _sum_to(g * x, sb) if need[1] else None,
        )

    return Var(a.value * b.value, (a, b), vjp, "mul")


def matmul(a, b) -> Var:
    """Matrix product of two 2-D operands."""
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")

    def vjp(g, ins, out, need):
        x, y = ins
        return (g @ y.T if need[0] else None, x.T @ g if need[1] else None)

    return Var(a.value @ b.value, (a, b), vjp, "matmul")


def transpose(a) -> Var:
    a = _lift(a)
    return Var(a.value.T, (a,), lambda g, ins, out, need: (g.T,), "transpose")


def tanh(a) -> Var:
    a = _lift(a)

    def vjp(g, ins, out, need):
        return (g * (1.0 - out * out),)

    return Var(np.tanh(a.value), (a,), vjp, "tanh")


def relu(a) -> Var:
    a = _lift(a)
    mask = (a.value > 0).astype(np.float64)

    def vjp(g, ins, out, need):
        return (g * mask,)

    return Var(a.value * mask, (a,), vjp, "relu")


def square(a) -> Var:
    a = _lift(a)

    def vjp(g, ins, out, need):
        return (g * (2.0 * ins[0]),)

    return Var(a.value * a.value, (a,), vjp, "square")


def vsum(a, axis=None) -> Var:
    """Sum over ``axis`` (all axes when None)."""
    a = _lift(a)
    shape = a.shape
    value = a.value.sum(axis=axis, keepdims=True)
    kept = value.shape
    out_value = value.reshape(np.sum(a.value, axis=axis).shape)

    def vjp(g, ins, out, need):
        return (_broadcast(_reshape(g, kept), shape),)

    return Var(out_value, (a,), vjp, "sum")


def mean(a, axis=None) -> Var:
    a = _lift(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(vsum(a, axis), 1.0 / n)


def sum_to(a, shape) -> Var:
    a = _lift(a)
    src = a.shape

    def vjp(g, ins, out, need):
        return (_broadcast(g, src),)

    return Var(_sum_to_array(a.value, shape), (a,), vjp, "sum_to")


def broadcast_to(a, shape) -> Var:
    a = _lift(a)
    src = a.shape

    def vjp(g, ins, out, need):
        return (_sum_to(g, src),)

    return Var(np.broadcast_to(a.value, shape), (a,), vjp, "broadcast")


def reshape(a, shape) -> Var:
    a = _lift(a)
    src = a.shape

    def vjp(g, ins, out, need):
        return (_reshape(g, src),)

    return Var(np.reshape(a.value, shape), (a,), vjp, "reshape")


# composites

def inner(a, b) -> Var:
    return vsum(mul(a, b))


def affine(xs: Sequence, ws: Sequence, b=None) -> Var:
    """``sum_i xs[i] @ ws[i] + b``; several inputs avoid a concat node."""
    out = None
    for x, w in zip(xs, ws):
        term = matmul(x, w)
        out = term if out is None else add(out, term)
    if b is not None:
        out = add(out, b)
    return out


def mean_over_batch(a) -> Var:
    """Mean over the leading (batch) axis, then summed over the rest."""
    a = _lift(a)
    return mul(vsum(a), 1.0 / a.shape[0])


# backward pass

def _relevant(outputs: Sequence[Var], wrt: Sequence[Var]):
    """Topologically ordered nodes lying on a path from ``wrt`` to ``outputs``."""
    targets = {id(w) for w in wrt}
    reach: dict[int, bool] = {}
    order: list[Var] = []
    stack: list[tuple[Var, bool]] = [(o, False) for o in reversed(outputs)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            hit = key in targets or any(reach[id(p)] for p in node.parents)
            reach[key] = hit
            if hit:
                order.append(node)
            continue
        if key in reach:
            continue
        reach[key] = False  # provisional; overwritten once children are done
        stack.append((node, True))
        if key not in targets:
            for p in node.parents:
                if id(p) not in reach:
                    stack.append((p, False))
    return order, reach


class _Plan:
    """Reverse-order schedule of the nodes a backward pass has to visit."""

    __slots__ = ("reach", "steps", "targets")

    def __init__(self, outputs, wrt):
        order, reach = _relevant(outputs, wrt)
        self.reach = reach
        self.targets = {id(w) for w in wrt}
        self.steps = []
        for node in reversed(order):
            key = id(node)
            if key in self.targets or node.vjp is None:
                continue
            need = tuple(reach.get(id(p), False) for p in node.parents)
            pkeys = tuple(id(p) for p in node.parents)
            self.steps.append((node, key, need, pkeys))


def backward(outputs, grad_outputs, wrt, create_graph=False, plan=None):
    """Adjoints of ``outputs`` (seeded with ``grad_outputs``) w.r.t. ``wrt``.

    Leaves that are unreachable get zero adjoints. With ``create_graph`` the
    results are Vars that can be differentiated again.
    """
    if plan is None:
        plan = _Plan(outputs, wrt)
    reach = plan.reach
    adj: dict[int, object] = {}
    for o, g in zip(outputs, grad_outputs):
        if not reach.get(id(o), False):
            continue
        if create_graph:
            g = _lift(g)
        k = id(o)
        adj[k] = g if k not in adj else adj[k] + g
    pop = adj.pop
    for node, key, need, pkeys in plan.steps:
        g = pop(key, None)
        if g is None:
            continue
        if create_graph:
            grads = node.vjp(g, node.parents, node, need)
        else:
            grads = node.vjp(g, [p.value for p in node.parents], node.value, need)
        for k, gp, n in zip(pkeys, grads, need):
            if n and gp is not None:
                prev = adj.get(k)
                adj[k] = gp if prev is None else prev + gp
    results = []
    for w in wrt:
        g = adj.get(id(w))
        if g is None:
            zero = np.zeros(w.shape)
            g = Var(zero) if create_graph else zero
        results.append(g)
    return results


# graphs and parameter storage

class Layout:
    """Named parameter segments, each an ordered set of named array shapes."""

    def __init__(self, segments: Mapping[str, Sequence[tuple[str, tuple]]]):
        self.segments: "OrderedDict[str, OrderedDict[str, tuple]]" = OrderedDict()
        self.offsets: dict[str, dict[str, tuple[int, int]]] = {}
        self.bounds: dict[str, tuple[int, int]] = {}
        pos = 0
        for seg, arrays in segments.items():
            shapes = OrderedDict((name, tuple(shape)) for name, shape in arrays)
            self.segments[seg] = shapes
            start = pos
            offs = {}
            for name, shape in shapes.items():
                size = int(np.prod(shape, dtype=np.int64))
                offs[name] = (pos, pos + size)
                pos += size
            self.offsets[seg] = offs
            self.bounds[seg] = (start, pos)
        self.size = pos

    def segment_size(self, seg: str) -> int:
        if seg not in self.bounds:
            raise KeyError(f"unknown parameter segment {seg!r}")
        a, b = self.bounds[seg]
        return b - a

    def to_dict(self) -> dict:
        return {seg: [[n, list(s)] for n, s in arrays.items()] for seg, arrays in self.segments.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Layout":
        return cls({seg: [(n, tuple(s)) for n, s in arrays] for seg, arrays in d.items()})

    def __eq__(self, other):
        return isinstance(other, Layout) and self.to_dict() == other.to_dict()


class ParameterVector:
    """Flat float64 parameter storage bound to a :class:`Layout`."""

    def __init__(self, layout: Layout, values=None):
        self.layout = layout
        if values is None:
            values = np.zeros(layout.size)
        values = np.array(values, dtype=np.float64, copy=True).ravel()
        if values.size != layout.size:
            raise ShapeError(f"expected {layout.size} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        self.values = values

    def segment(self, seg: str) -> np.ndarray:
        a, b = self.layout.bounds[seg]
        return self.values[a:b]

    def set_segment(self, seg: str, v) -> None:
        a, b = self.layout.bounds[seg]
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != b - a:
            raise ShapeError(f"segment {seg!r} has {b - a} entries, got {v.size}")
        self.values[a:b] = v

    def array(self, seg: str, name: str) -> np.ndarray:
        a, b = self.layout.offsets[seg][name]
        return self.values[a:b].reshape(self.layout.segments[seg][name])

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.layout, self.values)


@dataclass
class Graph:
    """A scalar- or vector-valued function of parameter segments and inputs.

    ``fn(params, inputs)`` receives ``params[segment][array_name]`` and
    ``inputs[name]`` as Vars and must return a Var built from the primitives
    in this module. ``inputs`` maps each input slot to its trailing shape; a
    leading batch axis is allowed when the slot is declared with ``None``.
    """

    fn: Callable
    layout: Layout
    inputs: Mapping[str, tuple] = None

    def __post_init__(self):
        if self.inputs is None:
            self.inputs = {}

    def _check_inputs(self, inputs: Mapping) -> dict:
        missing = set(self.inputs) - set(inputs)
        if missing:
            raise ShapeError(f"missing input slot(s): {sorted(missing)}")
        out = {}
        for name, shape in self.inputs.items():
            x = np.asarray(inputs[name], dtype=np.float64)
            want = tuple(shape)
            got = x.shape
            ok = len(got) == len(want) and all(w is None or w == g for w, g in zip(want, got))
            if not ok:
                raise ShapeError(f"input slot {name!r}: expected shape {want}, got {got}")
            out[name] = x
        return out

    def trace(self, params: ParameterVector, inputs: Mapping | None = None):
        if params.layout is not self.layout and params.layout != self.layout:
            raise ShapeError("parameter layout does not match graph")
        xs = self._check_inputs(inputs or {})
        leaves: dict[str, dict[str, Var]] = {}
        for seg, arrays in self.layout.segments.items():
            leaves[seg] = {name: Var(params.array(seg, name)) for name in arrays}
        in_vars = {k: Var(v) for k, v in xs.items()}
        out = self.fn(leaves, in_vars)
        return _lift(out), leaves, in_vars


class Session:
    """One traced evaluation reused for several derivative queries.

    The gradient graph is built once (``create_graph``) on the first
    second-order request and then reused, so repeated Hessian-vector products
    inside an iterative solver do not retrace the forward pass.
    """

    def __init__(self, graph: Graph, params: ParameterVector, inputs: Mapping | None = None):
        self.graph = graph
        self.params = params
        self.out, self.leaves, self.input_vars = graph.trace(params, inputs)
        self._grad_vars: dict[str, list[Var]] = {}
        self._plans: dict[tuple, _Plan] = {}

    @property
    def value(self) -> np.ndarray:
        return self.out.value

    def _leaf_list(self, seg: str) -> list[Var]:
        if seg not in self.leaves:
            raise KeyError(f"unknown parameter segment {seg!r}")
        return list(self.leaves[seg].values())

    def _require_scalar(self):
        if np.size(self.out.value) != 1:
            raise ShapeError(f"graph output must be scalar, got shape {np.shape(self.out.value)}")

    def gradient(self, seg: str) -> np.ndarray:
        if seg in self._grad_vars:
            return np.concatenate([g.value.ravel() for g in self._grad_vars[seg]])
        self._require_scalar()
        wrt = self._leaf_list(seg)
        grads = backward([self.out], [np.ones_like(self.out.value)], wrt)
        return np.concatenate([g.ravel() for g in grads])

    def input_gradient(self, name: str) -> np.ndarray:
        """Gradient of the scalar output w.r.t. an input slot."""
        self._require_scalar()
        (g,) = backward([self.out], [np.ones_like(self.out.value)], [self.input_vars[name]])
        return np.asarray(g)

    def gradients(self, *segs: str) -> list[np.ndarray]:
        """Plain gradients for several segments from one backward pass."""
        self._require_scalar()
        wrt = [leaf for s in segs for leaf in self._leaf_list(s)]
        grads = backward([self.out], [np.ones_like(self.out.value)], wrt)
        out, pos = [], 0
        for s in segs:
            n = len(self.leaves[s])
            out.append(np.concatenate([g.ravel() for g in grads[pos:pos + n]]))
            pos += n
        return out

    def gradient_vars(self, *segs: str) -> None:
        """Build differentiable gradients for ``segs`` in a single backward pass."""
        todo = [s for s in segs if s not in self._grad_vars]
        if not todo:
            return
        self._require_scalar()
        wrt = [leaf for s in todo for leaf in self._leaf_list(s)]
        grads = backward([self.out], [np.ones_like(self.out.value)], wrt, create_graph=True)
        pos = 0
        for s in todo:
            n = len(self.leaves[s])
            self._grad_vars[s] = grads[pos:pos + n]
            pos += n

    def _split(self, seg: str, v) -> list[np.ndarray]:
        v = np.asarray(v, dtype=np.float64).ravel()
        size = self.graph.layout.segment_size(seg)
        if v.size != size:
            raise ShapeError(f"direction for segment {seg!r} must have {size} entries, got {v.size}")
        parts = []
        pos = 0
        for shape in self.graph.layout.segments[seg].values():
            n = int(np.prod(shape, dtype=np.int64))
            parts.append(v[pos:pos + n].reshape(shape))
            pos += n
        return parts

    def mixed(self, seg_outer: str, seg_inner: str, v) -> np.ndarray:
        """Gradient w.r.t. ``seg_outer`` of <grad_{seg_inner} J, v>."""
        parts = self._split(seg_inner, v)
        self.gradient_vars(seg_inner)
        outs = self._grad_vars[seg_inner]
        wrt = self._leaf_list(seg_outer)
        key = (seg_inner, seg_outer)
        plan = self._plans.get(key)
        if plan is None:
            plan = self._plans[key] = _Plan(outs, wrt)
        grads = backward(outs, parts, wrt, plan=plan)
        return np.concatenate([np.asarray(g).ravel() for g in grads])

    def hvp(self, seg: str, v) -> np.ndarray:
        return self.mixed(seg, seg, v)


def evaluate(graph: Graph, params: ParameterVector, inputs: Mapping | None = None) -> np.ndarray:
    out, _, _ = graph.trace(params, inputs)
    return np.array(out.value, dtype=np.float64)


def gradient(graph: Graph, params: ParameterVector, segment: str, inputs: Mapping | None = None) -> np.ndarray:
    return Session(graph, params, inputs).gradient(segment)


def hvp(graph: Graph, params: ParameterVector, segment: str, v, inputs: Mapping | None = None) -> np.ndarray:
    return Session(graph, params, inputs).hvp(segment, v)


def mixed_pvp(graph: Graph, params: ParameterVector, seg_outer: str, seg_inner: str, v,
              inputs: Mapping | None = None) -> np.ndarray:
    return Session(graph, params, inputs).mixed(seg_outer, seg_inner, v)
