"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is a tape of :class:`Node` objects in creation order, which is
also a valid topological order. Nodes are evaluated eagerly whenever all their
parents carry values, so most code just builds expressions and calls
:meth:`Graph.backward`. Graphs that start from value-less ``input`` leaves are
evaluated later with :meth:`Graph.forward`, which also re-runs an existing tape
on fresh inputs.

Gradients are available for every node, not only leaves: the annotation step
differentiates the distillation loss with respect to the student's softmax
output, which is an intermediate node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Adam",
    "GradCheck",
    "Graph",
    "GraphError",
    "Node",
    "NonFiniteError",
    "SGD",
    "ShapeError",
    "backward",
    "finite_diff_check",
    "forward",
    "make_optimizer",
]

DTYPE = np.float64


class GraphError(ValueError):
    """Misuse of a graph (wrong order of calls, unknown nodes, bad feeds)."""


class ShapeError(GraphError):
    """Operand shapes are incompatible for the recorded operation."""


class NonFiniteError(FloatingPointError):
    """A value or gradient became NaN or infinite."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# primitive rules: forward(values, attrs) and vjp(values, out, gout, attrs)
# --------------------------------------------------------------------------


def _f_affine(v, a):
    x, w, b = v
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine expects x[n,i], W[i,o], b[o]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine shapes do not chain: x{x.shape} W{w.shape} b{b.shape}")
    return x @ w + b


def _b_affine(v, out, g, a):
    x, w, _ = v
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _f_matmul(v, a):
    x, w = v
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {x.shape} @ {w.shape}")
    return x @ w


def _b_matmul(v, out, g, a):
    x, w = v
    return g @ w.T, x.T @ g


def _check_broadcast(x, y):
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} with {y.shape}") from None


def _f_add(v, a):
    _check_broadcast(*v)
    return v[0] + v[1]


def _b_add(v, out, g, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _f_sub(v, a):
    _check_broadcast(*v)
    return v[0] - v[1]


def _b_sub(v, out, g, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _f_mul(v, a):
    _check_broadcast(*v)
    return v[0] * v[1]


def _b_mul(v, out, g, a):
    x, y = v
    return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)


def _f_div(v, a):
    _check_broadcast(*v)
    return v[0] / v[1]


def _b_div(v, out, g, a):
    x, y = v
    return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)


def _f_relu(v, a):
    return np.maximum(v[0], 0.0)


def _b_relu(v, out, g, a):
    return (g * (v[0] > 0.0),)


def _f_tanh(v, a):
    return np.tanh(v[0])


def _b_tanh(v, out, g, a):
    return (g * (1.0 - out * out),)


def _f_exp(v, a):
    return np.exp(v[0])


def _b_exp(v, out, g, a):
    return (g * out,)


def _f_log(v, a):
    floor = a["floor"]
    x = v[0]
    if floor > 0.0:
        x = np.maximum(x, floor)
    return np.log(x)


def _b_log(v, out, g, a):
    x = v[0]
    floor = a["floor"]
    if floor > 0.0:
        active = x > floor
        return (np.where(active, g / np.where(active, x, 1.0), 0.0),)
    return (g / x,)


def _f_square(v, a):
    return v[0] * v[0]


def _b_square(v, out, g, a):
    return (2.0 * v[0] * g,)


def _f_sqrt(v, a):
    return np.sqrt(v[0])


def _b_sqrt(v, out, g, a):
    return (np.where(out > 0.0, 0.5 * g / np.where(out > 0.0, out, 1.0), 0.0),)


def _f_softmax(v, a):
    x = v[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _b_softmax(v, out, g, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _f_sum(v, a):
    return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"])


def _b_sum(v, out, g, a):
    x = v[0]
    axis = a["axis"]
    if axis is not None and not a["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _f_norm(v, a):
    return np.sqrt(np.sum(v[0] * v[0], axis=-1))


def _b_norm(v, out, g, a):
    x = v[0]
    safe = np.where(out > 0.0, out, 1.0)
    scale = np.where(out > 0.0, g / safe, 0.0)
    return (x * scale[..., None],)


def _f_pick(v, a):
    x = v[0]
    idx = a["index"]
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick expects x[n,c] and n indices; got {x.shape} and {idx.shape}")
    return x[np.arange(x.shape[0]), idx]


def _b_pick(v, out, g, a):
    x = v[0]
    gx = np.zeros_like(x)
    gx[np.arange(x.shape[0]), a["index"]] = g
    return (gx,)


def _f_concat(v, a):
    try:
        return np.concatenate(v, axis=a["axis"])
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def _b_concat(v, out, g, a):
    sizes = [x.shape[a["axis"]] for x in v]
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=a["axis"]))


_RULES: dict[str, tuple[Callable, Callable]] = {
    "affine": (_f_affine, _b_affine),
    "matmul": (_f_matmul, _b_matmul),
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "div": (_f_div, _b_div),
    "relu": (_f_relu, _b_relu),
    "tanh": (_f_tanh, _b_tanh),
    "exp": (_f_exp, _b_exp),
    "log": (_f_log, _b_log),
    "square": (_f_square, _b_square),
    "sqrt": (_f_sqrt, _b_sqrt),
    "softmax": (_f_softmax, _b_softmax),
    "sum": (_f_sum, _b_sum),
    "norm": (_f_norm, _b_norm),
    "pick": (_f_pick, _b_pick),
    "concat": (_f_concat, _b_concat),
}

LEAF_KINDS = ("param", "input", "const")


class Node:
    """One recorded value in a :class:`Graph`."""

    __slots__ = ("graph", "index", "op", "parents", "attrs", "label", "value")
    # make ``ndarray <op> Node`` defer to the Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, graph: "Graph", index: int, op: str, parents: tuple["Node", ...],
                 attrs: dict, label: str | None, value: np.ndarray | None):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.label = label
        self.value = value

    @property
    def is_leaf(self) -> bool:
        return self.op in LEAF_KINDS

    @property
    def shape(self) -> tuple[int, ...] | None:
        return None if self.value is None else self.value.shape

    def __repr__(self) -> str:
        name = f" '{self.label}'" if self.label else ""
        return f"<Node #{self.index} {self.op}{name} shape={self.shape}>"

    # arithmetic sugar; scalars and arrays are lifted to constants
    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.mul(self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.div(self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.div(self._lift(other), self)

    def __neg__(self):
        return self.graph.mul(self, self.graph.constant(-1.0))


class Graph:
    """A tape of differentiable operations.

    >>> g = Graph()
    >>> x = g.param([1.0, 2.0, 3.0])
    >>> y = g.sum(g.square(x))
    >>> g.backward(y)[x]
    array([2., 4., 6.])
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    # ---- leaves ----------------------------------------------------------
    def _leaf(self, kind: str, value, label: str | None) -> Node:
        arr = None if value is None else _as_array(value)
        node = Node(self, len(self.nodes), kind, (), {}, label, arr)
        self.nodes.append(node)
        return node

    def param(self, value, label: str | None = None) -> Node:
        """Trainable leaf."""
        return self._leaf("param", value, label)

    def input(self, value=None, label: str | None = None, shape: Sequence[int] | None = None) -> Node:
        """Data leaf; may be left empty and supplied to :meth:`forward`."""
        node = self._leaf("input", value, label)
        node.attrs["shape"] = None if shape is None else tuple(shape)
        if node.value is not None:
            self._check_declared(node, node.value)
        return node

    def constant(self, value, label: str | None = None) -> Node:
        return self._leaf("const", value, label)

    # ---- op recording ----------------------------------------------------
    def _record(self, op: str, parents: Iterable[Node], label: str | None = None, **attrs) -> Node:
        parents = tuple(parents)
        for p in parents:
            if p.graph is not self:
                raise GraphError(f"{p!r} belongs to a different graph")
        node = Node(self, len(self.nodes), op, parents, attrs, label, None)
        self.nodes.append(node)
        if all(p.value is not None for p in parents):
            self._evaluate(node)
        return node

    def _evaluate(self, node: Node) -> None:
        fwd = _RULES[node.op][0]
        try:
            node.value = fwd([p.value for p in node.parents], node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"{node!r}: {exc}") from None

    def affine(self, x: Node, w: Node, b: Node, label: str | None = None) -> Node:
        return self._record("affine", (x, w, b), label)

    def matmul(self, x: Node, w: Node, label: str | None = None) -> Node:
        return self._record("matmul", (x, w), label)

    def add(self, x: Node, y: Node, label: str | None = None) -> Node:
        return self._record("add", (x, y), label)

    def sub(self, x: Node, y: Node, label: str | None = None) -> Node:
        return self._record("sub", (x, y), label)

    def mul(self, x: Node, y: Node, label: str | None = None) -> Node:
        return self._record("mul", (x, y), label)

    def div(self, x: Node, y: Node, label: str | None = None) -> Node:
        return self._record("div", (x, y), label)

    def scale(self, x: Node, factor: float, label: str | None = None) -> Node:
        return self.mul(x, self.constant(factor), label)

    def relu(self, x: Node, label: str | None = None) -> Node:
        return self._record("relu", (x,), label)

    def tanh(self, x: Node, label: str | None = None) -> Node:
        return self._record("tanh", (x,), label)

    def exp(self, x: Node, label: str | None = None) -> Node:
        return self._record("exp", (x,), label)

    def log(self, x: Node, floor: float = 0.0, label: str | None = None) -> Node:
        """Natural log of ``max(x, floor)``; zero gradient where the floor binds."""
        return self._record("log", (x,), label, floor=float(floor))

    def square(self, x: Node, label: str | None = None) -> Node:
        return self._record("square", (x,), label)

    def sqrt(self, x: Node, label: str | None = None) -> Node:
        return self._record("sqrt", (x,), label)

    def softmax(self, x: Node, label: str | None = None) -> Node:
        """Row-wise softmax over the last axis, max-shifted."""
        return self._record("softmax", (x,), label)

    def sum(self, x: Node, axis: int | None = None, keepdims: bool = False, label: str | None = None) -> Node:
        return self._record("sum", (x,), label, axis=axis, keepdims=keepdims)

    def mean(self, x: Node, axis: int | None = None, keepdims: bool = False, label: str | None = None) -> Node:
        if x.value is None:
            raise GraphError("mean needs a concrete operand to know its size")
        n = x.value.size if axis is None else x.value.shape[axis]
        return self.scale(self.sum(x, axis, keepdims), 1.0 / n, label)

    def norm(self, x: Node, label: str | None = None) -> Node:
        """Euclidean norm over the last axis."""
        return self._record("norm", (x,), label)

    def pick(self, x: Node, index, label: str | None = None) -> Node:
        """``x[i, index[i]]`` for each row ``i``; ``index`` is a constant."""
        return self._record("pick", (x,), label, index=np.asarray(index, dtype=np.intp))

    def concat(self, xs: Sequence[Node], axis: int = -1, label: str | None = None) -> Node:
        return self._record("concat", xs, label, axis=axis)

    # ---- evaluation ------------------------------------------------------
    def _check_declared(self, node: Node, value: np.ndarray) -> None:
        shape = node.attrs.get("shape")
        if shape is None:
            return
        if len(shape) != value.ndim or any(s not in (-1, v) for s, v in zip(shape, value.shape)):
            raise ShapeError(f"{node!r}: expected shape {shape}, got {value.shape}")

    def forward(self, feed: dict[Node, object] | None = None, output: Node | None = None,
                overrides: dict[Node, object] | None = None) -> np.ndarray:
        """Re-evaluate the whole tape.

        ``feed`` assigns leaf values. ``overrides`` pins any node (leaf or
        intermediate) to a given value, which is how finite differences probe
        intermediate nodes.
        """
        feed = feed or {}
        overrides = overrides or {}
        for node, value in feed.items():
            if node.graph is not self:
                raise GraphError(f"{node!r} is not part of this graph")
            if not node.is_leaf:
                raise GraphError(f"{node!r} is not a leaf; use overrides")
            arr = _as_array(value)
            self._check_declared(node, arr)
            node.value = arr
        for node in self.nodes:
            if node in overrides:
                node.value = _as_array(overrides[node])
            elif node.is_leaf:
                if node.value is None:
                    raise GraphError(f"{node!r} has no value; supply it in feed")
            else:
                self._evaluate(node)
        out = output if output is not None else self.nodes[-1]
        return out.value

    def backward(self, seed: Node, seed_grad=None, wrt: Iterable[Node] | None = None,
                 check_finite: bool = True) -> dict[Node, np.ndarray]:
        """Reverse pass from ``seed``.

        Returns gradients keyed by node. With ``wrt`` the result holds exactly
        those nodes (zeros where unreachable); otherwise every node that lies
        on a path to ``seed``.
        """
        if seed.graph is not self:
            raise GraphError(f"{seed!r} is not part of this graph")
        if seed.value is None:
            raise GraphError(f"{seed!r} has no value; run forward before backward")
        if seed_grad is None:
            seed_grad = np.ones_like(seed.value)
        seed_grad = _as_array(seed_grad)
        if seed_grad.shape != seed.value.shape:
            raise ShapeError(f"seed gradient shape {seed_grad.shape} != {seed!r}")

        grads: dict[int, np.ndarray] = {seed.index: seed_grad}
        for node in reversed(self.nodes[: seed.index + 1]):
            g = grads.get(node.index)
            if g is None or node.is_leaf:
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient at {node!r}")
            vjp = _RULES[node.op][1]
            parent_grads = vjp([p.value for p in node.parents], node.value, g, node.attrs)
            for p, pg in zip(node.parents, parent_grads):
                if p.index in grads:
                    grads[p.index] = grads[p.index] + pg
                else:
                    grads[p.index] = pg

        if check_finite:
            for idx, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient at {self.nodes[idx]!r}")
        if wrt is None:
            return {self.nodes[i]: g for i, g in grads.items()}
        out = {}
        for node in wrt:
            g = grads.get(node.index)
            out[node] = np.zeros_like(node.value) if g is None else g
        return out


def forward(graph: Graph, feed: dict[Node, object] | None = None, output: Node | None = None) -> np.ndarray:
    return graph.forward(feed, output)


def backward(graph: Graph, seed: Node, seed_grad=None, wrt: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    return graph.backward(seed, seed_grad, wrt)


class GradCheck(NamedTuple):
    max_error: float
    checked: int
    skipped: int


def finite_diff_check(graph: Graph, output: Node, node: Node, probes: int = 20, step: float = 1e-6,
                      rng: np.random.Generator | None = None) -> GradCheck:
    """Compare the reverse-mode gradient of ``sum(output)`` at ``node`` with central differences.

    The error per coordinate is ``|autodiff - fd| / max(1, |fd|)``. Probes whose
    perturbed evaluations are non-finite are skipped and counted.
    """
    base_value = node.value.copy()
    analytic = graph.backward(output, wrt=[node], check_finite=False)[node]
    size = base_value.size
    if rng is None:
        rng = np.random.default_rng(0)
    coords = np.arange(size) if probes >= size else rng.choice(size, size=probes, replace=False)

    def evaluate(value: np.ndarray) -> float:
        if node.is_leaf:
            return float(np.sum(graph.forward({node: value}, output)))
        return float(np.sum(graph.forward(output=output, overrides={node: value})))

    worst = 0.0
    checked = skipped = 0
    try:
        for flat in coords:
            plus = base_value.copy()
            minus = base_value.copy()
            plus.flat[flat] += step
            minus.flat[flat] -= step
            f_plus, f_minus = evaluate(plus), evaluate(minus)
            a = analytic.flat[flat]
            if not (np.isfinite(f_plus) and np.isfinite(f_minus) and np.isfinite(a)):
                skipped += 1
                continue
            fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, abs(a - fd) / max(1.0, abs(fd)))
            checked += 1
    finally:
        if node.is_leaf:
            graph.forward({node: base_value})
        else:
            graph.forward()
    return GradCheck(worst, checked, skipped)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


def _check_grads(grads: Sequence[np.ndarray], params: Sequence[np.ndarray]) -> None:
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"parameter {i}: non-finite gradient, step refused")


@dataclass
class SGD:
    """Plain gradient step ``p - lr * g``."""

    lr: float
    steps: int = 0
    kind: str = field(default="sgd", init=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        _check_grads(grads, params)
        self.steps += 1
        return [p - self.lr * g for p, g in zip(params, grads)]


@dataclass
class Adam:
    """Bias-corrected adaptive moment step.

    Constants default to beta1=0.9, beta2=0.999, eps=1e-8; ``eps`` is added to
    the square root of the corrected second moment.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    kind: str = field(default="adam", init=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        _check_grads(grads, params)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif len(self.m) != len(params) or any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ShapeError("optimizer state does not match parameter shapes")
        self.steps += 1
        t = self.steps
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer kind {kind!r}; expected 'sgd' or 'adam'")
