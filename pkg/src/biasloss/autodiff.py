"""Dense tensor graphs with reverse-mode automatic differentiation.

Values are numpy arrays (row-major, float32 by default, float64 for
verification work). A computation is a DAG of ``Node`` objects built ahead
of time; leaves receive values, ``forward`` evaluates the graph in
topological order, and ``backward`` walks it in reverse accumulating
gradients into a fresh :class:`GradStore`.

A graph instance is single-threaded. Distinct graphs are independent and
parameters (leaf nodes) may be shared between graphs, e.g. one graph per
batch size over the same model weights.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives incompatibly shaped operands."""


class GraphError(RuntimeError):
    """Raised for structural problems in a computation graph (e.g. cycles)."""


class UninitializedValueError(GraphError):
    """Raised when forward reaches a leaf whose value was never set."""


# When True, every op asserts its output is finite. Debug aid only; the hot
# path stays branch-free by default.
validate_finiteness = False

_ids = itertools.count()

_FORWARD = {}
_BACKWARD = {}


def register_op(name, fwd, bwd):
    """Register forward/backward rules for an op tag.

    fwd(node, input_values) -> ndarray
    bwd(node, upstream_grad) -> list of grads aligned with node.inputs
    (entries may be None for inputs that receive no gradient).
    """
    if name in _FORWARD:
        raise ValueError(f"op {name!r} already registered")
    _FORWARD[name] = fwd
    _BACKWARD[name] = bwd


class Node:
    """One vertex of a computation DAG.

    Leaves (op == "leaf") carry externally supplied values; every other node
    computes its value from its inputs during a forward pass.
    """

    __slots__ = ("id", "op", "inputs", "value", "requires_grad", "name",
                 "attrs", "ctx")

    def __init__(self, op, inputs=(), value=None, requires_grad=False,
                 name=None, attrs=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = list(inputs)
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self.attrs = attrs or {}
        self.ctx = None

    def set(self, value):
        """Assign a leaf's value. Only leaves may be set."""
        if self.op != "leaf":
            raise GraphError("only leaf nodes accept values")
        self.value = np.asarray(value)
        return self

    def item(self):
        if self.value is None:
            raise UninitializedValueError("node has no value; run forward first")
        return float(self.value)

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        tag = self.name or self.op
        shp = "unset" if self.value is None else "x".join(map(str, self.value.shape))
        return f"Node<{tag} #{self.id} {shp}>"

    # operator sugar; python scalars are lifted to constants of our dtype
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(shape, fill=None, data=None, dtype=np.float32):
    """Create a dense array with the given shape, from a fill value or data.

    Row-major contiguous. Exactly one of fill/data must be provided.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    n = int(np.prod(shape)) if shape else 1
    if (fill is None) == (data is None):
        raise ShapeError("provide exactly one of fill or data")
    if fill is not None:
        return np.full(shape, fill, dtype=dtype)
    data = np.asarray(data, dtype=dtype).ravel()
    if data.size != n:
        raise ShapeError(f"shape {shape} needs {n} values, got {data.size}")
    return data.reshape(shape).copy()


def leaf(value=None, requires_grad=False, name=None):
    """Create a leaf node, optionally with an initial value."""
    node = Node("leaf", (), None, requires_grad, name)
    if value is not None:
        node.set(value)
    return node


def parameter(value, name=None):
    return leaf(np.asarray(value), requires_grad=True, name=name)


def constant(value, name=None):
    return leaf(np.asarray(value), requires_grad=False, name=name)


def _lift(other, like):
    if isinstance(other, Node):
        return other
    dtype = like.value.dtype if like.value is not None else np.float32
    return constant(np.asarray(other, dtype=dtype))


def _node(op, inputs, attrs=None):
    rg = any(i.requires_grad for i in inputs)
    return Node(op, inputs, None, rg, attrs=attrs)


def topo_order(root):
    """Topological order of root's ancestry; raises GraphError on cycles."""
    order = []
    state = {}  # id -> 1 visiting, 2 done
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[node.id] = 2
            order.append(node)
            continue
        st = state.get(node.id)
        if st == 2:
            continue
        if st == 1:
            raise GraphError("cycle detected in computation graph")
        state[node.id] = 1
        stack.append((node, True))
        for inp in node.inputs:
            if state.get(inp.id) != 2:
                if state.get(inp.id) == 1:
                    raise GraphError("cycle detected in computation graph")
                stack.append((inp, False))
    return order


class ForwardPass:
    """One evaluation pass: every node is computed at most once.

    Running multiple roots within the same pass shares already computed
    subgraphs, which lets a caller inspect an intermediate value and then
    extend the graph without re-evaluating the prefix.
    """

    def __init__(self, validate=None):
        self.validate = validate_finiteness if validate is None else validate
        self._done = set()

    def run(self, root):
        for node in topo_order(root):
            if node.id in self._done:
                continue
            if node.op == "leaf":
                if node.value is None:
                    raise UninitializedValueError(
                        f"leaf {node.name or node.id} has no value")
            else:
                xs = [inp.value for inp in node.inputs]
                node.value = _FORWARD[node.op](node, xs)
                if self.validate and not np.all(np.isfinite(node.value)):
                    raise FloatingPointError(
                        f"non-finite value produced by op {node.op!r}")
            self._done.add(node.id)
        return root.value


def forward(root, validate=None):
    """Evaluate the graph below root and return root's value."""
    return ForwardPass(validate).run(root)


class GradStore:
    """Map from node to gradient array of identical shape.

    Nodes that require grad but were unreachable from the backward root
    read as zeros.
    """

    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, node):
        g = self._grads.get(node.id)
        if g is not None:
            return g
        if node.requires_grad and node.value is not None:
            return np.zeros_like(node.value)
        raise KeyError(f"no gradient tracked for {node!r}")

    def get(self, node, default=None):
        try:
            return self[node]
        except KeyError:
            return default

    def __contains__(self, node):
        return node.id in self._grads


def backward(root):
    """Reverse-mode differentiation from a scalar root.

    Forward must have been run already. Returns a GradStore with the
    gradient of root w.r.t. every requires_grad node it reaches.
    """
    if root.value is None:
        raise UninitializedValueError("run forward before backward")
    if root.value.size != 1:
        raise ValueError(
            f"backward root must be scalar, got shape {root.value.shape}")
    order = topo_order(root)
    grads = {root.id: np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node.op == "leaf":
            continue
        if not any(inp.requires_grad for inp in node.inputs):
            continue
        in_grads = _BACKWARD[node.op](node, g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            have = grads.get(inp.id)
            grads[inp.id] = ig if have is None else have + ig
    return GradStore(grads)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g, shape):
    """Reduce g (result of broadcasting) back to the given input shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_to(g, x_shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x_shape)


# ---------------------------------------------------------------------------
# element-wise arithmetic

def _binary(name, f, dfa, dfb):
    def fwd(node, xs):
        return f(xs[0], xs[1])

    def bwd(node, g):
        a, b = (inp.value for inp in node.inputs)
        ga = _unbroadcast(dfa(g, a, b, node.value), a.shape)
        gb = _unbroadcast(dfb(g, a, b, node.value), b.shape)
        return [ga, gb]

    register_op(name, fwd, bwd)
    def make(a, b):
        return _node(name, [a, b])
    return make


add = _binary("add", lambda a, b: a + b,
              lambda g, a, b, o: g, lambda g, a, b, o: g)
sub = _binary("sub", lambda a, b: a - b,
              lambda g, a, b, o: g, lambda g, a, b, o: -g)
mul = _binary("mul", lambda a, b: a * b,
              lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
div = _binary("div", lambda a, b: a / b,
              lambda g, a, b, o: g / b, lambda g, a, b, o: -g * a / (b * b))


def _unary(name, f, df):
    def fwd(node, xs):
        return f(xs[0])

    def bwd(node, g):
        return [df(g, node.inputs[0].value, node.value)]

    register_op(name, fwd, bwd)
    def make(x):
        return _node(name, [x])
    return make


neg = _unary("neg", lambda x: -x, lambda g, x, o: -g)
exp = _unary("exp", np.exp, lambda g, x, o: g * o)
log = _unary("log", np.log, lambda g, x, o: g / x)
relu = _unary("relu", lambda x: np.maximum(x, 0),
              lambda g, x, o: g * (x > 0))


def _power_fwd(node, xs):
    return xs[0] ** node.attrs["exponent"]


def _power_bwd(node, g):
    p = node.attrs["exponent"]
    x = node.inputs[0].value
    return [g * p * x ** (p - 1)]


register_op("power", _power_fwd, _power_bwd)


def power(x, exponent):
    """x ** exponent for a fixed real exponent (x >= 0 when non-integral)."""
    return _node("power", [x], {"exponent": float(exponent)})


def _clamp_fwd(node, xs):
    return np.clip(xs[0], node.attrs["lo"], node.attrs["hi"])


def _clamp_bwd(node, g):
    x = node.inputs[0].value
    lo, hi = node.attrs["lo"], node.attrs["hi"]
    return [g * ((x >= lo) & (x <= hi))]


register_op("clamp", _clamp_fwd, _clamp_bwd)


def clamp(x, lo, hi):
    """Clip values to [lo, hi]; gradient passes through the interior only."""
    if lo > hi:
        raise ValueError(f"clamp bounds out of order: {lo} > {hi}")
    return _node("clamp", [x], {"lo": float(lo), "hi": float(hi)})


def _detach_fwd(node, xs):
    return xs[0]


register_op("detach", _detach_fwd, lambda node, g: [None])


def detach(x):
    """Same value as x, but no gradient flows to x's ancestry."""
    node = _node("detach", [x])
    node.requires_grad = False
    return node


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def _matmul_fwd(node, xs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(node, g):
    a, b = (inp.value for inp in node.inputs)
    return [g @ b.T, a.T @ g]


register_op("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b):
    return _node("matmul", [a, b])


def _reshape_fwd(node, xs):
    return xs[0].reshape(node.attrs["shape"])


def _reshape_bwd(node, g):
    return [g.reshape(node.inputs[0].value.shape)]


register_op("reshape", _reshape_fwd, _reshape_bwd)


def reshape(x, shape):
    return _node("reshape", [x], {"shape": tuple(shape)})


def _unfold_fwd(node, xs):
    x = xs[0]
    if x.ndim != 4:
        raise ShapeError(f"unfold expects a 4-axis tensor, got {x.ndim} axes")
    return x.reshape(x.shape[0], -1)  # zero-copy view of row-major data


register_op("unfold", _unfold_fwd, _reshape_bwd)


def unfold(x):
    """[b,c,h,w] -> [b, c*h*w]; row i is sample i's scalars in row-major order."""
    return _node("unfold", [x])


def _transpose_fwd(node, xs):
    return np.transpose(xs[0], node.attrs["axes"])


def _transpose_bwd(node, g):
    axes = node.attrs["axes"]
    if axes is None:
        return [np.transpose(g)]
    inv = np.argsort(axes)
    return [np.transpose(g, inv)]


register_op("transpose", _transpose_fwd, _transpose_bwd)


def transpose(x, axes=None):
    return _node("transpose", [x], {"axes": None if axes is None else tuple(axes)})


def _broadcast_fwd(node, xs):
    return np.broadcast_to(xs[0], node.attrs["shape"])


def _broadcast_bwd(node, g):
    return [_unbroadcast(g, node.inputs[0].value.shape)]


register_op("broadcast", _broadcast_fwd, _broadcast_bwd)


def broadcast_to(x, shape):
    return _node("broadcast", [x], {"shape": tuple(shape)})


# ---------------------------------------------------------------------------
# reductions

def _sum_fwd(node, xs):
    return np.asarray(xs[0].sum(axis=node.attrs["axis"],
                                keepdims=node.attrs["keepdims"]))


def _sum_bwd(node, g):
    x = node.inputs[0].value
    axes = _norm_axes(node.attrs["axis"], x.ndim)
    return [np.ascontiguousarray(_expand_to(g, x.shape, axes,
                                            node.attrs["keepdims"]))]


register_op("sum", _sum_fwd, _sum_bwd)


def sum_(x, axis=None, keepdims=False):
    return _node("sum", [x], {"axis": axis, "keepdims": keepdims})


def _mean_fwd(node, xs):
    return np.asarray(xs[0].mean(axis=node.attrs["axis"],
                                 keepdims=node.attrs["keepdims"]))


def _mean_bwd(node, g):
    x = node.inputs[0].value
    axes = _norm_axes(node.attrs["axis"], x.ndim)
    count = np.prod([x.shape[a] for a in axes])
    gx = _expand_to(g, x.shape, axes, node.attrs["keepdims"])
    return [gx / x.dtype.type(count)]


register_op("mean", _mean_fwd, _mean_bwd)


def mean(x, axis=None, keepdims=False):
    return _node("mean", [x], {"axis": axis, "keepdims": keepdims})


def _extremum(name, npf):
    def fwd(node, xs):
        return np.asarray(npf(xs[0], axis=node.attrs["axis"],
                              keepdims=node.attrs["keepdims"]))

    def bwd(node, g):
        x = node.inputs[0].value
        axes = _norm_axes(node.attrs["axis"], x.ndim)
        ob = _expand_to(node.value, x.shape, axes, node.attrs["keepdims"])
        gb = _expand_to(g, x.shape, axes, node.attrs["keepdims"])
        mask = (x == ob)
        counts = mask.sum(axis=axes, keepdims=True)
        # ties share the gradient equally
        return [gb * mask / counts]

    register_op(name, fwd, bwd)
    def make(x, axis=None, keepdims=False):
        return _node(name, [x], {"axis": axis, "keepdims": keepdims})
    return make


max_ = _extremum("max", np.max)
min_ = _extremum("min", np.min)


# ---------------------------------------------------------------------------
# classification helpers

def _log_softmax_fwd(node, xs):
    x = xs[0]
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    out = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
    return out


def _log_softmax_bwd(node, g):
    sm = np.exp(node.value)
    return [g - sm * g.sum(axis=-1, keepdims=True)]


register_op("log_softmax", _log_softmax_fwd, _log_softmax_bwd)


def log_softmax(x):
    """Row-wise log-softmax over the last axis, max-subtraction stabilized."""
    return _node("log_softmax", [x])


def _take_rows_fwd(node, xs):
    x = xs[0]
    idx = node.attrs["indices"]
    if x.ndim != 2:
        raise ShapeError("take_rows expects a 2-d input")
    if idx.shape != (x.shape[0],):
        raise ShapeError("one index per row required")
    return x[np.arange(x.shape[0]), idx]


def _take_rows_bwd(node, g):
    x = node.inputs[0].value
    gx = np.zeros_like(x)
    gx[np.arange(x.shape[0]), node.attrs["indices"]] = g
    return [gx]


register_op("take_rows", _take_rows_fwd, _take_rows_bwd)


def take_rows(x, indices):
    """out[i] = x[i, indices[i]] for a 2-d x."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("indices must be integers")
    return _node("take_rows", [x], {"indices": idx})
