"""A small static-graph reverse-mode autodiff engine over numpy arrays.

A :class:`Graph` is built once (inputs, parameters, constants and op
nodes, each identified by an integer id) and then evaluated any number
of times with :meth:`Graph.forward`.  Evaluation never mutates the
graph: the intermediate values live in the returned
:class:`Evaluation`, which :meth:`Graph.backward` consumes.  That makes
read-only use of one trained graph from several threads safe.

All values are float64 arrays; integer label inputs are the only
exception (they feed ``softmax_nll``).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .special import digamma, log_gamma, trigamma

__all__ = [
    "Graph",
    "Node",
    "Evaluation",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "forward",
    "backward",
    "grad_wrt_input",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class GraphError(RuntimeError):
    """Base error for graph construction and evaluation problems."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"node {node}: {message}")
        self.node = node


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    name: str = None


# ops whose value is produced from bindings rather than computed
_LEAVES = ("input", "param", "const")


@dataclass
class Evaluation:
    """Values of every node visited by one forward pass."""

    graph: "Graph"
    values: dict
    masks: dict

    def __getitem__(self, node):
        return self.values[node]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Topologically ordered list of nodes plus the named parameter set."""

    def __init__(self):
        self.nodes = []
        self.params = {}
        self._param_nodes = {}
        self._input_nodes = {}
        self.outputs = {}
        self.meta = {}

    # -- construction ------------------------------------------------------

    def _add(self, op, inputs=(), name=None, **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op} refers to unknown node {i}")
        self.nodes.append(Node(op, tuple(inputs), attrs, name))
        return len(self.nodes) - 1

    def input(self, name, dtype=np.float64):
        if name in self._input_nodes:
            return self._input_nodes[name]
        node = self._add("input", name=name, dtype=dtype)
        self._input_nodes[name] = node
        return node

    def parameter(self, name, value):
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        self.params[name] = np.array(value, dtype=np.float64)
        node = self._add("param", name=name)
        self._param_nodes[name] = node
        return node

    def constant(self, value):
        return self._add("const", value=np.array(value, dtype=np.float64))

    def matmul(self, a, b):
        return self._add("matmul", (a, b))

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def multiply(self, a, b):
        return self._add("multiply", (a, b))

    def scale(self, a, factor):
        return self._add("scale", (a,), factor=float(factor))

    def exp(self, a):
        return self._add("exp", (a,))

    def log(self, a):
        return self._add("log", (a,))

    def relu(self, a):
        return self._add("relu", (a,))

    def leaky_relu(self, a, slope=0.01):
        return self._add("leaky_relu", (a,), slope=float(slope))

    def clip(self, a, lo, hi):
        return self._add("clip", (a,), lo=float(lo), hi=float(hi))

    def logsumexp(self, a, axis=-1):
        return self._add("logsumexp", (a,), axis=axis)

    def softmax(self, a):
        return self._add("softmax", (a,))

    def softmax_nll(self, logits, labels):
        """Per-row -log softmax(logits)[label]; ``labels`` is an integer input."""
        return self._add("softmax_nll", (logits, labels))

    def sum(self, a, axis=None, keepdims=False):
        return self._add("sum", (a,), axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self._add("mean", (a,), axis=axis, keepdims=keepdims)

    def digamma(self, a):
        return self._add("digamma", (a,))

    def lgamma(self, a):
        return self._add("lgamma", (a,))

    def dropout(self, a, keep):
        """Inverted dropout; ``keep`` is the probability of *keeping* a unit."""
        if not 0.0 < keep <= 1.0:
            raise GraphError(f"dropout keep-probability must be in (0, 1], got {keep}")
        return self._add("dropout", (a,), keep=float(keep))

    # -- lookup ------------------------------------------------------------

    @property
    def input_names(self):
        return list(self._input_nodes)

    def input_node(self, name):
        try:
            return self._input_nodes[name]
        except KeyError:
            raise GraphError(f"unknown input {name!r}") from None

    def param_node(self, name):
        return self._param_nodes[name]

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params):
        for name, value in params.items():
            if name not in self.params:
                raise GraphError(f"unknown parameter {name!r}")
            value = np.array(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise ShapeError(
                    f"parameter {name!r} expects shape {self.params[name].shape}, got {value.shape}"
                )
            self.params[name] = value

    # -- evaluation --------------------------------------------------------

    def _needed(self, targets):
        needed = set()
        stack = list(targets)
        while stack:
            n = stack.pop()
            if n in needed:
                continue
            if not 0 <= n < len(self.nodes):
                raise GraphError(f"unknown node {n}")
            needed.add(n)
            stack.extend(self.nodes[n].inputs)
        return sorted(needed)

    def forward(self, inputs, outputs=None, params=None, rng=None):
        """Evaluate the graph.

        ``outputs`` restricts evaluation to the ancestors of those nodes
        (default: every node).  ``params`` overrides individual parameter
        values without touching the graph.  Dropout is active only when an
        ``rng`` is supplied.
        """
        order = range(len(self.nodes)) if outputs is None else self._needed(outputs)
        values = {}
        masks = {}
        for n in order:
            node = self.nodes[n]
            if node.op == "input":
                if node.name not in inputs:
                    raise GraphError(f"input {node.name!r} is not bound", n)
                value = np.asarray(inputs[node.name], dtype=node.attrs["dtype"])
            elif node.op == "param":
                source = params if params is not None and node.name in params else self.params
                value = np.asarray(source[node.name], dtype=np.float64)
            elif node.op == "const":
                value = node.attrs["value"]
            else:
                args = [values[i] for i in node.inputs]
                try:
                    # non-finite results are reported below with the node id
                    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                        value = self._apply(n, node, args, masks, rng)
                except ValueError as exc:
                    raise ShapeError(f"{node.op}: {exc}", n) from None
            if value.dtype.kind == "f" and not np.all(np.isfinite(value)):
                raise NonFiniteError(f"{node.op} produced a non-finite value", n)
            values[n] = value
        return Evaluation(self, values, masks)

    def _apply(self, n, node, args, masks, rng):
        op = node.op
        a = node.attrs
        if op == "matmul":
            x, w = args
            if x.ndim > 2 or w.ndim > 2:
                raise ValueError("matmul supports operands of rank <= 2")
            if x.shape[-1] != w.shape[0]:
                raise ValueError(f"cannot multiply {x.shape} by {w.shape}")
            return x @ w
        if op == "add":
            return args[0] + args[1]
        if op == "sub":
            return args[0] - args[1]
        if op == "multiply":
            return args[0] * args[1]
        if op == "scale":
            return args[0] * a["factor"]
        if op == "exp":
            return np.exp(args[0])
        if op == "log":
            return np.log(args[0])
        if op == "relu":
            return np.maximum(args[0], 0.0)
        if op == "leaky_relu":
            x = args[0]
            return np.where(x > 0, x, a["slope"] * x)
        if op == "clip":
            return np.clip(args[0], a["lo"], a["hi"])
        if op == "logsumexp":
            return _logsumexp(args[0], a["axis"])
        if op == "softmax":
            return _softmax(args[0])
        if op == "softmax_nll":
            logits, labels = args
            if logits.ndim != 2 or labels.shape != logits.shape[:1]:
                raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
            if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
                raise ValueError("label out of range")
            lse = _logsumexp(logits, -1)
            return lse - logits[np.arange(len(labels)), labels]
        if op == "sum":
            return np.asarray(np.sum(args[0], axis=a["axis"], keepdims=a["keepdims"]))
        if op == "mean":
            return np.asarray(np.mean(args[0], axis=a["axis"], keepdims=a["keepdims"]))
        if op == "digamma":
            return np.asarray(digamma(args[0]))
        if op == "lgamma":
            return np.asarray(log_gamma(args[0]))
        if op == "dropout":
            x = args[0]
            if rng is None or a["keep"] == 1.0:
                return x
            mask = (rng.random(x.shape) < a["keep"]) / a["keep"]
            masks[n] = mask
            return x * mask
        raise GraphError(f"unknown op {op!r}", n)

    def backward(self, evaluation, root):
        """Gradients of scalar node ``root`` w.r.t. every parameter and float input.

        Returns a dict keyed by parameter / input name.
        """
        if evaluation.graph is not self:
            raise GraphError("evaluation belongs to a different graph")
        values = evaluation.values
        if root not in values:
            raise GraphError("root was not visited by the forward pass", root)
        if values[root].size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {values[root].shape}", root)

        grads = {root: np.ones_like(values[root])}
        for n in sorted(values, reverse=True):
            if n not in grads:
                continue
            node = self.nodes[n]
            if node.op in _LEAVES:
                continue
            for i in node.inputs:
                if i not in values:
                    raise GraphError("input was not visited by the forward pass", i)
            local = self._vjp(n, node, grads[n], values, evaluation.masks)
            for i, g in zip(node.inputs, local):
                if g is None:
                    continue
                grads[i] = grads[i] + g if i in grads else g

        out = {}
        for name, n in self._param_nodes.items():
            if n in values:
                out[name] = grads.get(n, np.zeros_like(values[n]))
        for name, n in self._input_nodes.items():
            if n in values and values[n].dtype.kind == "f":
                out[name] = grads.get(n, np.zeros_like(values[n]))
        return out

    def _vjp(self, n, node, g, values, masks):
        op = node.op
        a = node.attrs
        args = [values[i] for i in node.inputs]
        y = values[n]
        if op == "matmul":
            x, w = args
            if x.ndim == 2 and w.ndim == 2:
                return g @ w.T, x.T @ g
            if x.ndim == 1 and w.ndim == 2:
                return w @ g, np.outer(x, g)
            if x.ndim == 2:
                return np.outer(g, w), x.T @ g
            return g * w, g * x
        if op == "add":
            return _unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)
        if op == "sub":
            return _unbroadcast(g, args[0].shape), _unbroadcast(-g, args[1].shape)
        if op == "multiply":
            return (_unbroadcast(g * args[1], args[0].shape),
                    _unbroadcast(g * args[0], args[1].shape))
        if op == "scale":
            return (g * a["factor"],)
        if op == "exp":
            return (g * y,)
        if op == "log":
            return (g / args[0],)
        if op == "relu":
            return (g * (args[0] > 0),)
        if op == "leaky_relu":
            return (g * np.where(args[0] > 0, 1.0, a["slope"]),)
        if op == "clip":
            x = args[0]
            return (g * ((x >= a["lo"]) & (x <= a["hi"])),)
        if op == "logsumexp":
            axis = a["axis"]
            return (np.expand_dims(g, axis) * np.exp(args[0] - np.expand_dims(y, axis)),)
        if op == "softmax":
            return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)
        if op == "softmax_nll":
            logits, labels = args
            p = _softmax(logits)
            p[np.arange(len(labels)), labels] -= 1.0
            return g[:, None] * p, None
        if op in ("sum", "mean"):
            x = args[0]
            axis = a["axis"]
            if axis is not None and not a["keepdims"]:
                g = np.expand_dims(g, axis)
            g = np.broadcast_to(g, x.shape).copy()
            if op == "mean":
                g /= x.size / y.size
            return (g,)
        if op == "digamma":
            return (g * trigamma(args[0]),)
        if op == "lgamma":
            return (g * digamma(args[0]),)
        if op == "dropout":
            mask = masks.get(n)
            return (g if mask is None else g * mask,)
        raise GraphError(f"no gradient rule for op {op!r}", n)


def _logsumexp(x, axis):
    shift = np.max(x, axis=axis, keepdims=True)
    out = shift + np.log(np.sum(np.exp(x - shift), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _softmax(x):
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- functional front-end --------------------------------------------------


def forward(graph, inputs, outputs=None, **kwargs):
    return graph.forward(inputs, outputs=outputs, **kwargs)


def backward(graph, evaluation, root):
    return graph.backward(evaluation, root)


def grad_wrt_input(graph, evaluation, loss_node, input_name):
    """Gradient of ``loss_node`` with respect to the named input."""
    node = graph.input_node(input_name)
    if node not in evaluation.values:
        raise GraphError(f"input {input_name!r} does not influence the evaluated nodes")
    return graph.backward(evaluation, loss_node)[input_name]


def finite_diff_check(graph, point, root, h=1e-5, wrt=None):
    """Worst relative error between backprop and central differences.

    ``point`` binds every graph input.  All parameters and float inputs
    (or just the names in ``wrt``) are perturbed one element at a time.
    Errors are scaled per tensor: max |a - b| over the tensor divided by
    max(|a|, |b|, 1e-8) over the same tensor.  An element-wise ratio
    would mostly measure the rounding noise of the difference quotient on
    elements whose gradient is close to zero.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be > 0, got {h}")
    params = graph.copy_params()
    inputs = {k: np.array(v) for k, v in point.items()}
    analytic = graph.backward(graph.forward(inputs, [root], params=params), root)
    names = list(analytic) if wrt is None else list(wrt)

    def f():
        return float(graph.forward(inputs, [root], params=params)[root].reshape(()))

    worst = 0.0
    for name in names:
        target = params[name] if name in params else inputs[name]
        flat = target.reshape(-1)
        grad = analytic[name].reshape(-1)
        numeric = np.empty_like(grad)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f()
            flat[j] = orig - h
            down = f()
            flat[j] = orig
            numeric[j] = (up - down) / (2 * h)
        if grad.size:
            scale = max(np.max(np.abs(grad)), np.max(np.abs(numeric)), 1e-8)
            worst = max(worst, float(np.max(np.abs(numeric - grad))) / scale)
    return worst


# -- checkpoint file -------------------------------------------------------

_MAGIC = b"DPN1"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params):
    """Write named float64 arrays in the little-endian DPN1 layout."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for name, value in params.items():
            value = np.asarray(value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    params = {}
    for _ in range(count):
        (length,) = take("<I")
        if pos + length > len(data):
            raise CheckpointError(f"{path}: truncated parameter name")
        name = data[pos:pos + length].decode("utf-8")
        pos += length
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if pos + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return params
