"""
Minimal reverse-mode automatic differentiation over dense float64 arrays.

A CompGraph is built once (leaves plus operation nodes, append-only so creation
order is a topological order) and can be evaluated any number of times.
Parameters are named leaves; constants never receive gradients.

Supported vocabulary: matmul, add/sub/mul/div, bias add, scalar add/scale, ReLU,
tanh, square, reshape, transpose, sum/mean, diag, outer, row-wise log-softmax
(probabilities clamped at 1e-12), negative log-likelihood, and the batch
statistics col_mean, col_norm and center_cols.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.tensor import ParamSet, Tensor
from core.types import ContractError, NumericError, StructuralError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

Shape = Tuple[int, ...]


class Node:
    """One vertex of a CompGraph: a leaf (param/const) or an operation over parent nodes."""

    __slots__ = ("graph", "index", "op", "parents", "attrs", "name", "requires_grad", "shape")

    def __init__(self, graph: "CompGraph", index: int, op: str, parents: Tuple["Node", ...],
                 attrs: dict, name: Optional[str], requires_grad: bool, shape: Shape):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.name = name
        self.requires_grad = requires_grad
        self.shape = shape

    def label(self) -> str:
        suffix = f" '{self.name}'" if self.name else ""
        return f"#{self.index} {self.op}{suffix}"

    def __repr__(self) -> str:
        return f"Node({self.label()}, shape={self.shape})"


# =============================================================================
# OPERATION RULES
# =============================================================================

class Op:
    """
    Forward/backward rule for one node type.

    infer() validates parent shapes and returns the output shape; forward() maps
    parent arrays to the output; backward() maps dL/d(out) to dL/d(parent) for
    every parent (None where no gradient is defined).
    """
    arity = 1

    @staticmethod
    def infer(shapes: List[Shape], attrs: dict) -> Shape:
        raise NotImplementedError

    @staticmethod
    def forward(xs: List[np.ndarray], attrs: dict) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(g: np.ndarray, xs: List[np.ndarray], out: np.ndarray, attrs: dict) -> List[Optional[np.ndarray]]:
        raise NotImplementedError


def _same(shapes: List[Shape], what: str) -> Shape:
    if shapes[0] != shapes[1]:
        raise StructuralError(f"{what} needs equal shapes, got {shapes[0]} and {shapes[1]}")
    return shapes[0]


def _rank(shape: Shape, rank: int, what: str) -> None:
    if len(shape) != rank:
        raise StructuralError(f"{what} needs a rank-{rank} input, got shape {shape}")


class MatMul(Op):
    arity = 2

    @staticmethod
    def infer(shapes, attrs):
        a, b = shapes
        _rank(a, 2, "matmul")
        _rank(b, 2, "matmul")
        if a[1] != b[0]:
            raise StructuralError(f"matmul inner dimensions differ: {a} @ {b}")
        return (a[0], b[1])

    @staticmethod
    def forward(xs, attrs):
        return xs[0] @ xs[1]

    @staticmethod
    def backward(g, xs, out, attrs):
        a, b = xs
        return [g @ b.T, a.T @ g]


class Add(Op):
    arity = 2

    @staticmethod
    def infer(shapes, attrs):
        return _same(shapes, "add")

    @staticmethod
    def forward(xs, attrs):
        return xs[0] + xs[1]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g, g]


class Sub(Op):
    arity = 2

    @staticmethod
    def infer(shapes, attrs):
        return _same(shapes, "sub")

    @staticmethod
    def forward(xs, attrs):
        return xs[0] - xs[1]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g, -g]


class Mul(Op):
    arity = 2

    @staticmethod
    def infer(shapes, attrs):
        return _same(shapes, "mul")

    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[1]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g * xs[1], g * xs[0]]


class Div(Op):
    arity = 2

    @staticmethod
    def infer(shapes, attrs):
        return _same(shapes, "div")

    @staticmethod
    def forward(xs, attrs):
        return xs[0] / xs[1]

    @staticmethod
    def backward(g, xs, out, attrs):
        a, b = xs
        return [g / b, -g * a / (b * b)]


class BiasAdd(Op):
    arity = 2

    @staticmethod
    def infer(shapes, attrs):
        x, b = shapes
        _rank(x, 2, "bias_add")
        _rank(b, 1, "bias_add bias")
        if x[1] != b[0]:
            raise StructuralError(f"bias of width {b[0]} added to rows of width {x[1]}")
        return x

    @staticmethod
    def forward(xs, attrs):
        return xs[0] + xs[1]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g, g.sum(axis=0)]


class AddScalar(Op):
    @staticmethod
    def infer(shapes, attrs):
        return shapes[0]

    @staticmethod
    def forward(xs, attrs):
        return xs[0] + attrs["c"]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g]


class Scale(Op):
    @staticmethod
    def infer(shapes, attrs):
        return shapes[0]

    @staticmethod
    def forward(xs, attrs):
        return attrs["c"] * xs[0]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [attrs["c"] * g]


class Relu(Op):
    @staticmethod
    def infer(shapes, attrs):
        return shapes[0]

    @staticmethod
    def forward(xs, attrs):
        return np.maximum(xs[0], 0.0)

    @staticmethod
    def backward(g, xs, out, attrs):
        # subgradient 0 at the kink
        return [g * (xs[0] > 0.0)]


class Tanh(Op):
    @staticmethod
    def infer(shapes, attrs):
        return shapes[0]

    @staticmethod
    def forward(xs, attrs):
        return np.tanh(xs[0])

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g * (1.0 - out * out)]


class Square(Op):
    @staticmethod
    def infer(shapes, attrs):
        return shapes[0]

    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[0]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [2.0 * xs[0] * g]


class Reshape(Op):
    @staticmethod
    def infer(shapes, attrs):
        src = shapes[0]
        target = tuple(attrs["shape"])
        size = int(np.prod(src, dtype=np.int64))
        if target.count(-1) > 1:
            raise StructuralError(f"reshape target {target} has more than one -1")
        if -1 in target:
            known = int(np.prod([d for d in target if d != -1], dtype=np.int64))
            if known == 0 or size % known:
                raise StructuralError(f"cannot reshape {src} to {target}")
            target = tuple(size // known if d == -1 else d for d in target)
        if int(np.prod(target, dtype=np.int64)) != size:
            raise StructuralError(f"cannot reshape {src} to {target}")
        return target

    @staticmethod
    def forward(xs, attrs):
        return xs[0].reshape(attrs["resolved"])

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g.reshape(xs[0].shape)]


class Transpose(Op):
    @staticmethod
    def infer(shapes, attrs):
        _rank(shapes[0], 2, "transpose")
        return (shapes[0][1], shapes[0][0])

    @staticmethod
    def forward(xs, attrs):
        return xs[0].T.copy()

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g.T]


class Sum(Op):
    @staticmethod
    def infer(shapes, attrs):
        return ()

    @staticmethod
    def forward(xs, attrs):
        return np.asarray(xs[0].sum())

    @staticmethod
    def backward(g, xs, out, attrs):
        return [np.full(xs[0].shape, float(g))]


class Mean(Op):
    @staticmethod
    def infer(shapes, attrs):
        return ()

    @staticmethod
    def forward(xs, attrs):
        return np.asarray(xs[0].sum() / xs[0].size)

    @staticmethod
    def backward(g, xs, out, attrs):
        return [np.full(xs[0].shape, float(g) / xs[0].size)]


class Diag(Op):
    @staticmethod
    def infer(shapes, attrs):
        s = shapes[0]
        _rank(s, 2, "diag")
        if s[0] != s[1]:
            raise StructuralError(f"diag needs a square matrix, got {s}")
        return (s[0],)

    @staticmethod
    def forward(xs, attrs):
        return np.diagonal(xs[0]).copy()

    @staticmethod
    def backward(g, xs, out, attrs):
        return [np.diag(g)]


class Outer(Op):
    arity = 2

    @staticmethod
    def infer(shapes, attrs):
        _rank(shapes[0], 1, "outer")
        _rank(shapes[1], 1, "outer")
        return (shapes[0][0], shapes[1][0])

    @staticmethod
    def forward(xs, attrs):
        return np.outer(xs[0], xs[1])

    @staticmethod
    def backward(g, xs, out, attrs):
        a, b = xs
        return [g @ b, g.T @ a]


class LogSoftmax(Op):
    @staticmethod
    def infer(shapes, attrs):
        _rank(shapes[0], 2, "log_softmax")
        return shapes[0]

    @staticmethod
    def _probs(x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    @staticmethod
    def forward(xs, attrs):
        return np.log(np.maximum(LogSoftmax._probs(xs[0]), PROB_FLOOR))

    @staticmethod
    def backward(g, xs, out, attrs):
        p = LogSoftmax._probs(xs[0])
        live = g * (p >= PROB_FLOOR)
        return [live - p * live.sum(axis=1, keepdims=True)]


class Nll(Op):
    @staticmethod
    def infer(shapes, attrs):
        s = shapes[0]
        _rank(s, 2, "nll")
        labels = attrs["labels"]
        if labels.shape != (s[0],):
            raise StructuralError(f"nll got {labels.shape[0]} labels for a batch of {s[0]}")
        return ()

    @staticmethod
    def forward(xs, attrs):
        labels = attrs["labels"]
        picked = xs[0][np.arange(labels.size), labels]
        return np.asarray(-picked.sum() / labels.size)

    @staticmethod
    def backward(g, xs, out, attrs):
        labels = attrs["labels"]
        grad = np.zeros_like(xs[0])
        grad[np.arange(labels.size), labels] = -float(g) / labels.size
        return [grad]


class ColMean(Op):
    @staticmethod
    def infer(shapes, attrs):
        _rank(shapes[0], 2, "col_mean")
        return (shapes[0][1],)

    @staticmethod
    def forward(xs, attrs):
        return xs[0].sum(axis=0) / xs[0].shape[0]

    @staticmethod
    def backward(g, xs, out, attrs):
        n = xs[0].shape[0]
        return [np.broadcast_to(g / n, xs[0].shape).copy()]


class ColNorm(Op):
    @staticmethod
    def infer(shapes, attrs):
        _rank(shapes[0], 2, "col_norm")
        return (shapes[0][1],)

    @staticmethod
    def forward(xs, attrs):
        return np.sqrt((xs[0] * xs[0]).sum(axis=0))

    @staticmethod
    def backward(g, xs, out, attrs):
        # zero-norm columns get zero gradient
        safe = np.where(out > 0.0, out, 1.0)
        return [xs[0] * np.where(out > 0.0, g / safe, 0.0)]


class CenterCols(Op):
    @staticmethod
    def infer(shapes, attrs):
        _rank(shapes[0], 2, "center_cols")
        return shapes[0]

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return x - x.sum(axis=0) / x.shape[0]

    @staticmethod
    def backward(g, xs, out, attrs):
        return [g - g.sum(axis=0) / g.shape[0]]


OPS: Dict[str, type] = {
    "matmul": MatMul, "add": Add, "sub": Sub, "mul": Mul, "div": Div,
    "bias_add": BiasAdd, "add_scalar": AddScalar, "scale": Scale,
    "relu": Relu, "tanh": Tanh, "square": Square, "reshape": Reshape,
    "transpose": Transpose, "sum": Sum, "mean": Mean, "diag": Diag, "outer": Outer,
    "log_softmax": LogSoftmax, "nll": Nll,
    "col_mean": ColMean, "col_norm": ColNorm, "center_cols": CenterCols,
}

LEAF_OPS = ("param", "const")


# =============================================================================
# GRAPH
# =============================================================================

class CompGraph:
    """
    Append-only computation graph.

    Attributes:
        nodes: All nodes in creation (= topological) order
        params: Parameter leaves by name, in declaration order
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.params: Dict[str, Node] = {}
        self._leaf_values: Dict[int, np.ndarray] = {}
        self._values: Optional[Dict[int, np.ndarray]] = None

    # -------------------------------------------------------------------------
    # Leaves
    # -------------------------------------------------------------------------

    def param(self, name: str, value: Tensor) -> Node:
        """Declare a trainable leaf; backward() reports a gradient for it under name."""
        if name in self.params:
            raise StructuralError(f"parameter '{name}' declared twice")
        node = self._leaf("param", value, name, requires_grad=True)
        self.params[name] = node
        return node

    def const(self, value: Union[Tensor, np.ndarray, float], name: Optional[str] = None) -> Node:
        """Declare a constant leaf; gradients never flow into it."""
        return self._leaf("const", value, name, requires_grad=False)

    def bind(self, name: str, value: Tensor) -> None:
        """Rebind a parameter leaf to a new value (shape is re-checked on evaluation)."""
        if name not in self.params:
            raise StructuralError(f"unknown parameter '{name}'")
        self._leaf_values[self.params[name].index] = _as_array(value)
        self._values = None

    def _leaf(self, op: str, value, name: Optional[str], requires_grad: bool) -> Node:
        array = _as_array(value)
        node = Node(self, len(self.nodes), op, (), {}, name, requires_grad, array.shape)
        self.nodes.append(node)
        self._leaf_values[node.index] = array
        return node

    # -------------------------------------------------------------------------
    # Operation builders
    # -------------------------------------------------------------------------

    def _apply(self, op: str, *parents: Node, name: Optional[str] = None, **attrs) -> Node:
        for p in parents:
            if p.graph is not self:
                raise StructuralError(f"node {p.label()} belongs to another graph")
        rule = OPS[op]
        index = len(self.nodes)
        try:
            shape = rule.infer([p.shape for p in parents], attrs)
        except StructuralError as exc:
            raise StructuralError(f"node #{index} {op}: {exc}") from None
        if op == "reshape":
            attrs["resolved"] = shape
        node = Node(self, index, op, parents, attrs, name,
                    any(p.requires_grad for p in parents), tuple(shape))
        self.nodes.append(node)
        self._values = None
        return node

    def matmul(self, a: Node, b: Node) -> Node:
        return self._apply("matmul", a, b)

    def add(self, a: Node, b: Node) -> Node:
        return self._apply("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self._apply("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._apply("mul", a, b)

    def div(self, a: Node, b: Node) -> Node:
        return self._apply("div", a, b)

    def bias_add(self, x: Node, b: Node) -> Node:
        return self._apply("bias_add", x, b)

    def add_scalar(self, x: Node, c: float) -> Node:
        return self._apply("add_scalar", x, c=float(c))

    def scale(self, x: Node, c: float) -> Node:
        return self._apply("scale", x, c=float(c))

    def relu(self, x: Node) -> Node:
        return self._apply("relu", x)

    def tanh(self, x: Node) -> Node:
        return self._apply("tanh", x)

    def square(self, x: Node) -> Node:
        return self._apply("square", x)

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        return self._apply("reshape", x, shape=tuple(int(d) for d in shape))

    def transpose(self, x: Node) -> Node:
        return self._apply("transpose", x)

    def sum(self, x: Node) -> Node:
        return self._apply("sum", x)

    def mean(self, x: Node) -> Node:
        return self._apply("mean", x)

    def diag(self, x: Node) -> Node:
        return self._apply("diag", x)

    def outer(self, a: Node, b: Node) -> Node:
        return self._apply("outer", a, b)

    def log_softmax(self, x: Node) -> Node:
        return self._apply("log_softmax", x)

    def nll(self, log_probs: Node, labels: Sequence[int]) -> Node:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if log_probs.shape and len(log_probs.shape) == 2:
            n_cols = log_probs.shape[1]
            if labels.size and (labels.min() < 0 or labels.max() >= n_cols):
                raise ContractError(f"labels must lie in [0, {n_cols}), got range "
                                    f"[{labels.min()}, {labels.max()}]")
        return self._apply("nll", log_probs, labels=labels)

    def col_mean(self, x: Node) -> Node:
        return self._apply("col_mean", x)

    def col_norm(self, x: Node) -> Node:
        return self._apply("col_norm", x)

    def center_cols(self, x: Node) -> Node:
        return self._apply("center_cols", x)

    # -------------------------------------------------------------------------
    # Evaluation
    # -------------------------------------------------------------------------

    def forward(self, root: Optional[Node] = None) -> Dict[int, np.ndarray]:
        """Compute every node up to root (default: the last node) and cache the values."""
        if not self.nodes:
            raise StructuralError("cannot evaluate an empty graph")
        last = (root if root is not None else self.nodes[-1]).index
        values: Dict[int, np.ndarray] = {}
        for node in self.nodes[:last + 1]:
            if node.op in LEAF_OPS:
                out = self._leaf_values[node.index]
            else:
                xs = [values[p.index] for p in node.parents]
                rule = OPS[node.op]
                try:
                    expected = tuple(rule.infer([x.shape for x in xs], node.attrs))
                except StructuralError as exc:
                    raise StructuralError(f"node {node.label()}: {exc}") from None
                out = np.asarray(rule.forward(xs, node.attrs), dtype=np.float64)
                if out.shape != expected:
                    raise StructuralError(f"node {node.label()} produced {out.shape}, expected {expected}")
            if not np.isfinite(out).all():
                raise NumericError(f"non-finite value at node {node.label()}")
            values[node.index] = out
        self._values = values
        return values

    def value(self, node: Node) -> Tensor:
        """Value of a node from the most recent forward pass."""
        if self._values is None or node.index not in self._values:
            self.forward(node)
        return Tensor(self._values[node.index])


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.array
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


# =============================================================================
# PUBLIC OPERATIONS
# =============================================================================

def evaluate(graph: CompGraph, root: Optional[Node] = None) -> Tensor:
    """
    Evaluate graph and return the value of root (default: the last node).

    Raises:
        StructuralError: A node sees incompatible parent shapes
        NumericError: A node produced NaN or Inf
    """
    if not graph.nodes:
        raise StructuralError("cannot evaluate an empty graph")
    node = root if root is not None else graph.nodes[-1]
    values = graph.forward(node)
    return Tensor(values[node.index])


def backward(graph: CompGraph, root: Node) -> ParamSet:
    """
    Reverse-mode gradients of a scalar root with respect to every parameter leaf.

    Parameters unreachable from root receive zero gradients of matching shape.

    Returns:
        ParamSet of gradients, in parameter declaration order

    Raises:
        ContractError: root is not scalar-valued
    """
    if int(np.prod(root.shape, dtype=np.int64)) != 1:
        raise ContractError(f"backward needs a scalar root, {root.label()} has shape {root.shape}")
    values = graph.forward(root)
    grads: Dict[int, np.ndarray] = {root.index: np.ones(root.shape, dtype=np.float64)}
    param_grads: Dict[str, np.ndarray] = {}

    for node in reversed(graph.nodes[:root.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.op == "param":
            param_grads[node.name] = g
            continue
        if node.op == "const":
            continue
        xs = [values[p.index] for p in node.parents]
        parent_grads = OPS[node.op].backward(g, xs, values[node.index], node.attrs)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(values[parent.index].shape)
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg

    out = []
    for name, leaf in graph.params.items():
        g = param_grads.get(name)
        if g is None:
            out.append((name, Tensor.zeros(leaf.shape)))
        else:
            out.append((name, Tensor(g)))
    return ParamSet(out)


def finite_diff_grad(f: Callable[[ParamSet], float], params: ParamSet, eps: float = 1e-5) -> ParamSet:
    """
    Central-difference gradient oracle: (f(w + eps e) - f(w - eps e)) / 2 eps per coordinate.

    At kinks (e.g. |w| at 0) the symmetric difference reports the average slope.
    """
    if eps <= 0:
        raise ContractError(f"finite-difference step must be positive, got {eps}")
    out = []
    for name in params:
        base = params[name].array
        grad = np.zeros(base.shape, dtype=np.float64)
        flat = grad.reshape(-1)
        for i in range(base.size):
            bumped = base.reshape(-1).copy()
            bumped[i] += eps
            f_plus = f(params.replace(ParamSet([(name, Tensor(bumped, shape=base.shape))])))
            bumped[i] -= 2.0 * eps
            f_minus = f(params.replace(ParamSet([(name, Tensor(bumped, shape=base.shape))])))
            flat[i] = (f_plus - f_minus) / (2.0 * eps)
        out.append((name, Tensor(grad)))
    return ParamSet(out)


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """Return w - lr * g for every entry; inputs are left untouched."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    params.require_compatible(grads, "sgd_step")
    return ParamSet((name, Tensor.wrap(params[name].array - lr * grads[name].array)) for name in params)
