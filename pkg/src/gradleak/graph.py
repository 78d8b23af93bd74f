"""Expression-graph reverse-mode differentiation, closed under itself.

A graph is an append-only list of nodes; every node's inputs have smaller
ids, so ascending id order is already a topological order. `grad` walks the
consumers of a scalar output in reverse and emits the adjoint of each node
as *new nodes in the same graph*. Because every derivative rule is written
in terms of registered primitives, the result of `grad` can be fed straight
back into `grad`, which is how the attack differentiates through a gradient
(its update needs the derivative of a gradient-matching distance whose value
already contains first-order gradients).

Shapes are static: builders infer and check them at construction time, so a
mis-wired model fails when it is assembled, not mid-evaluation.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels as k
from .errors import CapabilityError, ContractError, GeometryError, ShapeError
from .ops import conv_output_size
from .tensor import Shape, Tensor, as_array

# node id within a graph
NodeId = int


class _Node:
    __slots__ = ("op", "inputs", "shape", "params", "payload")

    def __init__(self, op: str, inputs: tuple[NodeId, ...], shape: Shape,
                 params: tuple = (), payload: np.ndarray | None = None):
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.params = params
        self.payload = payload


# op -> (node, input arrays) -> output array
_EVAL: dict[str, Callable] = {}
# op -> (graph, node id, upstream id) -> [(input position, contribution id)]
_VJP: dict[str, Callable] = {}


class ExprGraph:
    """Append-only expression graph over float64 arrays with one scalar output."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._vars: dict[str, NodeId] = {}
        self._output: NodeId | None = None
        self._plans: dict[tuple[NodeId, ...], list[NodeId]] = {}

    # ------------------------------------------------------------------ basics

    def __len__(self) -> int:
        return len(self._nodes)

    def node(self, nid: NodeId) -> _Node:
        return self._nodes[nid]

    def shape_of(self, nid: NodeId) -> Shape:
        return self._nodes[nid].shape

    def op_of(self, nid: NodeId) -> str:
        return self._nodes[nid].op

    @property
    def output(self) -> NodeId:
        if self._output is None:
            raise ContractError("graph has no designated output node")
        return self._output

    def set_output(self, nid: NodeId) -> NodeId:
        if self._nodes[nid].shape != ():
            raise ContractError(
                f"output node must be scalar, node {nid} has shape {self._nodes[nid].shape}"
            )
        self._output = nid
        return nid

    def variables(self) -> Mapping[str, NodeId]:
        return dict(self._vars)

    def _append(self, op: str, inputs: tuple[NodeId, ...], shape: Shape,
                params: tuple = (), payload: np.ndarray | None = None) -> NodeId:
        for i in inputs:
            if not 0 <= i < len(self._nodes):
                raise ContractError(f"{op}: input id {i} is not a node of this graph")
        self._nodes.append(_Node(op, inputs, shape, params, payload))
        return len(self._nodes) - 1

    # ------------------------------------------------------------------ leaves

    def constant(self, value) -> NodeId:
        arr = np.array(as_array(value), dtype=np.float64, order="C", copy=True)
        arr.flags.writeable = False
        return self._append("const", (), arr.shape, payload=arr)

    def variable(self, name: str, shape: Iterable[int]) -> NodeId:
        if name in self._vars:
            raise ContractError(f"variable {name!r} already exists in this graph")
        dims = tuple(int(d) for d in shape)
        if any(d <= 0 for d in dims):
            raise ShapeError(f"variable {name!r} has invalid shape {dims}")
        nid = self._append("var", (), dims, params=(name,))
        self._vars[name] = nid
        return nid

    # -------------------------------------------------------- elementwise alg.

    def _same_shape(self, op: str, a: NodeId, b: NodeId) -> Shape:
        sa, sb = self.shape_of(a), self.shape_of(b)
        if sa != sb:
            raise ShapeError(f"{op}: operand shapes {sa} and {sb} differ")
        return sa

    def add(self, a: NodeId, b: NodeId) -> NodeId:
        return self._append("add", (a, b), self._same_shape("add", a, b))

    def sub(self, a: NodeId, b: NodeId) -> NodeId:
        return self._append("sub", (a, b), self._same_shape("sub", a, b))

    def mul(self, a: NodeId, b: NodeId) -> NodeId:
        return self._append("mul", (a, b), self._same_shape("mul", a, b))

    def neg(self, a: NodeId) -> NodeId:
        return self._append("neg", (a,), self.shape_of(a))

    def scale(self, a: NodeId, c: float) -> NodeId:
        return self._append("scale", (a,), self.shape_of(a), params=(float(c),))

    def exp(self, a: NodeId) -> NodeId:
        return self._append("exp", (a,), self.shape_of(a))

    def log(self, a: NodeId) -> NodeId:
        return self._append("log", (a,), self.shape_of(a))

    def reciprocal(self, a: NodeId) -> NodeId:
        return self._append("reciprocal", (a,), self.shape_of(a))

    def sigmoid(self, a: NodeId) -> NodeId:
        return self._append("sigmoid", (a,), self.shape_of(a))

    def relu(self, a: NodeId) -> NodeId:
        return self._append("relu", (a,), self.shape_of(a))

    def step(self, a: NodeId) -> NodeId:
        # 1 where a > 0 else 0; derivative defined as 0 everywhere
        return self._append("step", (a,), self.shape_of(a))

    def stop_grad(self, a: NodeId) -> NodeId:
        return self._append("stop_grad", (a,), self.shape_of(a))

    # ------------------------------------------------------------- reductions

    def sum_all(self, a: NodeId) -> NodeId:
        return self._append("sum_all", (a,), ())

    def max_all(self, a: NodeId) -> NodeId:
        # no derivative rule on purpose; use behind stop_grad only
        return self._append("max_all", (a,), ())

    def fill(self, scalar: NodeId, shape: Iterable[int]) -> NodeId:
        if self.shape_of(scalar) != ():
            raise ShapeError(
                f"fill: source must be scalar, got shape {self.shape_of(scalar)}"
            )
        dims = tuple(int(d) for d in shape)
        return self._append("fill", (scalar,), dims, params=(dims,))

    def reshape(self, a: NodeId, shape: Iterable[int]) -> NodeId:
        dims = tuple(int(d) for d in shape)
        if math.prod(dims) != math.prod(self.shape_of(a)):
            raise ShapeError(
                f"reshape: cannot view shape {self.shape_of(a)} as {dims}"
            )
        return self._append("reshape", (a,), dims, params=(dims,))

    # ----------------------------------------------------------- linear algebra

    def matvec(self, w: NodeId, x: NodeId) -> NodeId:
        sw, sx = self.shape_of(w), self.shape_of(x)
        if len(sw) != 2 or len(sx) != 1 or sw[1] != sx[0]:
            raise ShapeError(f"matvec: weight {sw} does not act on vector {sx}")
        return self._append("matvec", (w, x), (sw[0],))

    def matvec_t(self, w: NodeId, y: NodeId) -> NodeId:
        sw, sy = self.shape_of(w), self.shape_of(y)
        if len(sw) != 2 or len(sy) != 1 or sw[0] != sy[0]:
            raise ShapeError(f"matvec_t: weight {sw} transposed does not act on vector {sy}")
        return self._append("matvec_t", (w, y), (sw[1],))

    def outer(self, u: NodeId, v: NodeId) -> NodeId:
        su, sv = self.shape_of(u), self.shape_of(v)
        if len(su) != 1 or len(sv) != 1:
            raise ShapeError(f"outer: needs two vectors, got {su} and {sv}")
        return self._append("outer", (u, v), (su[0], sv[0]))

    # ------------------------------------------------------------ spatial ops

    def _spatial(self, op: str, a: NodeId) -> Shape:
        s = self.shape_of(a)
        if len(s) != 3:
            raise ShapeError(f"{op}: input must be HxWxC, got shape {s}")
        return s

    def pad2d(self, a: NodeId, p: int) -> NodeId:
        h, w, c = self._spatial("pad2d", a)
        if p < 0:
            raise GeometryError(f"pad2d: negative padding {p}")
        return self._append("pad2d", (a,), (h + 2 * p, w + 2 * p, c), params=(p,))

    def crop2d(self, a: NodeId, p: int) -> NodeId:
        h, w, c = self._spatial("crop2d", a)
        if p < 0 or h - 2 * p < 1 or w - 2 * p < 1:
            raise GeometryError(f"crop2d: margin {p} leaves no pixels of {(h, w)}")
        return self._append("crop2d", (a,), (h - 2 * p, w - 2 * p, c), params=(p,))

    def corr2d(self, x: NodeId, kernel: NodeId) -> NodeId:
        sx = self._spatial("corr2d", x)
        sk = self.shape_of(kernel)
        if len(sk) != 4 or sk[0] != sk[1]:
            raise ShapeError(f"corr2d: kernel must be kxkxCxD, got shape {sk}")
        if sk[2] != sx[2]:
            raise ShapeError(
                f"corr2d: kernel expects {sk[2]} input channels, input has {sx[2]}"
            )
        oh = conv_output_size(sx[0], sk[0], 1, 0)
        ow = conv_output_size(sx[1], sk[0], 1, 0)
        return self._append("corr2d", (x, kernel), (oh, ow, sk[3]))

    def kgrad_corr(self, x: NodeId, dy: NodeId) -> NodeId:
        sx = self._spatial("kgrad_corr", x)
        sy = self._spatial("kgrad_corr", dy)
        kh = sx[0] - sy[0] + 1
        kw = sx[1] - sy[1] + 1
        if kh < 1 or kw < 1:
            raise ShapeError(f"kgrad_corr: output grid {sy} larger than input {sx}")
        return self._append("kgrad_corr", (x, dy), (kh, kw, sx[2], sy[2]))

    def rotswap(self, kernel: NodeId) -> NodeId:
        s = self.shape_of(kernel)
        if len(s) != 4:
            raise ShapeError(f"rotswap: kernel must be 4-D, got shape {s}")
        return self._append("rotswap", (kernel,), (s[0], s[1], s[3], s[2]))

    def sslice2d(self, a: NodeId, s: int) -> NodeId:
        h, w, c = self._spatial("sslice2d", a)
        if s < 1:
            raise GeometryError(f"sslice2d: stride {s} must be positive")
        oh = (h - 1) // s + 1
        ow = (w - 1) // s + 1
        return self._append("sslice2d", (a,), (oh, ow, c), params=(s, h, w))

    def dilate2d(self, a: NodeId, s: int, h: int, w: int) -> NodeId:
        ah, aw, c = self._spatial("dilate2d", a)
        if (ah - 1) * s + 1 > h or (aw - 1) * s + 1 > w:
            raise GeometryError(
                f"dilate2d: grid {(ah, aw)} at stride {s} overflows canvas {(h, w)}"
            )
        return self._append("dilate2d", (a,), (h, w, c), params=(s, h, w))

    def avg_pool2d(self, a: NodeId, window: int, stride: int) -> NodeId:
        h, w, c = self._spatial("avg_pool2d", a)
        if window < 1 or stride < 1:
            raise GeometryError(f"avg_pool2d: bad window {window} or stride {stride}")
        oh = conv_output_size(h, window, stride, 0)
        ow = conv_output_size(w, window, stride, 0)
        return self._append("avg_pool2d", (a,), (oh, ow, c), params=(window, stride))

    def avg_unpool2d(self, a: NodeId, window: int, stride: int, h: int, w: int) -> NodeId:
        ah, aw, c = self._spatial("avg_unpool2d", a)
        if conv_output_size(h, window, stride, 0) != ah or conv_output_size(w, window, stride, 0) != aw:
            raise GeometryError(
                f"avg_unpool2d: grid {(ah, aw)} does not pool back onto canvas {(h, w)}"
            )
        return self._append("avg_unpool2d", (a,), (h, w, c), params=(window, stride, h, w))

    # ------------------------------------------------------------- composites

    def affine(self, w: NodeId, x: NodeId, b: NodeId | None = None) -> NodeId:
        y = self.matvec(w, x)
        return y if b is None else self.add(y, b)

    def conv2d(self, x: NodeId, kernel: NodeId, stride: int = 1, zero_padding: int = 0) -> NodeId:
        """Strided, zero-padded cross-correlation built from the primitives."""
        sx = self._spatial("conv2d", x)
        sk = self.shape_of(kernel)
        if len(sk) != 4 or sk[0] != sk[1]:
            raise ShapeError(f"conv2d: kernel must be kxkxCxD, got shape {sk}")
        conv_output_size(sx[0], sk[0], stride, zero_padding)
        conv_output_size(sx[1], sk[0], stride, zero_padding)
        y = x if zero_padding == 0 else self.pad2d(x, zero_padding)
        y = self.corr2d(y, kernel)
        return y if stride == 1 else self.sslice2d(y, stride)

    def softmax(self, v: NodeId) -> NodeId:
        """Stable softmax; the max shift is detached, which leaves both the
        value and the derivative of the true softmax unchanged."""
        s = self.shape_of(v)
        if len(s) != 1:
            raise ShapeError(f"softmax: logits must be a vector, got shape {s}")
        shift = self.stop_grad(self.max_all(v))
        e = self.exp(self.sub(v, self.fill(shift, s)))
        return self.mul(e, self.fill(self.reciprocal(self.sum_all(e)), s))

    def cross_entropy(self, probs: NodeId, target: NodeId) -> NodeId:
        self._same_shape("cross_entropy", probs, target)
        return self.neg(self.sum_all(self.mul(target, self.log(probs))))

    def cross_entropy_logits(self, logits: NodeId, target: NodeId) -> NodeId:
        """cross_entropy(softmax(logits), target) in log-sum-exp form.

        Identical value and derivative, but the log probabilities stay finite
        however saturated the logits get, so optimization cannot step the
        graph into log(0).
        """
        s = self._same_shape("cross_entropy_logits", logits, target)
        if len(s) != 1:
            raise ShapeError(f"cross_entropy_logits: logits must be a vector, got {s}")
        shift = self.stop_grad(self.max_all(logits))
        shifted = self.sub(logits, self.fill(shift, s))
        lse = self.log(self.sum_all(self.exp(shifted)))
        log_probs = self.sub(shifted, self.fill(lse, s))
        return self.neg(self.sum_all(self.mul(target, log_probs)))

    def sq_diff_sum(self, a: NodeId, b: NodeId) -> NodeId:
        d = self.sub(a, b)
        return self.sum_all(self.mul(d, d))

    # ------------------------------------------------------------- evaluation

    def _ancestors(self, roots: Sequence[NodeId]) -> set[NodeId]:
        seen: set[NodeId] = set()
        stack = list(roots)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self._nodes[nid].inputs)
        return seen

    def evaluator(self, outputs: Sequence[NodeId]):
        """Compile an evaluation plan; returns bindings -> list of ndarrays.

        The plan is the id-sorted ancestor set of the outputs, so shared
        subexpressions are computed once per call. Plans are cached per
        output tuple and stay valid as the graph grows.
        """
        key = tuple(outputs)
        order = self._plans.get(key)
        if order is None:
            for o in key:
                if not 0 <= o < len(self._nodes):
                    raise ContractError(f"evaluator: unknown node id {o}")
            order = sorted(self._ancestors(key))
            self._plans[key] = order
        nodes = self._nodes

        def run(bindings: Mapping[str, np.ndarray]) -> list[np.ndarray]:
            vals: dict[NodeId, np.ndarray] = {}
            for nid in order:
                node = nodes[nid]
                if node.op == "const":
                    vals[nid] = node.payload
                elif node.op == "var":
                    name = node.params[0]
                    try:
                        v = bindings[name]
                    except KeyError:
                        raise ContractError(f"eval: no binding for variable {name!r}") from None
                    arr = v.array if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
                    if arr.shape != node.shape:
                        raise ShapeError(
                            f"eval: binding for {name!r} has shape {arr.shape}, "
                            f"variable expects {node.shape}"
                        )
                    vals[nid] = arr
                else:
                    vals[nid] = _EVAL[node.op](node, [vals[i] for i in node.inputs])
            return [vals[o] for o in key]

        return run

    def eval(self, bindings: Mapping[str, np.ndarray], outputs: Sequence[NodeId]) -> list[Tensor]:
        return [Tensor(a) for a in self.evaluator(outputs)(bindings)]


# --------------------------------------------------------------------- grad


def grad(graph: ExprGraph, wrt: Iterable[NodeId], of: NodeId | None = None) -> dict[NodeId, NodeId]:
    """Reverse-mode gradient of the graph's scalar output.

    Returns {variable node id -> gradient node id}; the gradient nodes live
    in the same graph and can be differentiated again. Variables that cannot
    reach the output get a zero constant of their own shape.
    """
    out = graph.output if of is None else of
    if graph.shape_of(out) != ():
        raise ContractError(
            f"grad: output must be scalar, node {out} has shape {graph.shape_of(out)}"
        )
    wanted = list(wrt)
    for v in wanted:
        if graph.op_of(v) != "var":
            raise ContractError(f"grad: node {v} ({graph.op_of(v)}) is not a variable leaf")

    ancestors = graph._ancestors([out])
    contribs: dict[NodeId, list[NodeId]] = {out: [graph.constant(np.ones(()))]}
    gradient_of: dict[NodeId, NodeId] = {}

    # consumers always have larger ids, so one descending sweep settles every adjoint
    for nid in range(out, -1, -1):
        if nid not in ancestors or nid not in contribs:
            continue
        parts = contribs.pop(nid)
        gbar = parts[0]
        for extra in parts[1:]:
            gbar = graph.add(gbar, extra)
        gradient_of[nid] = gbar
        node = graph.node(nid)
        if node.op in ("const", "var"):
            continue
        rule = _VJP.get(node.op)
        if rule is None:
            raise CapabilityError(f"primitive {node.op!r} has no registered derivative rule")
        for pos, contribution in rule(graph, nid, gbar):
            contribs.setdefault(node.inputs[pos], []).append(contribution)

    result: dict[NodeId, NodeId] = {}
    for v in wanted:
        result[v] = gradient_of.get(v, None)
        if result[v] is None:
            result[v] = graph.constant(np.zeros(graph.shape_of(v)))
    return result


def meta_grad(graph: ExprGraph, wrt: Iterable[NodeId]) -> dict[NodeId, NodeId]:
    """Gradient of a distance graph whose output already embeds gradients.

    Mechanically identical to `grad`; the separate name marks the
    second-order use. Raises CapabilityError naming the primitive if the
    walk reaches an op without a derivative rule.
    """
    return grad(graph, wrt)


# ------------------------------------------------------------ eval registry

_EVAL.update({
    "add": lambda n, a: a[0] + a[1],
    "sub": lambda n, a: a[0] - a[1],
    "mul": lambda n, a: a[0] * a[1],
    "neg": lambda n, a: -a[0],
    "scale": lambda n, a: a[0] * n.params[0],
    "exp": lambda n, a: np.exp(a[0]),
    "log": lambda n, a: np.log(a[0]),
    "reciprocal": lambda n, a: 1.0 / a[0],
    "sigmoid": lambda n, a: _sigmoid_arr(a[0]),
    "relu": lambda n, a: np.maximum(a[0], 0.0),
    "step": lambda n, a: (a[0] > 0).astype(np.float64),
    "stop_grad": lambda n, a: a[0],
    "sum_all": lambda n, a: np.asarray(a[0].sum()),
    "max_all": lambda n, a: np.asarray(a[0].max()),
    "fill": lambda n, a: np.full(n.params[0], float(a[0])),
    "reshape": lambda n, a: a[0].reshape(n.params[0]),
    "matvec": lambda n, a: a[0] @ a[1],
    "matvec_t": lambda n, a: a[0].T @ a[1],
    "outer": lambda n, a: np.outer(a[0], a[1]),
    "pad2d": lambda n, a: k.pad2d(a[0], n.params[0]),
    "crop2d": lambda n, a: k.crop2d(a[0], n.params[0]),
    "corr2d": lambda n, a: k.corr2d(a[0], a[1]),
    "kgrad_corr": lambda n, a: k.kgrad_corr(a[0], a[1]),
    "rotswap": lambda n, a: k.rotswap(a[0]),
    "sslice2d": lambda n, a: k.sslice2d(a[0], n.params[0]),
    "dilate2d": lambda n, a: k.dilate2d(a[0], *n.params),
    "avg_pool2d": lambda n, a: k.avg_pool(a[0], *n.params),
    "avg_unpool2d": lambda n, a: k.avg_unpool(a[0], *n.params),
})


def _sigmoid_arr(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


# ------------------------------------------------------------- VJP registry
# Each rule returns [(input position, contribution node id)]. Contributions
# are built out of registered primitives only, which is what keeps the graph
# closed under repeated differentiation.


def _vjp_add(g, nid, gbar):
    return [(0, gbar), (1, gbar)]


def _vjp_sub(g, nid, gbar):
    return [(0, gbar), (1, g.neg(gbar))]


def _vjp_mul(g, nid, gbar):
    a, b = g.node(nid).inputs
    return [(0, g.mul(gbar, b)), (1, g.mul(gbar, a))]


def _vjp_neg(g, nid, gbar):
    return [(0, g.neg(gbar))]


def _vjp_scale(g, nid, gbar):
    return [(0, g.scale(gbar, g.node(nid).params[0]))]


def _vjp_exp(g, nid, gbar):
    return [(0, g.mul(gbar, nid))]


def _vjp_log(g, nid, gbar):
    (a,) = g.node(nid).inputs
    return [(0, g.mul(gbar, g.reciprocal(a)))]


def _vjp_reciprocal(g, nid, gbar):
    # d(1/x) = -y^2 dx, reusing the computed output y
    return [(0, g.neg(g.mul(gbar, g.mul(nid, nid))))]


def _vjp_sigmoid(g, nid, gbar):
    # y' = y (1 - y)
    one = g.constant(np.ones(g.shape_of(nid)))
    return [(0, g.mul(gbar, g.mul(nid, g.sub(one, nid))))]


def _vjp_relu(g, nid, gbar):
    (a,) = g.node(nid).inputs
    return [(0, g.mul(gbar, g.step(a)))]


def _vjp_zero(g, nid, gbar):
    # step has zero derivative everywhere by definition; stop_grad blocks flow
    return []


def _vjp_sum_all(g, nid, gbar):
    (a,) = g.node(nid).inputs
    return [(0, g.fill(gbar, g.shape_of(a)))]


def _vjp_fill(g, nid, gbar):
    return [(0, g.sum_all(gbar))]


def _vjp_reshape(g, nid, gbar):
    (a,) = g.node(nid).inputs
    return [(0, g.reshape(gbar, g.shape_of(a)))]


def _vjp_matvec(g, nid, gbar):
    w, x = g.node(nid).inputs
    return [(0, g.outer(gbar, x)), (1, g.matvec_t(w, gbar))]


def _vjp_matvec_t(g, nid, gbar):
    w, y = g.node(nid).inputs
    return [(0, g.outer(y, gbar)), (1, g.matvec(w, gbar))]


def _vjp_outer(g, nid, gbar):
    u, v = g.node(nid).inputs
    return [(0, g.matvec(gbar, v)), (1, g.matvec_t(gbar, u))]


def _vjp_pad2d(g, nid, gbar):
    return [(0, g.crop2d(gbar, g.node(nid).params[0]))]


def _vjp_crop2d(g, nid, gbar):
    return [(0, g.pad2d(gbar, g.node(nid).params[0]))]


def _vjp_corr2d(g, nid, gbar):
    x, kernel = g.node(nid).inputs
    ksize = g.shape_of(kernel)[0]
    dx = g.corr2d(g.pad2d(gbar, ksize - 1), g.rotswap(kernel))
    return [(0, dx), (1, g.kgrad_corr(x, gbar))]


def _vjp_kgrad_corr(g, nid, gbar):
    x, dy = g.node(nid).inputs
    ksize = g.shape_of(nid)[0]
    dx = g.corr2d(g.pad2d(dy, ksize - 1), g.rotswap(gbar))
    return [(0, dx), (1, g.corr2d(x, gbar))]


def _vjp_rotswap(g, nid, gbar):
    return [(0, g.rotswap(gbar))]


def _vjp_sslice2d(g, nid, gbar):
    s, h, w = g.node(nid).params
    return [(0, g.dilate2d(gbar, s, h, w))]


def _vjp_dilate2d(g, nid, gbar):
    s, _, _ = g.node(nid).params
    return [(0, g.sslice2d(gbar, s))]


def _vjp_avg_pool2d(g, nid, gbar):
    (a,) = g.node(nid).inputs
    window, stride = g.node(nid).params
    h, w, _ = g.shape_of(a)
    return [(0, g.avg_unpool2d(gbar, window, stride, h, w))]


def _vjp_avg_unpool2d(g, nid, gbar):
    window, stride, _, _ = g.node(nid).params
    return [(0, g.avg_pool2d(gbar, window, stride))]


_VJP.update({
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "neg": _vjp_neg,
    "scale": _vjp_scale,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "reciprocal": _vjp_reciprocal,
    "sigmoid": _vjp_sigmoid,
    "relu": _vjp_relu,
    "step": _vjp_zero,
    "stop_grad": _vjp_zero,
    "sum_all": _vjp_sum_all,
    "fill": _vjp_fill,
    "reshape": _vjp_reshape,
    "matvec": _vjp_matvec,
    "matvec_t": _vjp_matvec_t,
    "outer": _vjp_outer,
    "pad2d": _vjp_pad2d,
    "crop2d": _vjp_crop2d,
    "corr2d": _vjp_corr2d,
    "kgrad_corr": _vjp_kgrad_corr,
    "rotswap": _vjp_rotswap,
    "sslice2d": _vjp_sslice2d,
    "dilate2d": _vjp_dilate2d,
    "avg_pool2d": _vjp_avg_pool2d,
    "avg_unpool2d": _vjp_avg_unpool2d,
    # "max_all" is deliberately absent: it only ever appears behind stop_grad
})
