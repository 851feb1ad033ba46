"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

The engine is deliberately small: a fixed vocabulary of matrix operations,
a ``Node`` graph built through :func:`apply` (or the functional wrappers),
and :func:`backward`, which returns exact gradients of a scalar loss with
respect to every ``requires_grad`` ancestor.

Two details carry most of the weight elsewhere in the package:

* ``matmul`` accepts ``blocks=B``: both operands are treated as B stacked
  row-blocks and multiplied block-by-block.  A whole batch of per-sample
  attention patterns is therefore a handful of nodes instead of hundreds,
  while every value in the graph stays a plain 2-D matrix.
* Anything that must not receive gradient (teacher outputs, frozen
  backbone weights) enters the graph as a ``constant``; detachment is
  structural rather than a runtime flag.

Matrices are immutable once attached to a node.  Graph construction and
backward are single-threaded per graph; independent graphs may live on
independent threads.
"""

from __future__ import annotations

import itertools
import warnings
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

# GEMMs route through torch's MKL build, which runs these thin-K float64
# shapes about twice as fast as numpy's OpenBLAS on one core.  A single
# thread keeps results bit-reproducible run to run; node values are shared
# with torch read-only, never written through.
torch.set_num_threads(1)
warnings.filterwarnings(
    "ignore", message="The given NumPy array is not writable")

_TORCH_FLOP_CUTOFF = 32768  # below this, torch call overhead beats the gain

OP_KINDS = frozenset({
    "matmul", "add", "scale", "concat_rows", "slice_rows", "row_softmax",
    "log", "exp", "elementwise_mul", "mean_all", "mean_rows",
    "l2_normalize_rows", "layer_norm_rows", "relu", "transpose",
    "constant", "parameter",
})

LAYER_NORM_EPS = 1e-5
L2_NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


class ZeroNormError(ValueError):
    """A row with norm below the floor reached l2_normalize_rows."""


class NonDeterministicError(RuntimeError):
    """A loss builder returned different values for identical inputs."""


_ids = itertools.count()


class Node:
    """One vertex of the computation graph; ``value`` is immutable."""

    __slots__ = ("id", "op_kind", "inputs", "value", "requires_grad", "attrs")

    def __init__(self, op_kind, inputs, value, requires_grad, attrs=None):
        self.id = next(_ids)
        self.op_kind = op_kind
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op_kind}, shape={self.value.shape})"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def as_matrix(value) -> np.ndarray:
    """Validate and convert to an owned, read-only 2-D float64 array."""
    arr = np.array(value, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("matrix contains non-finite entries")
    return _freeze(arr)


def constant(value) -> Node:
    """Leaf node that never receives gradient (teacher values, masks)."""
    if isinstance(value, np.ndarray) and value.ndim == 2 \
            and value.dtype == np.float64 and not value.flags.writeable:
        arr = value  # already canonical, adopt without copying
    else:
        arr = as_matrix(value)
    return Node("constant", (), arr, False)


def parameter(value) -> Node:
    """Leaf node flagged trainable; gradients are collected for it."""
    return Node("parameter", (), as_matrix(value), True)


# ---------------------------------------------------------------------------
# Forward kernels.  Shared verbatim by the graph ops and the plain-array
# backend, so a no-gradient forward pass is bit-identical to a graph one.
# ---------------------------------------------------------------------------

def k_matmul(a, b, transpose_a=False, transpose_b=False, blocks=1):
    if blocks == 1:
        left = a.T if transpose_a else a
        right = b.T if transpose_b else b
        if left.shape[1] != right.shape[0]:
            raise ShapeError(
                f"matmul inner dims differ: {left.shape} @ {right.shape}")
        m, k = left.shape
        n = right.shape[1]
        if m * k * n < _TORCH_FLOP_CUTOFF or a.dtype != np.float64:
            return left @ right
        out = np.empty((m, n))
        torch.mm(torch.from_numpy(left), torch.from_numpy(right),
                 out=torch.from_numpy(out))
        return out
    if a.shape[0] % blocks or b.shape[0] % blocks:
        raise ShapeError(
            f"matmul blocks={blocks} must divide row counts "
            f"{a.shape[0]} and {b.shape[0]}")
    al = a.reshape(blocks, a.shape[0] // blocks, a.shape[1])
    bl = b.reshape(blocks, b.shape[0] // blocks, b.shape[1])
    if transpose_a:
        al = al.transpose(0, 2, 1)
    if transpose_b:
        bl = bl.transpose(0, 2, 1)
    if al.shape[2] != bl.shape[1]:
        raise ShapeError(
            f"matmul inner dims differ per block: "
            f"{al.shape[1:]} @ {bl.shape[1:]} (blocks={blocks})")
    if blocks * al.shape[1] * al.shape[2] * bl.shape[2] < _TORCH_FLOP_CUTOFF \
            or a.dtype != np.float64:
        out = np.matmul(al, bl)
    else:
        out = np.empty((blocks, al.shape[1], bl.shape[2]))
        torch.bmm(torch.from_numpy(al), torch.from_numpy(bl),
                  out=torch.from_numpy(out))
    return out.reshape(blocks * out.shape[1], out.shape[2])


def _broadcastable(target, other):
    # Same shape, 1x1 scalar, or a single row matching the column count.
    return (other == target
            or other == (1, 1)
            or (other[0] == 1 and other[1] == target[1]))


def k_add(a, b):
    if not (_broadcastable(a.shape, b.shape) or _broadcastable(b.shape, a.shape)):
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    return a + b


def k_scale(a, factor):
    with np.errstate(over="ignore"):
        return a * float(factor)


def k_concat_rows(parts):
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows column counts differ: {sorted(cols)}")
    return np.concatenate(parts, axis=0)


def k_slice_rows(a, start, stop):
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(
            f"slice_rows [{start}:{stop}] out of range for {a.shape[0]} rows")
    return a[start:stop]


def k_row_softmax(a):
    # Shift by the row max before exponentiation; analytically a no-op,
    # numerically an overflow guard.
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def k_log(a):
    return np.log(a)


def k_exp(a):
    return np.exp(a)


def k_elementwise_mul(a, b):
    if not (_broadcastable(a.shape, b.shape) or _broadcastable(b.shape, a.shape)):
        raise ShapeError(
            f"elementwise_mul shapes incompatible: {a.shape} * {b.shape}")
    return a * b


def k_mean_all(a):
    return np.array([[a.mean()]])


def k_mean_rows(a):
    return a.mean(axis=0, keepdims=True)


def k_l2_normalize_rows(a):
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    if (norms < L2_NORM_FLOOR).any():
        raise ZeroNormError(
            f"row norm below {L2_NORM_FLOOR:g} in l2_normalize_rows")
    return a / norms, norms


_TORCH_ELEM_CUTOFF = 16384


def k_layer_norm_rows(a, eps=LAYER_NORM_EPS):
    if a.size >= _TORCH_ELEM_CUTOFF and a.dtype == np.float64 \
            and a.flags.c_contiguous:
        out_t, _, rstd_t = torch.ops.aten.native_layer_norm(
            torch.from_numpy(a), [a.shape[1]], None, None, eps)
        return out_t.numpy(), rstd_t.numpy().reshape(-1, 1)
    mu = a.mean(axis=1, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (a - mu) * inv, inv


def k_relu(a):
    return np.maximum(a, 0.0)


def k_transpose(a):
    return a.T


# Non-finite detection rides on the hardware FP status flags: overflow,
# invalid, and divide-by-zero all raise, which costs nothing per element.
# Small outputs additionally get a one-pass sum check, so non-finite values
# smuggled in through raw-array inputs still get caught where they first
# touch an operation.  torch-backed GEMMs sit outside numpy's flag
# machinery; a blowup there surfaces at the next flag-checked op (every
# block has a layer norm) or at the scalar loss, which is always checked.
_FLAG_RAISE = dict(over="raise", invalid="raise", divide="raise", under="ignore")
_SMALL_CHECK_LIMIT = 4096


def _checked(op_kind, fn, *args):
    try:
        with np.errstate(**_FLAG_RAISE):
            out = fn(*args)
    except FloatingPointError as exc:
        raise NonFiniteError(f"{op_kind} produced a non-finite result ({exc})") from exc
    if out.size <= _SMALL_CHECK_LIMIT and not np.isfinite(out.sum()):
        raise NonFiniteError(f"{op_kind} produced a non-finite result")
    return out


def _check_finite(op_kind, arr):
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"{op_kind} produced a non-finite result")
    return arr


# ---------------------------------------------------------------------------
# Graph construction.
# ---------------------------------------------------------------------------

def _rg(inputs) -> bool:
    return any(n.requires_grad for n in inputs)


def matmul(a: Node, b: Node, transpose_a=False, transpose_b=False, blocks=1) -> Node:
    value = _checked("matmul", k_matmul,
                     a.value, b.value, transpose_a, transpose_b, blocks)
    return Node("matmul", (a, b), _freeze(value), _rg((a, b)),
                (transpose_a, transpose_b, blocks))


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b), _freeze(_checked("add", k_add, a.value, b.value)),
                _rg((a, b)))


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    if not np.isfinite(factor):
        raise NonFiniteError(f"scale factor {factor} is not finite")
    return Node("scale", (a,),
                _freeze(_checked("scale", k_scale, a.value, factor)),
                a.requires_grad, factor)


def concat_rows(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ShapeError("concat_rows requires at least one input")
    value = k_concat_rows([p.value for p in parts])
    return Node("concat_rows", tuple(parts), _freeze(value), _rg(parts))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    return Node("slice_rows", (a,), _freeze(k_slice_rows(a.value, start, stop)),
                a.requires_grad, (start, stop))


def row_softmax(a: Node) -> Node:
    return Node("row_softmax", (a,),
                _freeze(_checked("row_softmax", k_row_softmax, a.value)),
                a.requires_grad)


def log(a: Node) -> Node:
    return Node("log", (a,), _freeze(_checked("log", k_log, a.value)),
                a.requires_grad)


def exp(a: Node) -> Node:
    return Node("exp", (a,), _freeze(_checked("exp", k_exp, a.value)),
                a.requires_grad)


def elementwise_mul(a: Node, b: Node) -> Node:
    value = _checked("elementwise_mul", k_elementwise_mul, a.value, b.value)
    return Node("elementwise_mul", (a, b), _freeze(value), _rg((a, b)))


def mean_all(a: Node) -> Node:
    return Node("mean_all", (a,), _freeze(k_mean_all(a.value)), a.requires_grad)


def mean_rows(a: Node) -> Node:
    return Node("mean_rows", (a,), _freeze(k_mean_rows(a.value)), a.requires_grad)


def l2_normalize_rows(a: Node) -> Node:
    value, norms = k_l2_normalize_rows(a.value)
    return Node("l2_normalize_rows", (a,), _freeze(value), a.requires_grad, norms)


def layer_norm_rows(a: Node, eps: float = LAYER_NORM_EPS) -> Node:
    value, inv = k_layer_norm_rows(a.value, eps)
    return Node("layer_norm_rows", (a,), _freeze(value), a.requires_grad, inv)


def relu(a: Node) -> Node:
    return Node("relu", (a,), _freeze(k_relu(a.value)), a.requires_grad)


def transpose(a: Node) -> Node:
    return Node("transpose", (a,), _freeze(k_transpose(a.value)), a.requires_grad)


_BUILDERS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "concat_rows": lambda inputs, **kw: concat_rows(inputs),
    "slice_rows": slice_rows,
    "row_softmax": row_softmax,
    "log": log,
    "exp": exp,
    "elementwise_mul": elementwise_mul,
    "mean_all": mean_all,
    "mean_rows": mean_rows,
    "l2_normalize_rows": l2_normalize_rows,
    "layer_norm_rows": layer_norm_rows,
    "relu": relu,
    "transpose": transpose,
}


def apply(op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
    """Generic dispatch; the functional wrappers above are the fast path."""
    if op_kind not in _BUILDERS:
        raise ValueError(f"unknown op_kind {op_kind!r}; "
                         f"valid kinds: {sorted(OP_KINDS - {'constant', 'parameter'})}")
    if op_kind == "concat_rows":
        return concat_rows(list(inputs))
    if op_kind == "slice_rows":
        return slice_rows(inputs[0], attrs["start"], attrs["stop"])
    return _BUILDERS[op_kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# Backward pass.
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _vjp_matmul(node, g):
    a, b = node.inputs
    ta, tb, blocks = node.attrs
    out = []
    if a.requires_grad:
        if not ta:
            out.append((a, k_matmul(g, b.value, False, not tb, blocks)))
        else:
            out.append((a, k_matmul(b.value, g, tb, True, blocks)))
    if b.requires_grad:
        if not tb:
            out.append((b, k_matmul(a.value, g, not ta, False, blocks)))
        else:
            out.append((b, k_matmul(g, a.value, True, ta, blocks)))
    return out


def _vjp_add(node, g):
    a, b = node.inputs
    return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]


def _vjp_scale(node, g):
    return [(node.inputs[0], g * node.attrs)]


def _vjp_concat_rows(node, g):
    out = []
    offset = 0
    for part in node.inputs:
        rows = part.shape[0]
        out.append((part, g[offset:offset + rows]))
        offset += rows
    return out


def _vjp_slice_rows(node, g):
    (a,) = node.inputs
    start, stop = node.attrs
    full = np.zeros(a.shape)
    full[start:stop] = g
    return [(a, full)]


def _vjp_row_softmax(node, g):
    p = node.value
    inner = (g * p).sum(axis=1, keepdims=True)
    return [(node.inputs[0], p * (g - inner))]


def _vjp_log(node, g):
    return [(node.inputs[0], g / node.inputs[0].value)]


def _vjp_exp(node, g):
    return [(node.inputs[0], g * node.value)]


def _vjp_elementwise_mul(node, g):
    a, b = node.inputs
    return [(a, _unbroadcast(g * b.value, a.shape)),
            (b, _unbroadcast(g * a.value, b.shape))]


def _vjp_mean_all(node, g):
    a = node.inputs[0]
    return [(a, np.full(a.shape, g[0, 0] / a.value.size))]


def _vjp_mean_rows(node, g):
    a = node.inputs[0]
    return [(a, np.broadcast_to(g / a.shape[0], a.shape))]


def _vjp_l2_normalize_rows(node, g):
    y, norms = node.value, node.attrs
    inner = (g * y).sum(axis=1, keepdims=True)
    return [(node.inputs[0], (g - y * inner) / norms)]


def _vjp_layer_norm_rows(node, g):
    xhat, inv = node.value, node.attrs
    gm = g.mean(axis=1, keepdims=True)
    gx = (g * xhat).mean(axis=1, keepdims=True)
    return [(node.inputs[0], inv * (g - gm - xhat * gx))]


def _vjp_relu(node, g):
    v = node.value
    if v.size >= _TORCH_ELEM_CUTOFF and g.dtype == np.float64 \
            and g.flags.c_contiguous and v.flags.c_contiguous:
        # fused relu-gradient kernel; (output > 0) matches (input > 0)
        return [(node.inputs[0], torch.ops.aten.threshold_backward(
            torch.from_numpy(g), torch.from_numpy(v), 0.0).numpy())]
    return [(node.inputs[0], g * (v > 0.0))]


def _vjp_transpose(node, g):
    return [(node.inputs[0], g.T)]


_VJPS = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "scale": _vjp_scale,
    "concat_rows": _vjp_concat_rows,
    "slice_rows": _vjp_slice_rows,
    "row_softmax": _vjp_row_softmax,
    "log": _vjp_log,
    "exp": _vjp_exp,
    "elementwise_mul": _vjp_elementwise_mul,
    "mean_all": _vjp_mean_all,
    "mean_rows": _vjp_mean_rows,
    "l2_normalize_rows": _vjp_l2_normalize_rows,
    "layer_norm_rows": _vjp_layer_norm_rows,
    "relu": _vjp_relu,
    "transpose": _vjp_transpose,
}

GradientMap = dict  # node id -> gradient matrix (same shape as the node)


def _topo(root: Node) -> list[Node]:
    # Iterative post-order; graphs can be a few thousand nodes deep.
    seen = set()
    order = []
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            if inp.id not in seen and inp.requires_grad:
                stack.append((inp, False))
    return order


def backward(loss: Node) -> GradientMap:
    """Exact gradients of a 1x1 loss for every requires_grad ancestor."""
    if loss.value.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar 1x1 loss, got {loss.value.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    owned: set[int] = set()  # ids whose held array we allocated ourselves
    order = _topo(loss)
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None:
            continue
        vjp = _VJPS.get(node.op_kind)
        if vjp is None:  # leaf
            continue
        for inp, piece in vjp(node, g):
            if not inp.requires_grad:
                continue
            held = grads.get(inp.id)
            if held is None:
                grads[inp.id] = piece
            elif inp.id in owned:
                held += piece
            else:
                grads[inp.id] = held + piece
                owned.add(inp.id)
    return {n.id: grads[n.id] for n in order if n.id in grads}


def grads_for(gradient_map: GradientMap, nodes: Mapping[str, Node]) -> dict[str, np.ndarray]:
    """Pick named parameter gradients out of a gradient map (zeros if unreached)."""
    out = {}
    for name, node in nodes.items():
        g = gradient_map.get(node.id)
        out[name] = g if g is not None else np.zeros(node.shape)
    return out


# ---------------------------------------------------------------------------
# Dual backends: the same forward code runs over graph nodes (training)
# or raw arrays (teacher / evaluation), sharing the kernels above.
# ---------------------------------------------------------------------------

class GraphOps:
    """Backend that records the computation graph."""

    def matmul(self, a, b, transpose_a=False, transpose_b=False, blocks=1):
        return matmul(a, b, transpose_a, transpose_b, blocks)

    def add(self, a, b):
        return add(a, b)

    def scale(self, a, factor):
        return scale(a, factor)

    def concat_rows(self, parts):
        return concat_rows(parts)

    def slice_rows(self, a, start, stop):
        return slice_rows(a, start, stop)

    def row_softmax(self, a):
        return row_softmax(a)

    def log(self, a):
        return log(a)

    def exp(self, a):
        return exp(a)

    def mul(self, a, b):
        return elementwise_mul(a, b)

    def mean_all(self, a):
        return mean_all(a)

    def mean_rows(self, a):
        return mean_rows(a)

    def l2_normalize_rows(self, a):
        return l2_normalize_rows(a)

    def layer_norm_rows(self, a, eps=LAYER_NORM_EPS):
        return layer_norm_rows(a, eps)

    def relu(self, a):
        return relu(a)

    def transpose(self, a):
        return transpose(a)

    def constant(self, value):
        return constant(value)

    def raw(self, x) -> np.ndarray:
        return x.value


class ArrayOps:
    """Backend that evaluates immediately on numpy arrays (no gradients)."""

    def matmul(self, a, b, transpose_a=False, transpose_b=False, blocks=1):
        return _checked("matmul", k_matmul, a, b, transpose_a, transpose_b, blocks)

    def add(self, a, b):
        return _checked("add", k_add, a, b)

    def scale(self, a, factor):
        return _checked("scale", k_scale, a, factor)

    def concat_rows(self, parts):
        return k_concat_rows(list(parts))

    def slice_rows(self, a, start, stop):
        return k_slice_rows(a, start, stop)

    def row_softmax(self, a):
        return _checked("row_softmax", k_row_softmax, a)

    def log(self, a):
        return _checked("log", k_log, a)

    def exp(self, a):
        return _checked("exp", k_exp, a)

    def mul(self, a, b):
        return _checked("elementwise_mul", k_elementwise_mul, a, b)

    def mean_all(self, a):
        return k_mean_all(a)

    def mean_rows(self, a):
        return k_mean_rows(a)

    def l2_normalize_rows(self, a):
        return k_l2_normalize_rows(a)[0]

    def layer_norm_rows(self, a, eps=LAYER_NORM_EPS):
        return k_layer_norm_rows(a, eps)[0]

    def relu(self, a):
        return k_relu(a)

    def transpose(self, a):
        return k_transpose(a)

    def constant(self, value):
        return np.asarray(value, dtype=np.float64)

    def raw(self, x) -> np.ndarray:
        return x


GRAPH_OPS = GraphOps()
ARRAY_OPS = ArrayOps()


# ---------------------------------------------------------------------------
# Finite-difference verification harness.
# ---------------------------------------------------------------------------

def finite_difference_check(
    loss_builder: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_builder`` must deterministically rebuild the scalar loss from a
    dict of parameter nodes; the harness evaluates it twice to detect
    hidden nondeterminism before trusting either side.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    def build(arrays):
        nodes = {name: parameter(arr) for name, arr in arrays.items()}
        return loss_builder(nodes), nodes

    loss_a, nodes_a = build(params)
    loss_b, _ = build(params)
    if loss_a.value[0, 0] != loss_b.value[0, 0]:
        raise NonDeterministicError(
            f"loss builder is not deterministic: "
            f"{loss_a.value[0, 0]!r} vs {loss_b.value[0, 0]!r}")

    analytic = grads_for(backward(loss_a), nodes_a)

    def value_at(arrays) -> float:
        node, _ = build(arrays)
        return node.value[0, 0]

    worst = 0.0
    base = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape):
            original = arr[idx]
            arr[idx] = original + epsilon
            hi = value_at(base)
            arr[idx] = original - epsilon
            lo = value_at(base)
            arr[idx] = original
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(analytic[name][idx] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
