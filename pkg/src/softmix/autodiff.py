"""Minimal reverse-mode differentiation over dense float64 arrays.

Design constraints:
  * every node holds a concrete numpy array; no lazy evaluation, no
    broadcasting at the op surface (elementwise ops demand equal shapes),
  * creation order is a valid topological order, so the backward pass
    simply walks node ids in reverse,
  * float64 everywhere; the verification oracles need tight tolerances.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_NODE_COUNTER = itertools.count()

PRIMITIVES = (
    "matmul", "add", "sub", "mul", "relu", "tanh", "sigmoid", "exp", "log",
    "abs", "clamp", "masked_softmax", "sum", "mean", "min2", "stop_gradient",
    "concat", "slice", "leaf", "const",
)


class DiffNode:
    """One node of the computation graph: value, grad, producing op, parents."""

    __slots__ = ("value", "grad", "primitive", "parents", "requires_grad",
                 "nid", "_vjp")

    def __init__(self, value: np.ndarray, primitive: str,
                 parents: tuple["DiffNode", ...] = (),
                 requires_grad: bool = False,
                 vjp: Callable[["DiffNode"], None] | None = None):
        self.value = value
        self.grad = np.zeros_like(value)
        self.primitive = primitive
        self.parents = parents
        self.requires_grad = requires_grad
        self.nid = next(_NODE_COUNTER)
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"DiffNode({self.primitive}, shape={self.value.shape})"

    # Sugar for the handful of binary ops that read better infix.
    def __add__(self, other): return apply_primitive("add", [self, lift(other)])
    def __sub__(self, other): return apply_primitive("sub", [self, lift(other)])
    def __mul__(self, other): return apply_primitive("mul", [self, lift(other)])


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def leaf(value, name: str = "") -> DiffNode:
    """A trainable leaf; gradients accumulate here."""
    return DiffNode(_as_f64(value).copy(), "leaf", (), requires_grad=True)


def constant(value) -> DiffNode:
    """A non-differentiable input (observations, masks, frozen targets)."""
    return DiffNode(_as_f64(value), "const", (), requires_grad=False)


def lift(x) -> DiffNode:
    return x if isinstance(x, DiffNode) else constant(x)


def _shape_error(tag: str, shapes: Sequence[tuple[int, ...]]) -> ValueError:
    return ValueError(f"{tag}: incompatible shapes {list(shapes)}")


def apply_primitive(tag: str, inputs: list[DiffNode],
                    attrs: dict | None = None) -> DiffNode:
    """Build one graph node.

    `attrs` carries the op's static parameters (clamp bounds, reduction
    axis, availability mask, slice limits).  Raises ValueError on shape
    mismatches and on domain violations (log of non-positive values).
    """
    attrs = attrs or {}
    if tag not in PRIMITIVES:
        raise ValueError(f"unknown primitive {tag!r}")
    builder = _BUILDERS[tag]
    return builder(inputs, attrs)


def backward(root: DiffNode) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's grad.

    The root must be scalar-shaped (a single element).  Grads of the
    leaves are accumulated, not overwritten; callers zero them first.
    """
    if root.value.size != 1:
        raise ValueError(
            f"backward requires a scalar root, got shape {root.value.shape}")
    # Iterative reachability walk; unrolled recurrent graphs get deep.
    seen: set[int] = set()
    stack = [root]
    order: list[DiffNode] = []
    while stack:
        node = stack.pop()
        if node.nid in seen or not node.requires_grad:
            continue
        seen.add(node.nid)
        order.append(node)
        stack.extend(node.parents)
    # Creation ids topologically sort the graph: parents precede children.
    order.sort(key=lambda n: n.nid, reverse=True)
    root.grad = np.ones_like(root.value)
    for node in order:
        if node._vjp is not None:
            node._vjp(node)


# ---------------------------------------------------------------------------
# primitive builders


def _unary(tag, inputs, fwd, bwd_factor):
    (x,) = inputs
    out = DiffNode(fwd(x.value), tag, (x,), x.requires_grad)
    if x.requires_grad:
        def vjp(o, x=x):
            x.grad += bwd_factor(x.value, o.value) * o.grad
        out._vjp = vjp
    return out


def _binary_elementwise(tag, inputs, fwd, da, db):
    a, b = inputs
    if a.value.shape != b.value.shape:
        raise _shape_error(tag, [a.value.shape, b.value.shape])
    rg = a.requires_grad or b.requires_grad
    out = DiffNode(fwd(a.value, b.value), tag, (a, b), rg)
    if rg:
        def vjp(o, a=a, b=b):
            if a.requires_grad:
                a.grad += da(a.value, b.value) * o.grad
            if b.requires_grad:
                b.grad += db(a.value, b.value) * o.grad
        out._vjp = vjp
    return out


def _build_matmul(inputs, attrs):
    a, b = inputs
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise _shape_error("matmul", [a.value.shape, b.value.shape])
    rg = a.requires_grad or b.requires_grad
    out = DiffNode(a.value @ b.value, "matmul", (a, b), rg)
    if rg:
        def vjp(o, a=a, b=b):
            if a.requires_grad:
                a.grad += o.grad @ b.value.T
            if b.requires_grad:
                b.grad += a.value.T @ o.grad
        out._vjp = vjp
    return out


def _build_log(inputs, attrs):
    (x,) = inputs
    if np.any(x.value <= 0.0):
        raise ValueError("log of non-positive value; add a floor constant first")
    return _unary("log", inputs, np.log, lambda x, y: 1.0 / x)


def _build_clamp(inputs, attrs):
    (x,) = inputs
    lo, hi = float(attrs["lo"]), float(attrs["hi"])
    if not lo < hi:
        raise ValueError(f"clamp requires lo < hi, got ({lo}, {hi})")
    out = DiffNode(np.clip(x.value, lo, hi), "clamp", (x,), x.requires_grad)
    if x.requires_grad:
        def vjp(o, x=x, lo=lo, hi=hi):
            # Zero subgradient at and beyond saturation.
            interior = (x.value > lo) & (x.value < hi)
            x.grad += interior * o.grad
        out._vjp = vjp
    return out


def _build_masked_softmax(inputs, attrs):
    (z,) = inputs
    axis = int(attrs.get("axis", -1))
    mask = _as_f64(attrs["mask"])
    if mask.shape != z.value.shape:
        raise _shape_error("masked_softmax", [z.value.shape, mask.shape])
    on = mask > 0.0
    if not np.all(on.any(axis=axis)):
        raise ValueError("masked_softmax: a slice has no available entries")
    shifted = np.where(on, z.value, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(on, np.exp(shifted), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)
    out = DiffNode(p, "masked_softmax", (z,), z.requires_grad)
    if z.requires_grad:
        def vjp(o, z=z, axis=axis):
            p = o.value
            dot = (o.grad * p).sum(axis=axis, keepdims=True)
            z.grad += p * (o.grad - dot)
        out._vjp = vjp
    return out


def _build_sum(inputs, attrs, scale_by_count=False):
    (x,) = inputs
    axis = attrs.get("axis", None)
    keepdims = bool(attrs.get("keepdims", False))
    count = x.value.size if axis is None else x.value.shape[axis]
    factor = 1.0 / count if scale_by_count else 1.0
    val = x.value.sum(axis=axis, keepdims=keepdims) * factor
    tag = "mean" if scale_by_count else "sum"
    out = DiffNode(val, tag, (x,), x.requires_grad)
    if x.requires_grad:
        def vjp(o, x=x, axis=axis, keepdims=keepdims, factor=factor):
            g = o.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x.grad += factor * g  # broadcasts back over the reduced axis
        out._vjp = vjp
    return out


def _build_min2(inputs, attrs):
    a, b = inputs
    if a.value.shape != b.value.shape:
        raise _shape_error("min2", [a.value.shape, b.value.shape])
    rg = a.requires_grad or b.requires_grad
    out = DiffNode(np.minimum(a.value, b.value), "min2", (a, b), rg)
    if rg:
        def vjp(o, a=a, b=b):
            first = a.value <= b.value  # ties route to the first input
            if a.requires_grad:
                a.grad += first * o.grad
            if b.requires_grad:
                b.grad += (~first) * o.grad
        out._vjp = vjp
    return out


def _build_stop_gradient(inputs, attrs):
    (x,) = inputs
    return DiffNode(x.value.copy(), "stop_gradient", (x,), requires_grad=False)


def _build_concat(inputs, attrs):
    axis = int(attrs.get("axis", 0))
    shapes = [n.value.shape for n in inputs]
    base = list(shapes[0])
    for s in shapes[1:]:
        probe = list(s)
        if len(probe) != len(base):
            raise _shape_error("concat", shapes)
        probe[axis] = base[axis]
        if probe != base:
            raise _shape_error("concat", shapes)
    rg = any(n.requires_grad for n in inputs)
    out = DiffNode(np.concatenate([n.value for n in inputs], axis=axis),
                   "concat", tuple(inputs), rg)
    if rg:
        widths = [s[axis] for s in shapes]
        def vjp(o, inputs=tuple(inputs), widths=tuple(widths), axis=axis):
            offset = 0
            for node, w in zip(inputs, widths):
                if node.requires_grad:
                    idx = [slice(None)] * o.grad.ndim
                    idx[axis] = slice(offset, offset + w)
                    node.grad += o.grad[tuple(idx)]
                offset += w
        out._vjp = vjp
    return out


def _build_slice(inputs, attrs):
    (x,) = inputs
    axis = int(attrs["axis"])
    start, stop = int(attrs["start"]), int(attrs["stop"])
    dim = x.value.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ValueError(f"slice [{start}:{stop}] out of range for axis {axis}"
                         f" of shape {x.value.shape}")
    idx = [slice(None)] * x.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = DiffNode(x.value[idx].copy(), "slice", (x,), x.requires_grad)
    if x.requires_grad:
        def vjp(o, x=x, idx=idx):
            x.grad[idx] += o.grad
        out._vjp = vjp
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_BUILDERS: dict[str, Callable] = {
    "matmul": _build_matmul,
    "add": lambda i, a: _binary_elementwise(
        "add", i, np.add, lambda x, y: 1.0, lambda x, y: 1.0),
    "sub": lambda i, a: _binary_elementwise(
        "sub", i, np.subtract, lambda x, y: 1.0, lambda x, y: -1.0),
    "mul": lambda i, a: _binary_elementwise(
        "mul", i, np.multiply, lambda x, y: y, lambda x, y: x),
    "relu": lambda i, a: _unary(
        "relu", i, lambda x: np.maximum(x, 0.0), lambda x, y: x > 0.0),
    "tanh": lambda i, a: _unary(
        "tanh", i, np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": lambda i, a: _unary(
        "sigmoid", i, _sigmoid, lambda x, y: y * (1.0 - y)),
    "exp": lambda i, a: _unary("exp", i, np.exp, lambda x, y: y),
    "log": _build_log,
    "abs": lambda i, a: _unary("abs", i, np.abs, lambda x, y: np.sign(x)),
    "clamp": _build_clamp,
    "masked_softmax": _build_masked_softmax,
    "sum": lambda i, a: _build_sum(i, a, scale_by_count=False),
    "mean": lambda i, a: _build_sum(i, a, scale_by_count=True),
    "min2": _build_min2,
    "stop_gradient": _build_stop_gradient,
    "concat": _build_concat,
    "slice": _build_slice,
}


# Thin functional wrappers; network code reads better with names.
def matmul(a, b): return apply_primitive("matmul", [lift(a), lift(b)])
def add(a, b): return apply_primitive("add", [lift(a), lift(b)])
def sub(a, b): return apply_primitive("sub", [lift(a), lift(b)])
def mul(a, b): return apply_primitive("mul", [lift(a), lift(b)])
def relu(x): return apply_primitive("relu", [lift(x)])
def tanh(x): return apply_primitive("tanh", [lift(x)])
def sigmoid(x): return apply_primitive("sigmoid", [lift(x)])
def exp(x): return apply_primitive("exp", [lift(x)])
def log(x): return apply_primitive("log", [lift(x)])
def absolute(x): return apply_primitive("abs", [lift(x)])
def clamp(x, lo, hi): return apply_primitive("clamp", [lift(x)], {"lo": lo, "hi": hi})
def min2(a, b): return apply_primitive("min2", [lift(a), lift(b)])
def stop_gradient(x): return apply_primitive("stop_gradient", [lift(x)])
def concat(nodes, axis=0):
    return apply_primitive("concat", [lift(n) for n in nodes], {"axis": axis})
def slice_axis(x, axis, start, stop):
    return apply_primitive("slice", [lift(x)], {"axis": axis, "start": start, "stop": stop})


def masked_softmax(x, mask, axis=-1):
    return apply_primitive("masked_softmax", [lift(x)], {"mask": mask, "axis": axis})


def reduce_sum(x, axis=None, keepdims=False):
    return apply_primitive("sum", [lift(x)], {"axis": axis, "keepdims": keepdims})


def reduce_mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [lift(x)], {"axis": axis, "keepdims": keepdims})


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Named leaves plus RMSprop running statistics.

    Every entry is a graph leaf with requires_grad set; `sq_avg` keys
    mirror `entries` keys at all times.
    """

    def __init__(self, entries: dict[str, np.ndarray],
                 lr: float = 5e-4, rho: float = 0.99, eps: float = 1e-5):
        self.entries: dict[str, DiffNode] = {
            name: leaf(arr, name) for name, arr in entries.items()
        }
        self.sq_avg: dict[str, np.ndarray] = {
            name: np.zeros_like(node.value) for name, node in self.entries.items()
        }
        self.lr = float(lr)
        self.rho = float(rho)
        self.eps = float(eps)

    def __getitem__(self, name: str) -> DiffNode:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for node in self.entries.values():
            node.grad[...] = 0.0

    def grads_finite(self) -> bool:
        return all(np.all(np.isfinite(n.grad)) for n in self.entries.values())

    def value_snapshot(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.entries):
            raise ValueError(
                f"entry names differ: {sorted(set(values) ^ set(self.entries))}")
        for name, arr in values.items():
            arr = _as_f64(arr)
            if arr.shape != self.entries[name].value.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{arr.shape} vs {self.entries[name].value.shape}")
            self.entries[name].value = arr.copy()
            self.entries[name].grad = np.zeros_like(arr)

    def clone(self) -> "ParamSet":
        return ParamSet(self.value_snapshot(), lr=self.lr, rho=self.rho, eps=self.eps)

    def n_params(self) -> int:
        return sum(n.value.size for n in self.entries.values())


def rmsprop_step(params: ParamSet, lr: float | None = None) -> bool:
    """One RMSprop update from the accumulated grads.

    Aborts the whole set (no partial updates) when any gradient entry is
    non-finite; returns whether the step was applied.
    """
    if not params.grads_finite():
        log.warning("rmsprop_step aborted: non-finite gradient")
        return False
    step = params.lr if lr is None else float(lr)
    for name, node in params.entries.items():
        g = node.grad
        sq = params.sq_avg[name]
        sq *= params.rho
        sq += (1.0 - params.rho) * g * g
        node.value -= step * g / (np.sqrt(sq) + params.eps)
    return True


def polyak_update(online: ParamSet, target: ParamSet, smoothing: float) -> None:
    """target <- smoothing * online + (1 - smoothing) * target, elementwise."""
    if not 0.0 < smoothing <= 1.0:
        raise ValueError(f"smoothing must be in (0, 1], got {smoothing}")
    if set(online.entries) != set(target.entries):
        raise ValueError(
            f"entry names differ: {sorted(set(online.entries) ^ set(target.entries))}")
    for name, node in online.entries.items():
        tgt = target.entries[name]
        if tgt.value.shape != node.value.shape:
            raise ValueError(f"shape mismatch for {name!r}: "
                             f"{tgt.value.shape} vs {node.value.shape}")
        tgt.value *= (1.0 - smoothing)
        tgt.value += smoothing * node.value
