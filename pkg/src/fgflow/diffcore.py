"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every primitive's vector-Jacobian product is itself written with primitives,
so a backward sweep run with ``create_graph=True`` records onto the same tape
and its results can be differentiated again.  The alignment reward needs this:
it is a function of the input gradient, and training differentiates it with
respect to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Var", "Tape", "Gradient", "Trace", "DiffError", "ShapeError",
    "constant", "forward", "backward", "grad", "finite_difference_check",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "square",
    "sum", "reshape", "transpose", "broadcast_to", "sum_to",
    "unfold", "fold", "conv2d", "avg_pool2", "upsample2",
    "elu", "sigmoid", "softplus",
]


class DiffError(Exception):
    """Raised for misuse of the tape (unknown targets, non-scalar roots)."""


class ShapeError(DiffError, ValueError):
    """Incompatible operand shapes."""


class _Node:
    # Nodes hold arrays and integer references only; Vars are handles onto the
    # tape, so a tape never references itself and is freed by refcounting.
    __slots__ = ("value", "inputs", "vjp")

    def __init__(self, value, inputs, vjp):
        self.value = value
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of primitive applications.

    Node inputs always reference earlier nodes, so a reverse walk over the
    list is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def handle(self, index: int, name=None) -> "Var":
        v = Var.__new__(Var)
        v.value = self.nodes[index].value
        v.tape = self
        v.index = index
        v.name = name
        return v

    def leaf(self, value, name=None) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(value, (), None))
        return self.handle(len(self.nodes) - 1, name)


class Var:
    __slots__ = ("value", "tape", "index", "name")
    __array_ufunc__ = None

    def __init__(self, value, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape: Tape | None = None
        self.index: int | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def tracked(self):
        return self.tape is not None

    def detach(self) -> "Var":
        return Var(self.value, self.name)

    def __repr__(self):
        tag = f"#{self.index}" if self.tracked else "const"
        return f"Var({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def constant(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


@dataclass
class Gradient:
    """Gradient of a scalar with respect to one target (``"input"`` or a parameter name)."""

    wrt: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def _record(value, inputs, vjp) -> Var:
    tape = None
    for v in inputs:
        if v.tape is not None:
            if tape is None:
                tape = v.tape
            elif v.tape is not tape:
                raise DiffError("operands live on different tapes")
    if tape is None:
        return Var(value)
    refs = tuple(v.index if v.tape is not None else v for v in inputs)
    tape.nodes.append(_Node(np.asarray(value, dtype=np.float64), refs, vjp))
    return tape.handle(len(tape.nodes) - 1)


# ---------------------------------------------------------------- broadcasting

def _reduce_axes(from_shape, to_shape):
    lead = len(from_shape) - len(to_shape)
    axes = list(range(lead))
    for i, n in enumerate(to_shape):
        if n == 1 and from_shape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def sum_to(x, shape) -> Var:
    x = constant(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes = _reduce_axes(x.shape, shape)
    value = x.value.sum(axis=axes, keepdims=True)
    value = value.reshape(shape)
    src = x.shape
    return _record(value, (x,), lambda g, x, out: (broadcast_to(g, src),))


def broadcast_to(x, shape) -> Var:
    x = constant(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    value = np.broadcast_to(x.value, shape).copy()
    return _record(value, (x,), lambda g, x, out: (sum_to(g, src),))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = constant(a), constant(b)
    return _record(a.value + b.value, (a, b),
                   lambda g, a, b, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Var:
    a, b = constant(a), constant(b)
    return _record(a.value - b.value, (a, b),
                   lambda g, a, b, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Var:
    a = constant(a)
    return _record(-a.value, (a,), lambda g, a, out: (neg(g),))


def mul(a, b) -> Var:
    a, b = constant(a), constant(b)
    return _record(a.value * b.value, (a, b),
                   lambda g, a, b, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Var:
    a, b = constant(a), constant(b)

    def vjp(g, a, b, out):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(neg(mul(ga, div(a, b))), b.shape)

    return _record(a.value / b.value, (a, b), vjp)


def square(a) -> Var:
    return mul(a, a)


def exp(a) -> Var:
    a = constant(a)
    return _record(np.exp(a.value), (a,), lambda g, a, out: (mul(g, out),))


def log(a) -> Var:
    a = constant(a)
    return _record(np.log(a.value), (a,), lambda g, a, out: (div(g, a),))


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Var:
    a = constant(a)

    def vjp(g, a, out):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _record(_sigmoid_np(a.value), (a,), vjp)


def softplus(a) -> Var:
    """log(1 + exp(a)), evaluated without overflow."""
    a = constant(a)
    x = a.value
    value = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record(value, (a,), lambda g, a, out: (mul(g, sigmoid(a)),))


# ELU with alpha = 1.  The derivative family closes after two steps:
# elu' = where(x>0, 1, e^x), elu'' = where(x>0, 0, e^x), (elu'')' = elu''.

def _elu_curv(a) -> Var:
    x = a.value
    value = np.where(x > 0, 0.0, np.exp(np.minimum(x, 0.0)))
    return _record(value, (a,), lambda g, a, out: (mul(g, _elu_curv(a)),))


def _elu_slope(a) -> Var:
    x = a.value
    value = np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    return _record(value, (a,), lambda g, a, out: (mul(g, _elu_curv(a)),))


def elu(a) -> Var:
    a = constant(a)
    x = a.value
    value = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return _record(value, (a,), lambda g, a, out: (mul(g, _elu_slope(a)),))


# ---------------------------------------------------------------- structural

def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    a = constant(a)
    src = a.shape
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g, a, out):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % len(src) for ax in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(src))
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src))
        return (broadcast_to(g, src),)

    return _record(value, (a,), vjp)


def reshape(a, shape) -> Var:
    a = constant(a)
    src = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record(value, (a,), lambda g, a, out: (reshape(g, src),))


def transpose(a, axes=None) -> Var:
    a = constant(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.value, axes), (a,),
                   lambda g, a, out: (transpose(g, inv),))


def _swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def matmul(a, b) -> Var:
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g, a, b, out):
        return (sum_to(matmul(g, _swap_last(b)), a.shape),
                sum_to(matmul(_swap_last(a), g), b.shape))

    return _record(np.matmul(a.value, b.value), (a, b), vjp)


# ---------------------------------------------------------------- convolution

def unfold(x, k: int) -> Var:
    """im2col with zero "same" padding: (N, C, H, W) -> (N, C*k*k, H*W)."""
    x = constant(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (N, C, H, W, k, k) -> (N, C, k, k, H, W)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, h * w)
    return _record(cols, (x,), lambda g, x, out: (fold(g, k, (h, w)),))


def fold(cols, k: int, hw) -> Var:
    """Adjoint of :func:`unfold`: scatter-add columns back onto the image."""
    cols = constant(cols)
    n, ckk, _ = cols.shape
    c = ckk // (k * k)
    h, w = hw
    p = k // 2
    blocks = cols.value.reshape(n, c, k, k, h, w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for a in range(k):
        for b in range(k):
            xp[:, :, a:a + h, b:b + w] += blocks[:, :, a, b]
    value = xp[:, :, p:p + h, p:p + w].copy()
    return _record(value, (cols,), lambda g, cols, out: (unfold(g, k),))


def conv2d(x, weight, bias=None) -> Var:
    """Stride-1 cross-correlation with zero "same" padding; odd square kernels."""
    x, weight = constant(x), constant(weight)
    o, c, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be odd and square, got {weight.shape}")
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"input {x.shape} does not match kernel {weight.shape}")
    n, _, h, w = x.shape
    cols = unfold(x, k)
    y = matmul(reshape(weight, (o, c * k * k)), cols)
    y = reshape(y, (n, o, h, w))
    if bias is not None:
        y = add(y, reshape(constant(bias), (1, o, 1, 1)))
    return y


def avg_pool2(x) -> Var:
    """Non-overlapping 2x2 average pooling over the last two axes."""
    x = constant(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {(h, w)}")
    value = x.value.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return _record(value, (x,), lambda g, x, out: (upsample2(g),))


def upsample2(x) -> Var:
    """Adjoint of :func:`avg_pool2` (nearest repeat, scaled by 1/4)."""
    x = constant(x)
    value = 0.25 * np.repeat(np.repeat(x.value, 2, axis=-2), 2, axis=-1)
    return _record(value, (x,), lambda g, x, out: (avg_pool2(g),))


# ---------------------------------------------------------------- sweeps

class Trace(NamedTuple):
    value: float
    tape: Tape
    root: Var
    leaf: Var


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of a scalar ``output`` with respect to each of ``wrt``.

    With ``create_graph`` the sweep is recorded on the tape so the returned
    gradients can themselves be differentiated.
    """
    if output.value.size != 1:
        raise DiffError(f"backward needs a scalar root, got shape {output.shape}")
    tape = output.tape
    for v in wrt:
        if v.tape is None or v.tape is not tape:
            raise DiffError(f"target {v.name or v!r} is not recorded on this tape")
    if tape is None:
        return [Var(np.zeros_like(v.value)) for v in wrt]

    root = output.index
    cot: dict[int, Var] = {root: Var(np.ones_like(output.value))}
    nodes = tape.nodes
    keep = {v.index for v in wrt}
    for i in range(root, -1, -1):
        g = cot.get(i) if i in keep else cot.pop(i, None)
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        if create_graph:
            ins = tuple(tape.handle(r) if isinstance(r, int) else r for r in node.inputs)
            out = tape.handle(i)
        else:
            ins = tuple(Var(nodes[r].value) if isinstance(r, int) else r for r in node.inputs)
            out = Var(node.value)
        parts = node.vjp(g, *ins, out)
        for r, part in zip(node.inputs, parts):
            if not isinstance(r, int):
                continue
            prev = cot.get(r)
            cot[r] = part if prev is None else add(prev, part)
    result = []
    for v in wrt:
        g = cot.get(v.index)
        result.append(Var(np.zeros_like(v.value)) if g is None else g)
    return result


def forward(graph: Callable[[Var], Var], x) -> Trace:
    """Evaluate ``graph`` on ``x`` while recording a fresh tape."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains NaN or Inf")
    tape = Tape()
    leaf = tape.leaf(x, name="input")
    root = graph(leaf)
    if not isinstance(root, Var) or root.value.size != 1:
        raise DiffError("graph must return a scalar Var")
    return Trace(float(root.value), tape, root, leaf)


def backward(trace: Trace, wrt: Var | None = None, label: str | None = None) -> Gradient:
    target = trace.leaf if wrt is None else wrt
    (g,) = grad(trace.root, [target])
    return Gradient(label or target.name or "input", g.value.reshape(target.shape))


def finite_difference_check(fn, x, step: float = 1e-5, max_coords: int = 1024,
                            seed: int = 0) -> float:
    """Worst relative error between ``fn``'s gradient and central differences.

    ``fn(x)`` returns ``(value, gradient)``.  Above ``max_coords`` pixels a
    seeded random subset of coordinates is checked.  NaN anywhere counts as
    an infinite error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    _, g = fn(x)
    g = np.asarray(g, dtype=np.float64).ravel()
    flat = x.ravel()
    idx = np.arange(flat.size)
    if flat.size > max_coords:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
    scale = max(float(np.max(np.abs(g))), 1e-300)
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fd = (fn(xp.reshape(x.shape))[0] - fn(xm.reshape(x.shape))[0]) / (2 * step)
        err = abs(fd - g[i]) / max(abs(g[i]), abs(fd), 1e-3 * scale)
        if not np.isfinite(err):
            return float("inf")
        worst = max(worst, err)
    return worst
