"""Reverse-mode differentiation on a recorded tape of numpy primitives.

Every primitive accepts plain arrays or :class:`Var` objects.  When none of
its inputs is a :class:`Var` the primitive simply evaluates with numpy, so the
same pipeline code runs in a cheap forward-only mode and in a recording mode.

Example
-------
>>> tape = Tape()
>>> p = tape.parameter(3.0, "p")
>>> loss = p * p
>>> backward(tape, loss)["p"]
array(6.)
"""
from __future__ import annotations

import threading
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from typing import Any

import numpy as np

from .exceptions import ContractError, NumericalError

__all__ = [
    "Tape", "Var", "current_tape", "GradientVector", "backward", "finite_diff_check", "value",
    "is_var", "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "sigmoid", "sin", "cos", "tan", "absolute", "relu", "where", "sum", "mean",
    "getitem", "reshape", "transpose", "stack", "concatenate", "pad", "scatter",
    "box_sum", "shift_stack", "bilinear", "im2col", "matmul", "dot3", "cross3",
]


class Op:
    """A differentiable primitive: a forward function and its VJP."""

    def __init__(self, name: str, forward: Callable, vjp: Callable):
        self.name = name
        self.forward = forward
        self.vjp = vjp

    def __repr__(self) -> str:
        return f"Op({self.name})"


@dataclass
class Node:
    op: Op | None
    inputs: tuple  # int -> node index, anything else -> constant operand
    kwargs: dict
    value: np.ndarray
    name: str | None = None


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    """Innermost tape entered with ``with tape:`` on this thread, if any."""
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Topologically ordered record of primitive evaluations.

    Nodes are appended as primitives execute, so creation order is a valid
    topological order.  Parameters are leaf nodes addressed by name.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def parameter(self, val, name: str) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already on tape")
        arr = np.array(val, dtype=float)
        self.nodes.append(Node(None, (), {}, arr, name))
        self.params[name] = len(self.nodes) - 1
        return Var(self, len(self.nodes) - 1)

    def record(self, op: Op, args: tuple, kwargs: dict, out: np.ndarray) -> Var:
        inputs = tuple(a.index if isinstance(a, Var) else _Const(a) for a in args)
        if out.dtype.kind == "f" and np.isnan(out).any():
            raise NumericalError(f"NaN produced at node {len(self.nodes)} ({op.name})")
        self.nodes.append(Node(op, inputs, kwargs, out))
        return Var(self, len(self.nodes) - 1)

    def replay(self, overrides: Mapping[str, Any] | None = None) -> list[np.ndarray]:
        """Re-evaluate every node from the leaves, optionally with new leaf values."""
        overrides = dict(overrides or {})
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise ContractError(f"unknown parameters: {sorted(unknown)}")
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op is None:
                if node.name in overrides:
                    values.append(np.array(overrides[node.name], dtype=float))
                else:
                    values.append(node.value)
                continue
            args = [values[i] if isinstance(i, int) else i.value for i in node.inputs]
            values.append(node.op.forward(*args, **node.kwargs))
        return values


class _Const:
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


class Var:
    """Handle to a node on a :class:`Tape`."""

    __array_priority__ = 1000.0
    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"

    def __len__(self) -> int:
        return len(self.value)

    __add__ = lambda s, o: add(s, o)
    __radd__ = lambda s, o: add(o, s)
    __sub__ = lambda s, o: sub(s, o)
    __rsub__ = lambda s, o: sub(o, s)
    __mul__ = lambda s, o: mul(s, o)
    __rmul__ = lambda s, o: mul(o, s)
    __truediv__ = lambda s, o: div(s, o)
    __rtruediv__ = lambda s, o: div(o, s)
    __neg__ = lambda s: neg(s)
    __pow__ = lambda s, p: power(s, p)
    __getitem__ = lambda s, k: getitem(s, k)
    __matmul__ = lambda s, o: matmul(s, o)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x) -> np.ndarray:
    """Numeric value of a Var, or the argument itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def _apply(op: Op, *args, **kwargs):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = a.tape
    vals = [a.value if isinstance(a, Var) else a for a in args]
    out = op.forward(*vals, **kwargs)
    if tape is None:
        return out
    return tape.record(op, args, kwargs, np.asarray(out))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x) -> tuple:
    return np.shape(x)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def _f(x):
    return np.asarray(x, dtype=float)


_add = Op("add", lambda a, b: _f(a) + b,
          lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))))
_sub = Op("sub", lambda a, b: _f(a) - b,
          lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))))
_mul = Op("mul", lambda a, b: _f(a) * b,
          lambda g, out, a, b: (_unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))))
_div = Op("div", lambda a, b: _f(a) / b,
          lambda g, out, a, b: (_unbroadcast(g / b, _shape(a)),
                                _unbroadcast(-g * out / b, _shape(b))))
_neg = Op("neg", lambda a: -_f(a), lambda g, out, a: (-g,))
_power = Op("power", lambda a, p: _f(a) ** p,
            lambda g, out, a, p: (g * p * _f(a) ** (p - 1), None))
_exp = Op("exp", lambda a: np.exp(a), lambda g, out, a: (g * out,))
_log = Op("log", lambda a: np.log(a), lambda g, out, a: (g / a,))
_sqrt = Op("sqrt", lambda a: np.sqrt(a), lambda g, out, a: (g * 0.5 / out,))


def _sigmoid_fwd(a):
    a = _f(a)
    # two-branch form avoids overflow in exp for large |a|
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_sigmoid = Op("sigmoid", _sigmoid_fwd, lambda g, out, a: (g * out * (1.0 - out),))
_sin = Op("sin", lambda a: np.sin(a), lambda g, out, a: (g * np.cos(a),))
_cos = Op("cos", lambda a: np.cos(a), lambda g, out, a: (-g * np.sin(a),))
_tan = Op("tan", lambda a: np.tan(a), lambda g, out, a: (g * (1.0 + out * out),))
_abs = Op("abs", lambda a: np.abs(a), lambda g, out, a: (g * np.sign(a),))
_relu = Op("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (_f(a) > 0),))
_where = Op("where", lambda c, a, b: np.where(c, a, b),
            lambda g, out, c, a, b: (None, _unbroadcast(np.where(c, g, 0.0), _shape(a)),
                                     _unbroadcast(np.where(c, 0.0, g), _shape(b))))


def add(a, b):
    return _apply(_add, a, b)


def sub(a, b):
    return _apply(_sub, a, b)


def mul(a, b):
    return _apply(_mul, a, b)


def div(a, b):
    return _apply(_div, a, b)


def neg(a):
    return _apply(_neg, a)


def power(a, p: float):
    return _apply(_power, a, p)


def exp(a):
    return _apply(_exp, a)


def log(a):
    return _apply(_log, a)


def sqrt(a):
    return _apply(_sqrt, a)


def sigmoid(a):
    return _apply(_sigmoid, a)


def sin(a):
    return _apply(_sin, a)


def cos(a):
    return _apply(_cos, a)


def tan(a):
    return _apply(_tan, a)


def absolute(a):
    return _apply(_abs, a)


def relu(a):
    return _apply(_relu, a)


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; the condition carries no gradient."""
    return _apply(_where, np.asarray(cond, dtype=bool), a, b)


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------

def _sum_vjp(g, out, a, axis=None, keepdims=False):
    shape = _shape(a)
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape).copy(),)


_sum = Op("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
          _sum_vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    return _apply(_sum, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    shape = _shape(value(a))
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (slice, int, np.integer)) for k in key)


def _getitem_vjp(g, out, a, key):
    z = np.zeros(_shape(a))
    if _is_basic(key):
        z[key] += g
    else:
        np.add.at(z, key, g)
    return (z, None)


_getitem = Op("getitem", lambda a, key: np.asarray(a)[key], _getitem_vjp)


def getitem(a, key):
    return _apply(_getitem, a, key)


_reshape = Op("reshape", lambda a, shape: np.reshape(a, shape),
              lambda g, out, a, shape: (np.reshape(g, _shape(a)), None))


def reshape(a, shape):
    return _apply(_reshape, a, tuple(shape))


_transpose = Op("transpose", lambda a, axes: np.transpose(a, axes),
                lambda g, out, a, axes: (np.transpose(g, np.argsort(axes)), None))


def transpose(a, axes):
    return _apply(_transpose, a, tuple(axes))


def _stack_vjp(g, out, *args, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(args)))


_stack_op = Op("stack", lambda *a, axis=0: np.stack([_f(x) for x in a], axis=axis), _stack_vjp)


def stack(arrays, axis=0):
    return _apply(_stack_op, *arrays, axis=axis)


def _concat_vjp(g, out, *args, axis=0):
    sizes = np.cumsum([_shape(x)[axis] for x in args])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


_concat_op = Op("concatenate",
                lambda *a, axis=0: np.concatenate([_f(x) for x in a], axis=axis), _concat_vjp)


def concatenate(arrays, axis=0):
    return _apply(_concat_op, *arrays, axis=axis)


def _pad_vjp(g, out, a, width):
    key = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(width))
    return (g[key], None)


_pad = Op("pad", lambda a, width: np.pad(a, width), _pad_vjp)


def pad(a, width):
    """Zero-pad; ``width`` is a per-axis sequence of (before, after)."""
    return _apply(_pad, a, tuple(tuple(int(v) for v in w) for w in width))


def _scatter_fwd(a, index, n):
    a = _f(a)
    out = np.zeros((n,) + a.shape[1:])
    out[index] = a
    return out


_scatter = Op("scatter", _scatter_fwd, lambda g, out, a, index, n: (g[index], None, None))


def scatter(a, index, n: int):
    """Place rows of ``a`` at unique positions ``index`` of a zero array of length ``n``."""
    return _apply(_scatter, a, np.asarray(index), int(n))


# --------------------------------------------------------------------------
# domain primitives
# --------------------------------------------------------------------------

def _box_sum_fwd(a, r):
    a = _f(a)
    w = 2 * r + 1
    h, wd = a.shape[0] - 2 * r, a.shape[1] - 2 * r
    if h <= 0 or wd <= 0:
        return np.zeros((max(h, 0), max(wd, 0)) + a.shape[2:])
    # fixed summation order per output pixel keeps results independent of the crop
    rows = a[:, 0:wd].copy()
    for j in range(1, w):
        rows += a[:, j:j + wd]
    out = rows[0:h].copy()
    for i in range(1, w):
        out += rows[i:i + h]
    return out


def _box_sum_vjp(g, out, a, r):
    width = [(2 * r, 2 * r), (2 * r, 2 * r)] + [(0, 0)] * (g.ndim - 2)
    return (_box_sum_fwd(np.pad(g, width), r), None)


_box_sum = Op("box_sum", _box_sum_fwd, _box_sum_vjp)


def box_sum(a, r: int):
    """Sum over (2r+1)x(2r+1) windows on the first two axes, 'valid' region only."""
    return _apply(_box_sum, a, int(r))


def _shift_stack_fwd(a, shifts):
    a = _f(a)
    w = a.shape[1]
    out = np.zeros(a.shape[:2] + (len(shifts),) + a.shape[2:])
    for k, s in enumerate(shifts):
        s = int(s)
        if s >= 0:
            if s < w:
                out[:, s:, k] = a[:, :w - s]
        elif -s < w:
            out[:, :w + s, k] = a[:, -s:]
    return out


def _shift_stack_vjp(g, out, a, shifts):
    w = g.shape[1]
    z = np.zeros(_shape(a))
    for k, s in enumerate(shifts):
        s = int(s)
        if s >= 0:
            if s < w:
                z[:, :w - s] += g[:, s:, k]
        elif -s < w:
            z[:, -s:] += g[:, :w + s, k]
    return (z, None)


_shift_stack = Op("shift_stack", _shift_stack_fwd, _shift_stack_vjp)


def shift_stack(a, shifts):
    """out[y, x, k] = a[y, x - shifts[k]] (zero outside the image)."""
    return _apply(_shift_stack, a, tuple(int(s) for s in shifts))


def _bilinear_parts(img, x, y):
    h, w = img.shape[:2]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        corners.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), ok))
    return fx, fy, corners


def _bilinear_fetch(img, corner):
    yi, xi, ok = corner
    v = img[yi, xi]
    return np.where(ok[:, None], v, 0.0)


def _bilinear_fwd(img, x, y):
    img = _f(img)
    x = _f(x)
    y = _f(y)
    fx, fy, c = _bilinear_parts(img, x, y)
    v00, v01, v10, v11 = (_bilinear_fetch(img, k) for k in c)
    fx = fx[:, None]
    fy = fy[:, None]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def _bilinear_vjp(g, out, img, x, y):
    img = _f(img)
    x = _f(x)
    y = _f(y)
    fx, fy, c = _bilinear_parts(img, x, y)
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    g_img = np.zeros(img.shape)
    for (yi, xi, ok), wgt in zip(c, weights):
        contrib = g * (wgt * ok)[:, None]
        np.add.at(g_img, (yi, xi), contrib)
    v00, v01, v10, v11 = (_bilinear_fetch(img, k) for k in c)
    fxc = fx[:, None]
    fyc = fy[:, None]
    dx = (v01 - v00) * (1 - fyc) + (v11 - v10) * fyc
    dy = (v10 - v00) * (1 - fxc) + (v11 - v01) * fxc
    return g_img, (g * dx).sum(axis=1), (g * dy).sum(axis=1)


_bilinear = Op("bilinear", _bilinear_fwd, _bilinear_vjp)


def bilinear(img, x, y):
    """Sample an (H, W, C) image at float pixel coordinates; zero outside.

    Returns an (N, C) array for N query points.
    """
    return _apply(_bilinear, img, x, y)


def _im2col_fwd(a, k):
    a = _f(a)
    r = k // 2
    h, w, c = a.shape
    p = np.pad(a, ((r, r), (r, r), (0, 0)))
    cols = np.empty((h, w, c, k, k))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = p[i:i + h, j:j + w]
    return cols.reshape(h * w, c * k * k)


def _im2col_vjp(g, out, a, k):
    r = k // 2
    h, w, c = _shape(a)
    g = g.reshape(h, w, c, k, k)
    p = np.zeros((h + 2 * r, w + 2 * r, c))
    for i in range(k):
        for j in range(k):
            p[i:i + h, j:j + w] += g[:, :, :, i, j]
    return (p[r:r + h, r:r + w], None)


_im2col = Op("im2col", _im2col_fwd, _im2col_vjp)


def im2col(a, k: int):
    """Same-padded k x k patches of an (H, W, C) image as an (H*W, C*k*k) matrix."""
    return _apply(_im2col, a, int(k))


_matmul = Op("matmul", lambda a, b: _f(a) @ _f(b),
             lambda g, out, a, b: (g @ _f(b).T, _f(a).T @ g))


def matmul(a, b):
    return _apply(_matmul, a, b)


def dot3(a, b):
    """Row-wise dot product over the last axis (length 3)."""
    return sum(mul(a, b), axis=-1)


def cross3(a, b):
    """Row-wise cross product of (..., 3) arrays."""
    ax, ay, az = (getitem(a, (Ellipsis, i)) for i in range(3))
    bx, by, bz = (getitem(b, (Ellipsis, i)) for i in range(3))
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

class GradientVector(dict):
    """Mapping from parameter name to the adjoint ∂loss/∂parameter."""

    def norm(self) -> float:
        return float(np.sqrt(np.sum([np.sum(np.square(v)) for v in self.values()])))


def backward(tape: Tape, loss: Var, wrt: list[str] | None = None) -> GradientVector:
    """Propagate adjoints from a scalar ``loss`` back to the tape's parameters."""
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    nodes = tape.nodes
    adj: list[np.ndarray | None] = [None] * len(nodes)
    adj[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or node.op is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite adjoint at node {i} ({node.op.name})")
        args = [nodes[j].value if isinstance(j, int) else j.value for j in node.inputs]
        grads = node.op.vjp(g, node.value, *args, **node.kwargs)
        for j, gj in zip(node.inputs, grads):
            if not isinstance(j, int) or gj is None:
                continue
            gj = np.asarray(gj, dtype=float)
            if gj.shape != nodes[j].value.shape:
                gj = _unbroadcast(gj, nodes[j].value.shape).reshape(nodes[j].value.shape)
            adj[j] = gj if adj[j] is None else adj[j] + gj
    names = wrt if wrt is not None else list(tape.params)
    out = GradientVector()
    for name in names:
        idx = tape.params[name]
        g = adj[idx]
        out[name] = np.zeros_like(nodes[idx].value) if g is None else g
        if not np.all(np.isfinite(out[name])):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    return out


def finite_diff_check(f: Callable, p, h: float, index=None) -> float:
    """Relative error between the tape gradient and a central difference.

    ``f`` maps a parameter value (scalar, array, or Var) to a scalar.  For
    array parameters ``index`` selects the checked entry.  The error is
    ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    p = np.array(p, dtype=float)
    tape = Tape()
    with tape:
        var = tape.parameter(p, "p")
        loss = f(var)
    if isinstance(loss, Var):
        g = backward(tape, loss)["p"]
    else:  # f ignored its argument entirely
        g = np.zeros_like(p)
    g_ad = float(g if index is None else g[index])

    def at(delta):
        q = p.copy()
        if index is None:
            q = q + delta
        else:
            q[index] += delta
        v = float(np.asarray(value(f(q))).reshape(()))
        if not np.isfinite(v):
            raise NumericalError(f"non-finite evaluation at p{delta:+g}")
        return v

    g_fd = (at(h) - at(-h)) / (2 * h)
    return abs(g_ad - g_fd) / max(1.0, abs(g_fd))
