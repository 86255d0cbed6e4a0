"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every differentiable primitive records a node on the thread-local tape when
any of its inputs requires a gradient.  ``backward`` walks that tape in
reverse, writes ``.grad`` on the leaves and clears the tape, so a tape serves
exactly one backward pass.

    >>> x = Tensor([0.0], requires_grad=True)
    >>> y = sigmoid(x).sum()
    >>> backward(y)
    >>> float(x.grad[0])
    0.25
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, consumed tape, ...)."""


class Node:
    __slots__ = ("out", "inputs", "vjp", "generation")

    def __init__(self, out, inputs, vjp, generation):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.generation = generation


class Tape:
    """Ordered record of primitive ops; append order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def record(self, out, inputs, vjp):
        node = Node(out, inputs, vjp, self.generation)
        self.nodes.append(node)
        return node

    def clear(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _scalar_error():
    raise ContractError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out_data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data`` as the result of a primitive.

    ``vjp(g)`` maps the output cotangent to one cotangent per input (``None``
    for inputs that need none).  Modules outside this file use it to register
    fused ops with their own backward rule.
    """
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = get_tape().record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def power(a, exponent: float):
    a = as_tensor(a)
    ad = a.data
    e = float(exponent)
    return make_op(ad ** e, (a,), lambda g: (g * e * ad ** (e - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    return make_op(_softplus(ad), (a,), lambda g: (g * _sigmoid(ad),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU (smooth, so finite differences behave)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_op(out, (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product with numpy ``matmul`` batching (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op(out, (a, b), vjp)


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def embedding(table, ids):
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]

    def vjp(g):
        gt = np.zeros((n,) + table.shape[1:], dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (gt,)

    return make_op(table.data[ids], (table,), vjp)


# ---------------------------------------------------------------- normalizers

def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)
    return make_op(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def l2_normalize(a, eps=1e-6, axis=-1):
    """``x / max(||x||, eps)`` along ``axis``; rows below ``eps`` get norm < 1."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps)
    out = x / denom

    def vjp(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        ga = np.where(active, (g - out * proj) / denom, g / eps)
        return (ga,)

    return make_op(out, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5) * gain + bias


# ---------------------------------------------------------------- resampling

def bilinear_sample(grid, ys, xs):
    """Bilinearly sample ``grid`` at continuous (row, col) coordinates.

    ``grid`` is (H, W, D) with coordinates of any shape S, giving S + (D,); or
    a stack (G, H, W, D) with coordinates shaped (G, ...), giving
    (G, ...) + (D,).  Coordinates are clamped to the grid extent.  The
    coordinates are constants; only the grid receives a gradient.
    """
    grid = as_tensor(grid)
    ys = np.asarray(ys, dtype=DTYPE)
    xs = np.asarray(xs, dtype=DTYPE)
    if ys.shape != xs.shape:
        raise DimensionError("row and column coordinate arrays differ in shape")
    if grid.ndim == 3:
        stacked = grid.data[None]
        cshape = ys.shape
        yy, xx = ys.reshape(1, -1), xs.reshape(1, -1)
        out_shape = cshape + (grid.shape[2],)
    elif grid.ndim == 4:
        if ys.shape[:1] != grid.shape[:1]:
            raise DimensionError("coordinate stack does not match grid stack")
        stacked = grid.data
        yy, xx = ys.reshape(grid.shape[0], -1), xs.reshape(grid.shape[0], -1)
        out_shape = ys.shape + (grid.shape[3],)
    else:
        raise DimensionError(f"grid must be 3-D or 4-D, got {grid.shape}")
    _, h, w, _ = stacked.shape
    yy = np.ascontiguousarray(np.clip(yy, 0.0, h - 1))
    xx = np.ascontiguousarray(np.clip(xx, 0.0, w - 1))
    out = kernels.bilinear_gather(np.ascontiguousarray(stacked), yy, xx)
    gshape = grid.shape

    def vjp(g):
        gg = np.ascontiguousarray(g.reshape(out.shape))
        gs = kernels.bilinear_scatter(gg, yy, xx, h, w)
        return (gs.reshape(gshape),)

    return make_op(out.reshape(out_shape), (grid,), vjp)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``; clears the tape afterwards.

    Every leaf with ``requires_grad`` that took part in the recorded graph has
    its ``.grad`` reset to zeros first, then receives the summed contributions
    of all its consumers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if loss._node is None:
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        loss.grad = np.ones_like(loss.data)
        return
    if loss._node.generation != tape.generation:
        raise ContractError("the tape holding this loss was already consumed by backward()")

    leaves = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._node is None and id(t) not in leaves:
                leaves[id(t)] = t
                t.grad = np.zeros_like(t.data)

    grads = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t._node is None:
                    t.grad = t.grad + gi
                elif key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    finally:
        tape.clear()


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    flat = x0.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x0.copy()))
            flat[i] = orig - h
            fm = float(f(x0.copy()))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x0.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max abs deviation scaled by the larger of the two gradients' max magnitude.

    ``floor`` lower-bounds the scale; gradcheck passes the largest gradient of
    the whole check so an analytically zero gradient (a key bias under softmax)
    is judged against the function's overall slope, not its own noise.
    """
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)
