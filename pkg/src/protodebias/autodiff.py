"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The engine is deliberately small: it supports exactly the operations the
models in this package need (dense and 3x3 convolutional layers, pooling,
reductions, and numerically stable log-softmax composites). Everything runs
in double precision, and every primitive's gradient is checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Var",
    "as_var",
    "parameter",
    "stop_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "relu",
    "clip",
    "matmul",
    "vsum",
    "vmean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "take_cols",
    "min_axis",
    "logsumexp",
    "log_softmax",
    "softmax",
    "conv2d",
    "avg_pool2",
    "spatial_mean",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the computation graph holding a float64 array.

    `requires_grad` is inherited from parents; constants built from raw
    arrays carry no graph and cost nothing on the backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._vjp = _vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into each leaf's .grad. Root must be scalar."""
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar root")
        order: list[Var] = []
        state: dict[int, int] = {}
        stack = [self]
        while stack:
            node = stack[-1]
            st = state.get(id(node), 0)
            if st == 0:
                state[id(node)] = 1
                for p in node._parents:
                    if p.requires_grad and state.get(id(p), 0) == 0:
                        stack.append(p)
            else:
                stack.pop()
                if st == 1:
                    state[id(node)] = 2
                    order.append(node)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def parameter(data) -> Var:
    """A trainable leaf (gradient accumulates into .grad)."""
    return Var(np.array(data, dtype=np.float64), requires_grad=True)


def stop_grad(v: Var) -> Var:
    """Detach from the graph; shares the underlying array."""
    return Var(as_var(v).data)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.data + b.data,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.data - b.data,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.data * b.data,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.data / b.data,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.data, _parents=(a,), _vjp=lambda g: (-g,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    return Var(out, _parents=(a,), _vjp=lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.data), _parents=(a,), _vjp=lambda g: (g / a.data,))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.data)
    return Var(out, _parents=(a,), _vjp=lambda g: (g * 0.5 / out,))


def square(a) -> Var:
    a = as_var(a)
    return Var(a.data * a.data, _parents=(a,), _vjp=lambda g: (g * 2.0 * a.data,))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.data)
    return Var(out, _parents=(a,), _vjp=lambda g: (g * (1.0 - out * out),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.data > 0
    return Var(np.where(mask, a.data, 0.0), _parents=(a,), _vjp=lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Var:
    a = as_var(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Var(np.clip(a.data, lo, hi), _parents=(a,), _vjp=lambda g: (g * mask,))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return Var(
        a.data @ b.data,
        _parents=(a, b),
        _vjp=lambda g: (g @ b.data.T, a.data.T @ g),
    )


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Var(out, _parents=(a,), _vjp=vjp)


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return Var(out, _parents=(a,), _vjp=vjp)


def reshape(a, shape) -> Var:
    a = as_var(a)
    return Var(a.data.reshape(shape), _parents=(a,), _vjp=lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Var(
        a.data.transpose(axes),
        _parents=(a,),
        _vjp=lambda g: (g.transpose(inv),),
    )


def concat(parts, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def vjp(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return Var(out, _parents=tuple(parts), _vjp=vjp)


def take_rows(a, idx) -> Var:
    """Index along axis 0 with an integer array; duplicates accumulate on backward."""
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.data[idx], _parents=(a,), _vjp=vjp)


def take_cols(a, idx) -> Var:
    """Index along axis 1 of a 2-D Var."""
    return transpose(take_rows(transpose(a), idx))


def min_axis(a, axis: int) -> Var:
    """Minimum over one axis; the gradient routes to the first argmin (ties included)."""
    a = as_var(a)
    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def vjp(g):
        gv = np.zeros_like(a.data)
        np.put_along_axis(gv, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gv,)

    return Var(out, _parents=(a,), _vjp=vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Var:
    """Stable log-sum-exp; the max shift is treated as a constant, which leaves
    the gradient exact."""
    a = as_var(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = add(log(vsum(exp(sub(a, Var(m))), axis=axis, keepdims=True)), Var(m))
    if keepdims:
        return out
    return reshape(out, np.squeeze(out.data, axis=axis).shape)


def log_softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Var:
    return exp(log_softmax(a, axis=axis))


def conv2d(x, w, b, pad: int = 1) -> Var:
    """2-D convolution (stride 1) on NCHW input; `w` is (F, C, k, k), `b` is (F,)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    n, c, h, wd = x.data.shape
    f, c2, k, k2 = w.data.shape
    if c != c2 or k != k2:
        raise ValueError("kernel shape incompatible with input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * k * k)
    wmat = w.data.reshape(f, c * k * k)
    out = cols @ wmat.T + b.data
    out = out.transpose(0, 2, 1).reshape(n, f, oh, ow)

    def vjp(g):
        gmat = g.reshape(n, f, oh * ow).transpose(0, 2, 1)
        gb = gmat.sum(axis=(0, 1))
        gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(f, c, k, k)
        gcols = gmat @ wmat
        gwin = gcols.reshape(n, oh, ow, c, k, k)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + oh, kj:kj + ow] += gwin[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return Var(out, _parents=(x, w, b), _vjp=vjp)


def avg_pool2(x) -> Var:
    """2x2 average pooling on NCHW input with even spatial dims."""
    x = as_var(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2 requires even spatial dims")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return Var(out, _parents=(x,), _vjp=vjp)


def spatial_mean(x) -> Var:
    """Global average over the two spatial axes of NCHW input."""
    x = as_var(x)
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return Var(out, _parents=(x,), _vjp=vjp)
