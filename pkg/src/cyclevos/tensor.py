"""Dense arrays with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor`.  Ops are only recorded while a
:class:`Tape` is active *and* at least one input requires a gradient, so the
same network code runs both as plain inference and as a differentiable graph.
Gradients can be taken with respect to any requires-grad tensor, not only
weights (the mask refinement loops rely on this).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()
_dtype = np.float32


class ShapeError(ValueError):
    pass


def default_dtype() -> type:
    return _dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (e.g. float64 for gradient checks)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


class Tensor:
    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.node = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_nonscalar(shape):
    raise ShapeError(f"item: tensor of shape {shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; use as a context manager.

    >>> with Tape() as tape:
    ...     y = sum_all(x * x)
    >>> grads = tape.backward(y)
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.ops.append(_Op(kind, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Return ``{node-id: gradient}`` for every requires-grad tensor reachable from ``loss``."""
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.get(op.output.node)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else prev + gi
        return {k: Tensor._wrap(v) for k, v in grads.items()}

    def grad(self, loss: Tensor, *wrt: Tensor) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. ``wrt`` as arrays; unreachable inputs get zeros."""
        g = self.backward(loss)
        return [g[t.node].data if t.node in g else np.zeros_like(t.data) for t in wrt]


def _stack() -> list:
    s = getattr(_state, "stack", None)
    if s is None:
        s = _state.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (ops inside run as plain array code)."""
    s = _stack()
    saved = list(s)
    s.clear()
    try:
        yield
    finally:
        s.extend(saved)


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        res = Tensor._wrap(out, requires_grad=True)
        tape.record(kind, inputs, res, backward)
        return res
    return Tensor._wrap(out)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-a.data))).astype(a.data.dtype, copy=False)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", a.data * pos, (a,), lambda g: (g * pos,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError(f"log: non-positive input (min {a.data.min()}); clamp before taking logs")
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    _same_shape("minimum", a, b)
    first = a.data <= b.data
    out = np.where(first, a.data, b.data)
    return _emit("minimum", out, (a, b), lambda g: (g * first, g * ~first))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _same_shape("maximum", a, b)
    first = a.data >= b.data
    out = np.where(first, a.data, b.data)
    return _emit("maximum", out, (a, b), lambda g: (g * first, g * ~first))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.data.dtype, copy=False)
    return _emit("clip", out, (a,), lambda g: (g * inside,))


# -- reductions ------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.data.dtype
    return _emit("sum", np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def mean_all(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.data.dtype, a.size
    out = np.asarray(a.data.sum() / n, dtype=dt)
    return _emit("mean", out, (a,), lambda g: (np.full(shape, g / n, dtype=dt),))


# -- structural ---------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def index(a: Tensor, i: int) -> Tensor:
    """Select ``a[i]`` along the leading axis."""
    shape, dt = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dt)
        full[i] = g
        return (full,)

    return _emit("index", a.data[i].copy(), (a,), back)


# -- linear algebra / nn -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), back)


def _zero_pad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # np.pad carries enough per-call overhead to show up in training profiles
    if not (ph or pw):
        return a
    out = np.zeros((a.shape[0], a.shape[1] + 2 * ph, a.shape[2] + 2 * pw), dtype=a.dtype)
    out[:, ph : ph + a.shape[1], pw : pw + a.shape[2]] = a
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    C = xp.shape[0]
    cols = np.empty((C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + s * Ho : s, j : j + s * Wo : s]
    return cols.reshape(C * kh * kw, Ho * Wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a ``(C, H, W)`` input with ``(O, C, kh, kw)`` filters, zero padding."""
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape mismatch {b.shape} vs {w.shape}")
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    p, s = padding, stride
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = _zero_pad(x.data, p, p)
    cols = _im2col(xp, kh, kw, s, Ho, Wo)
    wm = w.data.reshape(O, -1)
    # np.dot always goes through BLAS; matmul takes a slow path for rank-1 products
    out = np.dot(wm, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(O, Ho, Wo)
    inputs = (x, w) if b is None else (x, w, b)
    need_x = x.requires_grad

    def back(g):
        gm = g.reshape(O, -1)
        gw = np.dot(gm, cols.T).reshape(w.shape)
        gx = None
        if need_x:
            if s == 1 and p <= min(kh, kw) - 1:
                # stride 1: the input gradient is a full correlation with the flipped kernels
                qh, qw = kh - 1 - p, kw - 1 - p
                gp = _zero_pad(g, qh, qw)
                wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(C, -1)
                gx = np.dot(wf, _im2col(gp, kh, kw, 1, H, W)).reshape(C, H, W)
            else:
                gcols = np.dot(wm.T, gm).reshape(C, kh, kw, Ho, Wo)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + s * Ho : s, j : j + s * Wo : s] += gcols[:, i, j]
                gx = gxp[:, p : p + H, p : p + W] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return _emit("conv2d", out, inputs, back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling of a ``(C, H, W)`` map."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x: expected (C, H, W), got {x.shape}")
    C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _emit("upsample2x", out, (x,), lambda g: (g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)),))


# -- checking -------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, reference_dtype=np.float64) -> float:
    """Max relative error between tape gradients of scalar ``f`` and central differences.

    The analytic gradient is taken in float64. The central differences are
    evaluated in ``reference_dtype``; passing ``np.longdouble`` pushes their
    rounding noise (about ulp(f)/h) well below the 1e-8 denominator floor.
    ``f`` must be pure in its argument.
    """
    with precision(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        xt = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            y = f(xt)
        (analytic,) = tape.grad(y, xt)
    with precision(reference_dtype):
        flat = x0.reshape(-1).astype(reference_dtype)
        fd = np.empty(flat.size, dtype=np.float64)
        for k in range(flat.size):
            xp, xm = flat.copy(), flat.copy()
            xp[k] += h
            xm[k] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).data
            fm = f(Tensor(xm.reshape(x0.shape))).data
            fd[k] = float((fp - fm) / (xp[k] - xm[k]))
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0
