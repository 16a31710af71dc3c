"""Dense float64 tensors with reverse-mode differentiation.

Each operation records its parents and a closure mapping the upstream
gradient to one gradient per parent. ``Tensor.backward`` walks the graph
once in reverse topological order, accumulates into ``.grad`` and then
releases the graph, so a second backward through the same nodes raises
:class:`GraphError`.

Batched layouts are accepted wherever the single-sample layout is, e.g.
``conv2d`` takes ``C×H×W`` or ``N×C×H×W``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericDomainError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "custom_op",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "sqrt",
    "relu",
    "matmul",
    "softmax",
    "log_softmax",
    "conv2d",
    "avgpool2d",
    "reduce",
    "sum",
    "mean",
    "max",
    "reshape",
    "transpose",
    "concat",
    "gradcheck",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-dimensional float64 array that can take part in differentiation.

    Leaves created with ``requires_grad=True`` own a zero-initialised
    ``grad`` of the same shape; gradients accumulate across backward calls
    until cleared with :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._freed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``grad`` defaults to ones for a scalar output. The graph is
        released afterwards.
        """
        if self._freed:
            raise GraphError("graph already released by a previous backward; run a new forward")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = pending.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; models here are shallow but loss graphs fan out widely
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Wrap a forward result computed outside this module as a graph node.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out._op = op
    out._freed = False
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return custom_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    """Exact quotient; zero divisors are rejected, callers add their own epsilon."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise NumericDomainError("division by zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def backward(g):
        if np.any(out == 0):
            raise NumericDomainError("sqrt gradient undefined at 0")
        return (g * 0.5 / out,)

    return custom_op(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return custom_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_UNARY = {"exp": exp, "log": log, "neg": neg, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_id: str, a, b=None) -> Tensor:
    """Dispatch one of add, sub, mul, div, exp, log, neg, square by name."""
    if op_id in _BINARY:
        if b is None:
            raise ValueError(f"{op_id} needs two operands")
        return _BINARY[op_id](a, b)
    if op_id in _UNARY:
        if b is not None:
            raise ValueError(f"{op_id} takes one operand")
        return _UNARY[op_id](a)
    raise ValueError(f"unknown elementwise op {op_id!r}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# softmax


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolution and pooling


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C×H×W or N×C×H×W, got {x.shape}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is ``C_in×H×W`` or ``N×C_in×H×W``; ``weight`` is
    ``C_out×C_in×k_h×k_w``; output extents are ``⌊(H+2p−k)/s⌋+1``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if padding < 0:
        raise ShapeError("padding must be >= 0")
    xb, squeeze = _as_batched(x)
    n, c, h, w = xb.shape
    if weight.ndim != 4 or weight.shape[1] != c:
        raise ShapeError(f"kernel shape {weight.shape} incompatible with {c} input channels")
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}×{kw} larger than padded input {hp}×{wp}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb.data
    # im2col in channel-major layout: rows (c, kh, kw), columns (n, ho, wo)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if xb.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    parents = (xb, weight) if bias is None else (xb, weight, bias)
    res = custom_op(np.ascontiguousarray(out), parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def avgpool2d(x, kernel: int = 3, stride: int = 1) -> Tensor:
    """Mean over ``kernel×kernel`` windows of the valid region (no padding)."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("avgpool2d needs at least two spatial axes")
    h, w = x.shape[-2:]
    if h < kernel or w < kernel:
        raise ShapeError(f"spatial size {h}×{w} smaller than pooling kernel {kernel}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    out = win.mean(axis=(-2, -1))
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gx[..., i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (gx,)

    return custom_op(out, (x,), backward, "avgpool2d")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(x: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(_check_axis(x, a) for a in axis)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"repeated reduction axes {axis}")
    return axes


def _expand(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axes(x, axis)
    if x.size == 0:
        raise NumericDomainError("empty reduction")
    return custom_op(
        x.data.sum(axis=axes, keepdims=keepdims),
        (x,),
        lambda g: (_expand(g, x.shape, axes, keepdims).copy(),),
        "sum",
    )


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(x, axis)
    if x.size == 0:
        raise NumericDomainError("empty reduction")
    count = int(np.prod([x.shape[a] for a in axes]))
    return custom_op(
        x.data.mean(axis=axes, keepdims=keepdims),
        (x,),
        lambda g: (_expand(g, x.shape, axes, keepdims) / count,),
        "mean",
    )


def max(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum; the gradient goes to the first maximal element (lowest linear index)."""
    x = _as_tensor(x)
    axes = _norm_axes(x, axis)
    if x.size == 0:
        raise NumericDomainError("empty reduction")
    keep = tuple(a for a in range(x.ndim) if a not in axes)
    perm = keep + axes
    moved = x.data.transpose(perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals.reshape([1 if a in axes else x.shape[a] for a in range(x.ndim)]) if keepdims else vals

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], np.asarray(g).reshape(lead)[..., None], axis=-1)
        return (gflat.reshape(moved.shape).transpose(np.argsort(perm)),)

    return custom_op(np.asarray(out, dtype=np.float64), (x,), backward, "max")


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op_id: str, x, axes=None, keepdims: bool = False) -> Tensor:
    if op_id not in _REDUCE:
        raise ValueError(f"unknown reduction {op_id!r}")
    return _REDUCE[op_id](x, axes, keepdims)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return custom_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {x.shape}")
    inv = np.argsort([a % x.ndim for a in axes])
    return custom_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return custom_op(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return custom_op(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. The relative error of each
    input is ``‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, 1e-12)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = fn(*[Tensor(b) for b in arrays]).item()
            flat[i] = orig - h
            with no_grad():
                fm = fn(*[Tensor(b) for b in arrays]).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        analytic = leaves[k].grad
        denom = np.maximum(np.maximum(np.linalg.norm(analytic), np.linalg.norm(numeric)), 1e-12)
        worst = np.maximum(worst, np.linalg.norm(analytic - numeric) / denom)
    return float(worst)
