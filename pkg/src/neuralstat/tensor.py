"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Every op records a closure mapping the upstream gradient to gradients for its
parents. ``backward`` walks the tape in reverse topological order. The tape is
rebuilt on every forward pass, so there is nothing to reset between steps
except accumulated ``.grad`` buffers.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class DomainError(ValueError):
    """Input lies outside the domain of the op (e.g. log of a non-positive value)."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape. Thread-local."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basics ---------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# -- elementwise binary ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; a Python scalar operand gives scalar-mul."""
    if np.isscalar(b) and isinstance(a, Tensor):
        s = float(b)
        return _node(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")
    if np.isscalar(a) and isinstance(b, Tensor):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a, b) -> Tensor:
    """``(..., k) @ (k, m)``; leading axes of ``a`` are treated as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(ad @ bd, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Fused ``x @ weight + bias`` (one tape node)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {weight.shape} do not conform")
    xd, wd = x.data, weight.data
    out = xd @ wd
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
        out += bias.data
        parents = (x, weight, bias)
    need_x = x.requires_grad

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if need_x else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    return _node(out, parents, back, "linear")


# -- elementwise unary ----------------------------------------------------------
def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log: input has non-positive entries (min {x.data.min()!r})")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def relu(x) -> Tensor:
    # subgradient at exactly 0 is 0
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    y = np.where(pos, x.data, neg)
    return _node(y, (x,), lambda g: (g * np.where(pos, 1.0, neg + alpha),), "elu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably."""
    x = as_tensor(x)
    xd = x.data
    y = np.logaddexp(0.0, xd)
    return _node(y, (x,), lambda g: (g * np.exp(xd - y),), "softplus")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# -- reductions and shape ops ---------------------------------------------------
def _check_axis(op: str, x: Tensor, axis) -> None:
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ShapeError(f"{op}: axis {a} invalid for shape {x.shape}")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_axis("sum", x, axis)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum along ``axis`` scaled by 1/extent (exactly that, so the two agree bitwise)."""
    x = as_tensor(x)
    _check_axis("mean", x, axis)
    if axis is None:
        extent = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        extent = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / extent)


def tmax(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient goes to the first maximiser."""
    x = as_tensor(x)
    _check_axis("max", x, axis)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _node(y if keepdims else np.squeeze(y, axis), (x,), back, "max")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, back, "concat")


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    _check_axis("slice", x, axis)
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of shape {x.shape}")
    index = (slice(None),) * ax + (slice(start, stop),)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _node(x.data[index], (x,), back, "slice")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _node(y, (x,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {shape}") from None
    return _node(y, (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# -- reverse pass -----------------------------------------------------------------
def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# -- parameters and Adam ----------------------------------------------------------
class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment estimates."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.op = "param"
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


def adam_step(param: Parameter, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. The gradient is left for the caller to reset."""
    if param.grad is None:
        raise ValueError("adam_step: parameter has no gradient")
    g = param.grad
    param.step_count += 1
    t = param.step_count
    param.adam_m *= beta1
    param.adam_m += (1.0 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1.0 - beta2) * (g * g)
    m_hat = param.adam_m / (1.0 - beta1 ** t)
    v_hat = param.adam_v / (1.0 - beta2 ** t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                adam_step(p, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


# -- gradient checking --------------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = Tensor(np.array(point, dtype=DTYPE), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    base = x.data.copy()
    numeric = np.zeros_like(base)
    with no_grad():
        for i in np.ndindex(base.shape):
            probe = base.copy()
            probe[i] += h
            fp = f(Tensor(probe)).item()
            probe[i] -= 2 * h
            fm = f(Tensor(probe)).item()
            numeric[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      h: float = 1e-5) -> float:
    """Same error measure as :func:`grad_check`, over every entry of every parameter.

    ``loss_fn`` must be deterministic (frozen noise).
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - (fp - fm) / (2 * h)) / max(1.0, abs(a)))
    return worst
