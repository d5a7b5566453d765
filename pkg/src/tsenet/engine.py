"""Reverse-mode differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure computing the parents' gradient contributions.
The graph is discarded after :func:`backward`, so a fresh tape is built on
every training step.

Image tensors use a channels-last layout ``(B, H, W, C)`` so that the 3x3
convolution reduces to one contiguous matrix product.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array with an optional gradient and a link into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), backward, "matmul")


# ----------------------------------------------------------------------------
# unary maps


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError(f"log: non-positive input (min {x.data.min():.3g})")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor."""
    index = np.asarray(index, dtype=np.intp)
    size, shape = x.size, x.shape

    def backward(g):
        full = np.zeros(size)
        np.add.at(full, index, g)
        return (full.reshape(shape),)

    return _record(x.data.reshape(-1)[index], (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: shapes {shapes} disagree off axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ----------------------------------------------------------------------------
# image ops, channels-last (B, H, W, C)

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _check_image(kind: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{kind}: expected (B, H, W, C) input, got shape {x.shape}")


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded 3x3 convolution (cross-correlation).

    ``weight`` has shape ``(3, 3, C_in, C_out)``; output keeps the spatial size.
    All nine taps are applied in one matrix product over the padded grid and
    the partial results are then summed at their shifted positions, which
    touches far less memory than an explicit im2col buffer.
    """
    _check_image("conv2d_3x3", x)
    b, h, w, c = x.shape
    if weight.data.ndim != 4 or weight.shape[:3] != (3, 3, c):
        raise ValueError(f"conv2d_3x3: weight shape {weight.shape} does not fit input {x.shape}")
    o = weight.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(-1, c)
    wcat = weight.data.transpose(2, 0, 1, 3).reshape(c, 9 * o)
    taps = (xp @ wcat).reshape(b, h + 2, w + 2, 9, o)
    out = taps[:, 0:h, 0:w, 0].copy()
    for k in range(1, 9):
        dy, dx = _OFFSETS[k]
        out += taps[:, dy:dy + h, dx:dx + w, k]
    del taps
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad

    def backward(g):
        dtaps = np.zeros((b, h + 2, w + 2, 9, o))
        for k, (dy, dx) in enumerate(_OFFSETS):
            dtaps[:, dy:dy + h, dx:dx + w, k] = g
        dtaps = dtaps.reshape(-1, 9 * o)
        gw = (xp.T @ dtaps).reshape(c, 3, 3, o).transpose(1, 2, 0, 3)
        gx = None
        if need_x:
            gx = (dtaps @ wcat.T).reshape(b, h + 2, w + 2, c)[:, 1:-1, 1:-1, :]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 1, 2)),)
        return grads

    return _record(out, parents, backward, "conv2d_3x3")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise linear map over the channel axis; ``weight`` is ``(C_in, C_out)``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def avgpool2x(x: Tensor) -> Tensor:
    _check_image("avgpool2x", x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x: spatial dims of {x.shape} must be even")
    out = x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2),)

    return _record(out, (x,), backward, "avgpool2x")


def upsample2x_nearest(x: Tensor) -> Tensor:
    _check_image("upsample2x_nearest", x)
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _record(out, (x,), backward, "upsample2x_nearest")


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d_3x3": conv2d_3x3,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "abs": abs,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "upsample2x_nearest": upsample2x_nearest,
    "avgpool2x": avgpool2x,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply an operation by name, e.g. ``forward_op("add", [a, b])``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph behind ``root`` is released afterwards.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=DTYPE)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
