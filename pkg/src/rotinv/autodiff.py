"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-free engine in the micrograd style: every op returns a new
Tensor that remembers its parents and one vector-Jacobian callback per
parent.  ``backward`` topologically sorts the graph and accumulates
gradients.  Everything is float64 and single-threaded per graph.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A forward op produced a NaN or Inf value."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"non-finite values produced by op '{op}'")


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _all_finite(a: np.ndarray) -> bool:
    # NaN/Inf both propagate through sum(); cheaper than isfinite().all()
    # on large arrays because no bool temporary is allocated.
    return bool(np.isfinite(a.sum()))


# When False, only ops that can create non-finite values from finite inputs
# (div, log, sqrt, exp, normalize) are checked; training loops additionally
# watch the loss.  Flip on for exhaustive per-op checking in tests.
_strict_finite_checks = False


def set_strict_finite_checks(enabled: bool) -> bool:
    """Toggle per-op finite checking on every op; returns the previous value."""
    global _strict_finite_checks
    prev = _strict_finite_checks
    _strict_finite_checks = bool(enabled)
    return prev


class Tensor:
    """A float64 ndarray plus the graph edges needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise ValueError("tensor values must be finite")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'!r})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter(Tensor):
    """A named leaf tensor with requires_grad set; the unit of checkpointing."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, op: str, parents: Sequence[Tensor],
             vjps: Sequence[Callable[[np.ndarray], np.ndarray]],
             check: bool = False) -> Tensor:
    if (check or _strict_finite_checks) and not _all_finite(data):
        raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        kept = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        out._parents = tuple(p for p, _ in kept)
        out._vjps = tuple(v for _, v in kept)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    return _from_op(a.data + b.data, "add", (a, b),
                    (lambda g: _unbroadcast(g, a.shape),
                     lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _from_op(a.data - b.data, "sub", (a, b),
                    (lambda g: _unbroadcast(g, a.shape),
                     lambda g: _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _from_op(a.data * b.data, "mul", (a, b),
                    (lambda g: _unbroadcast(g * b.data, a.shape),
                     lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _from_op(out, "div", (a, b),
                    (lambda g: _unbroadcast(g / b.data, a.shape),
                     lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
                    check=True)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _from_op(out, "sqrt", (a,), (lambda g: g * (0.5 / out),), check=True)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _from_op(out, "exp", (a,), (lambda g: g * out,), check=True)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _from_op(out, "log", (a,), (lambda g: g / a.data,), check=True)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _from_op(np.where(mask, a.data, 0.0), "relu", (a,),
                    (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    return _from_op(a.data.reshape(shape), "reshape", (a,),
                    (lambda g: g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _from_op(a.data.transpose(axes), "transpose", (a,),
                    (lambda g: g.transpose(inv),))


def swap_last_axes(a: Tensor) -> Tensor:
    order = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, order)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _from_op(np.broadcast_to(a.data, shape), "broadcast_to", (a,),
                    (lambda g: _unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _from_op(data, "concat", tensors,
                    [make_vjp(i) for i in range(len(tensors))])


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    nd = tensors[0].ndim + 1
    ax = axis % nd
    shape = list(tensors[0].shape)
    shape.insert(ax, 1)
    return concat([reshape(t, shape) for t in tensors], axis=ax)


def getitem(a: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)
    data = np.asarray(a.data[key], dtype=np.float64)

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return out

    return _from_op(data, "getitem", (a,), (vjp,))


def gather(a: Tensor, indices) -> Tensor:
    """Select rows of `a` along axis 0; `indices` may have any shape."""
    return getitem(a, np.asarray(indices, dtype=np.int64))


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant boolean mask (a where True)."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _wrap(a), _wrap(b)
    return _from_op(np.where(mask, a.data, b.data), "where", (a, b),
                    (lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape),
                     lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# reductions and linear algebra


def _sum_vjp(a: Tensor, axis, keepdims):
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)
    return vjp


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    return _from_op(np.asarray(data), "sum", (a,),
                    (_sum_vjp(a, axis, keepdims),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; backward routes to the argmax (lowest index on ties)."""
    idx = np.argmax(a.data, axis=axis)  # first occurrence wins ties
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros(a.shape)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
        return out

    return _from_op(data, "max", (a,), (vjp,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def vjp_a(g):
        if a.ndim == 2 and b.ndim > 2:
            # shared left operand: flatten the batch into one GEMM instead of
            # materializing per-batch outer products
            return np.einsum("...mn,...kn->mk", g, b.data)
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def vjp_b(g):
        if b.ndim == 2 and a.ndim > 2:
            flat_a = a.data.reshape(-1, a.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            return flat_a.T @ flat_g
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _from_op(data, "matmul", (a, b), (vjp_a, vjp_b))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _from_op(s, "softmax", (a,), (vjp,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = tmax(a, axis=axis, keepdims=True)
    shifted = sub(a, m)
    return sub(shifted, log(tsum(exp(shifted), axis=axis, keepdims=True)))


NORM_EPS = 1e-12


def normalize(a: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / max(||x||, eps) along one axis; the guard keeps zero inputs finite."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    guarded = np.maximum(n, eps)
    out = a.data / guarded

    def vjp(g):
        live = n > eps  # below the guard the norm is a constant
        dot = (g * a.data).sum(axis=axis, keepdims=True)
        grad = g / guarded - np.where(live, a.data * dot / guarded**3, 0.0)
        return grad

    return _from_op(out, "normalize", (a,), (vjp,), check=True)


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product over a trailing axis of extent 3."""
    data = np.cross(a.data, b.data)
    return _from_op(data, "cross", (a, b),
                    (lambda g: _unbroadcast(np.cross(b.data, g), a.shape),
                     lambda g: _unbroadcast(np.cross(g, a.data), b.shape)))


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Accumulate dloss/dx into .grad for every tensor reachable from `loss`.

    With `params` given, returns the gradient store {name: gradient}; any
    parameter the loss does not depend on gets a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contribution = vjp(g)
            if parent.grad is None:
                parent.grad = contribution
            else:
                parent.grad = parent.grad + contribution
    store: dict[str, np.ndarray] = {}
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros(p.shape)
            store[p.name] = p.grad
    return store


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Cosine annealing from lr0 at epoch 0 to 0 at epoch == total_epochs."""
    return lr0 * (1.0 + np.cos(np.pi * epoch / total_epochs)) / 2.0


def sgd_step(values: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """One SGD-with-momentum update; returns (new_values, new_velocity)."""
    g = grad + weight_decay * values if weight_decay else grad
    v = momentum * velocity + g
    return values - lr * v, v


class SGD:
    """SGD with momentum and weight decay over a list of Parameters."""

    def __init__(self, params: Sequence[Parameter], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            p.data, v_new = sgd_step(p.data, g, v, self.lr,
                                     self.momentum, self.weight_decay)
            v[...] = v_new

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------------------
# checkpoint format: magic "LCKP", little-endian, float64 values

CHECKPOINT_MAGIC = b"LCKP"


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = values.astype(np.float64)
    return out
