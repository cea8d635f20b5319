"""Dense float64 tensors with reverse-mode gradient accumulation.

Every op produces a new :class:`Tensor`; when any input requires a gradient the
result remembers its parents and a closure mapping the output gradient to the
input gradients.  Nodes are stamped with a global creation counter, so sorting
the reachable nodes by descending stamp is a reverse topological order.

A graph can be differentiated once.  :func:`backward` releases the closures of
every interior node it visits, and a later call that reaches a released node
raises :class:`~dualdiff.errors.TapeError`.

Stored values must be finite: any op whose result contains NaN or Inf raises
:class:`~dualdiff.errors.NumericOverflowError`.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import DomainError, NumericOverflowError, ShapeError, TapeError

__all__ = [
    "Tensor",
    "backward",
    "concat",
    "elementwise",
    "exp",
    "expm1",
    "is_grad_enabled",
    "layer_norm",
    "log",
    "matmul",
    "no_grad",
    "sigmoid",
    "softmax",
    "softplus",
    "sqrt",
    "tanh",
]

_stamp = itertools.count()
_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericOverflowError(f"{op} produced non-finite values")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dim broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# numpy kernels, shared by the Tensor ops and the plain-array functional API

def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus_np(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _log_np(x):
    x = np.asarray(x, dtype=np.float64)
    if (x <= 0).any():
        raise DomainError("log of a non-positive value")
    return np.log(x)


def _sqrt_np(x):
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any():
        raise DomainError("sqrt of a negative value")
    return np.sqrt(x)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_stamp", "_released", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._stamp = next(_stamp)
        self._released = False
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward_fn, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._stamp = next(_stamp)
        out._released = False
        out._op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
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
        return self._backward is None and not self._released

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms --------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def softplus(self):
        return softplus(self)

    def silu(self):
        return silu(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- binary ops ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    if (bd == 0).any():
        raise DomainError("division by zero")
    out = ad / bd
    return Tensor._from_op(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def matmul(a, b):
    """Batched contraction over the last axis of ``a`` and second-last of ``b``.

    A 1-D ``a`` is treated as a single row, as in numpy.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs a matrix right operand")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._from_op(ad @ bd, (a, b), bw, "matmul")


# -- unary ops ----------------------------------------------------------

def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    if not p.is_integer() and (ad < 0).any():
        raise DomainError("fractional power of a negative value")
    if p < 0 and (ad == 0).any():
        raise DomainError("negative power of zero")
    return Tensor._from_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def _exp_t(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def _expm1_t(a):
    with np.errstate(over="ignore"):
        out = np.expm1(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (out + 1.0),), "expm1")


def _log_t(a):
    ad = a.data
    return Tensor._from_op(_log_np(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid_t(a):
    out = _sigmoid_np(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _tanh_t(a):
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sqrt_t(a):
    out = _sqrt_np(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _softplus_t(a):
    ad = a.data
    return Tensor._from_op(_softplus_np(ad), (a,), lambda g: (g * _sigmoid_np(ad),), "softplus")


def silu(a):
    ad = a.data
    s = _sigmoid_np(ad)
    return Tensor._from_op(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),), "silu")


def clip(a, lo, hi):
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return Tensor._from_op(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,), "clip")


def _dispatch(tensor_fn, array_fn):
    def fn(x):
        if isinstance(x, Tensor):
            return tensor_fn(x)
        return array_fn(np.asarray(x, dtype=np.float64))
    fn.__name__ = tensor_fn.__name__.strip("_").removesuffix("_t")
    return fn


exp = _dispatch(_exp_t, np.exp)
expm1 = _dispatch(_expm1_t, np.expm1)
log = _dispatch(_log_t, _log_np)
sigmoid = _dispatch(_sigmoid_t, _sigmoid_np)
tanh = _dispatch(_tanh_t, np.tanh)
sqrt = _dispatch(_sqrt_t, _sqrt_np)
softplus = _dispatch(_softplus_t, _softplus_np)

_UNARY = {"exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh, "sqrt": sqrt,
          "neg": lambda x: neg(as_tensor(x))}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, a, b=None):
    """Apply the named elementwise op; binary kinds require ``b``."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} takes a single operand")
        return _UNARY[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- reductions and shape ops -------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    full = len(axes) == a.ndim
    out = np.sum(a.data, axis=None if full else axes, keepdims=keepdims)
    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) / float(count)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx):
    """Slice or gather; gathered gradients are scatter-added."""
    shape = a.shape
    fancy = _is_fancy(idx)

    def bw(g):
        z = np.zeros(shape)
        if fancy:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    try:
        out = np.array(a.data[idx])
    except IndexError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._from_op(out, (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), bw, "concat")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), bw, "softmax")


def layer_norm(a, eps=1e-5):
    """Normalise over the last axis (no affine part)."""
    ad = a.data
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    if not np.all(np.isfinite(var)):
        raise NumericOverflowError("layer_norm variance overflowed")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._from_op(xhat, (a,), bw, "layer_norm")


# -- differentiation ----------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring it."""
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise TapeError("graph already differentiated; run a new forward pass")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring a gradient")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        if node._released:
            raise TapeError("graph already differentiated; run a new forward pass")
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    order = sorted(nodes.values(), key=lambda n: n._stamp, reverse=True)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True
