"""Dense tensors with reverse-mode differentiation.

Arrays are stored as numpy buffers; every differentiable op records its
parents and a backward rule that maps the output gradient to one gradient
per parent. ``backward`` replays those rules in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

# tolerances used by the gradient checks, per precision
GRAD_TOL = {np.float64: 1e-5, np.float32: 1e-2}

_grad_enabled = True
_faulty_ops: set[str] = {
    op.strip() for op in os.environ.get("FUSIONFORMER_FAULT", "").split(",") if op.strip()
}


class ShapeError(ValueError):
    pass


class NonDeterministicError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_fault(*ops: str):
    """Corrupt the backward rule of the named ops (test hook for the gradient checker)."""
    added = set(ops) - _faulty_ops
    _faulty_ops.update(added)
    try:
        yield
    finally:
        _faulty_ops.difference_update(added)


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if floating else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output; ``rule(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _result(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


# -- reductions --------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (a,),
                   lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size // max(np.asarray(out).size, 1) if axis is not None else a.size
    return _result(np.asarray(out), (a,),
                   lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / n,), "mean")


def l2_norm_lastaxis(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the gradient at an exact zero vector is taken as 0."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def rule(g):
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, g / safe, 0.0)
        return (a.data * coef[..., None],)

    return _result(norm, (a,), rule, "l2_norm_lastaxis")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold the batch axes into one contraction
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _result(a.data @ b.data, (a, b), rule, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), rule, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then apply ``gamma``/``beta``."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last axis {n}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _result(out, (x, gamma, beta), rule, "layer_norm")


def framewise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Kernel-size-1 convolution over the frame axis.

    ``x`` is ``(..., F_in, M)``; ``weight`` is ``(F_out, F_in)`` and ``bias`` is
    ``(F_out,)``. The same frame mixing is applied to every feature column.
    """
    if x.ndim < 2 or weight.ndim != 2 or weight.shape[1] != x.shape[-2]:
        raise ShapeError(f"framewise_conv1d: weight {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"framewise_conv1d: bias {bias.shape} vs weight {weight.shape}")
    out = weight.data @ x.data + bias.data[:, None]

    def rule(g):
        gx = weight.data.T @ g
        gw = g @ np.swapaxes(x.data, -1, -2)
        while gw.ndim > 2:
            gw = gw.sum(axis=0)
        gb = g.sum(axis=-1)
        while gb.ndim > 1:
            gb = gb.sum(axis=0)
        return gx, gw, gb

    return _result(out, (x, weight, bias), rule, "framewise_conv1d")


# -- shape ops ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, order) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise ShapeError(f"permute: {order} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(order))
    return _result(np.ascontiguousarray(np.transpose(x.data, order)), (x,),
                   lambda g: (np.transpose(g, inverse),), "permute")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: empty input list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: extent mismatch between {ref} and {x.shape} along axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _result(np.concatenate([x.data for x in xs], axis=ax), xs,
                   lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of ``concat``: cut ``x`` into consecutive pieces of the given extents."""
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover extent {x.shape[ax]}")
    pieces, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        pieces.append(getitem(x, tuple(idx)))
        start += n
    return pieces


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def rule(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (x,), rule, "getitem")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
                for x in xs]
    return concat(expanded, axis=axis)


# -- autodiff driver ---------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad; repeated calls accumulate."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        if node.op in _faulty_ops:
            parent_grads = tuple(None if pg is None else pg * 1.5 for pg in parent_grads)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# -- finite differences ------------------------------------------------------

def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the entries of ``x`` (perturbed in place)."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def finite_diff_check(f: Callable, x: Tensor | Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar tensor built from the
    tensors in ``x``. It is evaluated twice up front; differing outputs raise
    ``NonDeterministicError``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    return max(finite_diff_report(f, {str(i): t for i, t in enumerate(xs)}, h).values(), default=0.0)


def finite_diff_report(f: Callable, named: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Per-tensor max relative error; see ``finite_diff_check``."""
    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise NonDeterministicError(f"function returned {first!r} then {second!r} for the same input")
    for t in named.values():
        t.requires_grad = True
        t.zero_grad()
    backward(f())
    return {name: relative_error(t.grad, numerical_grad(f, t, h)) for name, t in named.items()}
