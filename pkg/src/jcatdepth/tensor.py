"""Dense tensors with tape-based reverse-mode autodiff on top of numpy.

Every differentiable op builds its output through :func:`_node`, which records
the parent tensors and a closure mapping the output gradient to one gradient
per parent. :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order and accumulates into the ``grad`` of leaf tensors.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "ConfigError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "concat",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "softmax",
    "layer_norm",
    "batch_norm",
    "bilinear_sample",
    "BilinearPlan",
    "gelu",
    "relu",
    "sigmoid",
    "tanh",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class ConfigError(ValueError):
    """A layer or model configuration is internally inconsistent."""


_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _CHECK_FINITE and arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Without an explicit seed the tensor must hold exactly one element.
        Calling again without clearing grads accumulates.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS: SPN unrolls and deep encoders overflow Python recursion
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


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power() only supports scalar exponents")
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at 0
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _node(out, (a,), backward, "gelu")


# -- reductions -------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def max_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties send the whole gradient to the first maximiser."""
    axes = _norm_axis(axis, a.ndim)
    out_k = a.data.max(axis=axes, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = a.data == out_k
        # keep only the first hit along the flattened reduced axes
        moved = np.moveaxis(hit, axes, tuple(range(a.ndim - len(axes), a.ndim)))
        flat = moved.reshape(moved.shape[: a.ndim - len(axes)] + (-1,))
        first = np.zeros_like(flat)
        idx = flat.argmax(axis=-1)
        np.put_along_axis(first, idx[..., None], True, axis=-1)
        first = np.moveaxis(first.reshape(moved.shape),
                            tuple(range(a.ndim - len(axes), a.ndim)), axes)
        return (g * first,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    return _node(np.asarray(out), (a,), backward, "max")


# -- shape ops --------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(np.array(out), (a,), backward, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward, "concat")


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


# -- convolutions -----------------------------------------------------------
def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    before, after = padding
    return int(before), int(after)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding=0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIkk weights.

    ``padding`` is either an int or a ``(before, after)`` pair applied to both
    spatial axes. The output size must come out integral; there is no silent
    flooring.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    p0, p1 = _pad_pair(padding)
    s = int(stride)
    span_h, span_w = H + p0 + p1 - kh, W + p0 + p1 - kw
    if span_h < 0 or span_w < 0 or span_h % s or span_w % s:
        raise ShapeError(
            f"conv2d output size not integral: H={H}, W={W}, k={kh}, stride={s}, padding={padding}")
    Ho, Wo = span_h // s + 1, span_w // s + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (p0, p1), (p0, p1))) if (p0 or p1) else x.data
    # channel-major columns (kh, kw, C, B, Ho, Wo): every slice copy moves contiguous rows
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((kh, kw, C, B, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xc[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    cols2d = cols.reshape(kh * kw * C, B * Ho * Wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = wmat @ cols2d
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def backward(g):
        gx = gw = gb = None
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        if weight.requires_grad:
            gw = (g2d @ cols2d.T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2d.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ g2d).reshape(kh, kw, C, B, Ho, Wo)
            gxc = np.zeros(xc.shape, dtype=xc.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxc[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[i, j]
            gx = gxc[:, :, p0:p0 + H, p0:p0 + W].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     padding: int = 1, output_padding: int = 1) -> Tensor:
    """Transposed convolution with weight layout (C_in, C_out, k, k).

    Only configurations that scale the spatial size by exactly ``stride`` are
    accepted (3x3, stride 2, padding 1, output_padding 1 doubles).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-D input and weight")
    B, C, H, W = x.shape
    Cw, O, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {C}, weight {Cw}")
    s, p, op = int(stride), int(padding), int(output_padding)
    Ho = (H - 1) * s - 2 * p + kh + op
    Wo = (W - 1) * s - 2 * p + kw + op
    if Ho != s * H or Wo != s * W or op >= s:
        raise ShapeError(
            f"conv_transpose2d config (k={kh}, stride={s}, padding={p}, output_padding={op}) "
            f"maps {H}x{W} to {Ho}x{Wo}, not an exact x{s} upsampling")
    full_h = max((H - 1) * s + kh, p + Ho)
    full_w = max((W - 1) * s + kw, p + Wo)

    xmat = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(C, B * H * W)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kh * kw * O, C)
    contrib = (wmat @ xmat).reshape(kh, kw, O, B, H, W)
    full = np.zeros((O, B, full_h, full_w), dtype=contrib.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + s * H:s, j:j + s * W:s] += contrib[i, j]
    out = full[:, :, p:p + Ho, p:p + Wo]
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gx = gw = gb = None
        gfull = np.zeros((O, B, full_h, full_w), dtype=g.dtype)
        gfull[:, :, p:p + Ho, p:p + Wo] = g.transpose(1, 0, 2, 3)
        # gathered[i, j, o, b, h, w] = gfull[o, b, i + s*h, j + s*w]
        gathered = np.empty((kh, kw, O, B, H, W), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gathered[i, j] = gfull[:, :, i:i + s * H:s, j:j + s * W:s]
        g2d = gathered.reshape(kh * kw * O, B * H * W)
        if x.requires_grad:
            gx = (wmat.T @ g2d).reshape(C, B, H, W).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (g2d @ xmat.T).reshape(kh, kw, O, C).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv_transpose2d")


# -- normalisation / attention primitives -----------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NonFiniteError("softmax input contains NaN/Inf")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    C = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        red = tuple(range(x.ndim - 1))
        if gamma is not None and gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=red)
        if beta is not None and beta.requires_grad:
            gbeta = g.sum(axis=red)
        if x.requires_grad:
            dxhat = g * gamma.data if gamma is not None else g
            gx = inv / C * (C * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    parents = [x]
    for t in (gamma, beta):
        if t is not None:
            parents.append(t)

    def routed(g):
        gx, gg, gbt = backward(g)
        res = [gx]
        if gamma is not None:
            res.append(gg)
        if beta is not None:
            res.append(gbt)
        return tuple(res)

    return _node(out, parents, routed, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel normalisation of NCHW input with batch statistics.

    Returns the output and the (mean, biased variance) used, so callers can
    update running estimates.
    """
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.data[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]

    def backward(g):
        gx = None
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if x.requires_grad:
            dxhat = g * g4
            gx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), backward, "batch_norm"), mu.ravel(), var.ravel()


# -- sampling ---------------------------------------------------------------
_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


class BilinearPlan:
    """Corner indices and weights for a fixed set of sample coordinates.

    Building the plan once lets repeated sampling at the same positions
    (e.g. every propagation step) skip the index arithmetic.
    """

    __slots__ = ("shape", "idx", "valid", "weights", "d_dr", "d_dc")

    def __init__(self, coords: np.ndarray, H: int, W: int):
        B, N, _ = coords.shape
        self.shape = (B, N, H, W)
        r, c = coords[..., 0], coords[..., 1]
        r0, c0 = np.floor(r), np.floor(c)
        fr, fc = r - r0, c - c0
        r0 = r0.astype(np.int64)
        c0 = c0.astype(np.int64)
        gr, gc = 1 - fr, 1 - fc
        self.idx = np.empty((4, B, N), dtype=np.int64)
        self.valid = np.empty((4, B, N), dtype=bool)
        for k, (dr, dc) in enumerate(_CORNERS):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            self.valid[k] = ok
            self.idx[k] = np.where(ok, rr * W + cc, 0)
        w = np.stack([gr * gc, gr * fc, fr * gc, fr * fc])
        self.weights = w * self.valid
        self.d_dr = np.stack([-gc, -fc, gc, fc])
        self.d_dc = np.stack([-gr, gr, -fr, fr])


def bilinear_sample(field: Tensor, coords: Tensor, plan: BilinearPlan | None = None) -> Tensor:
    """Sample ``field`` (B,C,H,W) at continuous (row, col) ``coords`` (B,N,2).

    Integer coordinates address pixel centres. Each of the four corners lying
    outside the image contributes zero (and receives zero gradient).
    Returns (B, C, N).
    """
    if field.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample shapes: field {field.shape}, coords {coords.shape}")
    if coords.shape[0] != field.shape[0]:
        raise ShapeError("bilinear_sample batch sizes differ")
    B, C, H, W = field.shape
    N = coords.shape[1]
    if plan is None:
        plan = BilinearPlan(coords.data, H, W)
    elif plan.shape != (B, N, H, W):
        raise ShapeError("bilinear plan was built for different shapes")
    flat = field.data.reshape(-1)
    base = ((np.arange(B)[:, None] * C + np.arange(C)[None, :]) * (H * W))[:, :, None]
    gidx = base[None] + plan.idx[:, :, None, :]  # 4,B,C,N
    vals = flat[gidx] * plan.valid[:, :, None, :]
    out = (plan.weights[:, :, None, :] * vals).sum(axis=0)

    def backward(g):
        gfield = gcoords = None
        if field.requires_grad:
            wg = plan.weights[:, :, None, :] * g[None]
            gfield = np.bincount(gidx.ravel(), weights=wg.ravel(),
                                 minlength=flat.size).astype(g.dtype).reshape(field.shape)
        if coords.requires_grad:
            gv = (g[None] * vals).sum(axis=2)  # 4,B,N
            gcoords = np.stack([(gv * plan.d_dr).sum(axis=0), (gv * plan.d_dc).sum(axis=0)], axis=-1)
        return gfield, gcoords

    return _node(out, (field, coords), backward, "bilinear_sample")
