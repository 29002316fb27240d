"""Minimal dense tensor with reverse-mode differentiation.

Backed by numpy arrays (float64 by default, float32 for trained model
state).  Leading batch dimensions broadcast through every op, so the same
code path serves a single token grid ``(n, d)`` or a batch ``(B, n, d)``.
Gradient traces are recorded per forward pass; a backward pass walks one
trace and must stay on a single logical thread.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .masks import ShapeError

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_grad_enabled = True


class no_grad:
    """Context manager disabling trace recording (inference-only passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squash:
        grad = grad.sum(axis=squash, keepdims=True)
    return grad


class Tensor:
    """Dense value with an optional gradient trace.

    Treat tensors as immutable: ops return new tensors and never mutate
    ``data`` in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, _ctx=None, _check: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _check and not np.isfinite(arr).all():
            raise ValueError("tensor created with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._ctx = _ctx

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # -- operators -----------------------------------------------------------
    def _wrap(self, x) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        # python scalars adopt this tensor's dtype so f32 graphs stay f32
        if isinstance(x, (int, float)):
            return Tensor(np.asarray(x, dtype=self.dtype))
        return Tensor(np.asarray(x, dtype=np.float64))

    def __neg__(self):
        return Neg.apply(self)

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other):
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def pow_const(self, exponent: float) -> "Tensor":
        return PowConst.apply(self, exponent=float(exponent))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def swap_last(self) -> "Tensor":
        """Transpose the last two axes (matrix transpose under batching)."""
        return SwapLast.apply(self)

    # -- autodiff ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every traced input."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded or node._ctx is None:
                seen.add(id(node))
                if node._ctx is not None:
                    order.append(node)
                continue
            stack.append((node, True))
            for parent in node._ctx.parents:
                if id(parent) not in seen and (parent._ctx or parent.requires_grad):
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            ctx = node._ctx
            grads = ctx.backward(node.grad)
            for parent, g in zip(ctx.parents, grads):
                if g is None or not (parent.requires_grad or parent._ctx):
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            node.grad = None if node is not self else node.grad
            node._ctx = None  # free saved buffers as the walk retires nodes

    def zero_grad(self) -> None:
        self.grad = None


class Function:
    """One differentiable op: subclasses define forward/backward on arrays."""

    def __init__(self, *parents, **kwargs):
        self.parents = parents
        self.kwargs = kwargs

    @classmethod
    def apply(cls, *tensors, **kwargs):
        ctx = cls(*tensors, **kwargs)
        out_data = ctx.forward(*[t.data for t in tensors], **kwargs)
        traced = _grad_enabled and any(t.requires_grad or t._ctx for t in tensors)
        return Tensor(out_data, _ctx=ctx if traced else None, _check=False)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, g):
        return (-g,)


class Add(Function):
    def forward(self, a, b):
        self.a_shape, self.b_shape = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.a_shape), _unbroadcast(g, self.b_shape)


class Sub(Function):
    def forward(self, a, b):
        self.a_shape, self.b_shape = a.shape, b.shape
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.a_shape), _unbroadcast(-g, self.b_shape)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape)
        gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class PowConst(Function):
    def forward(self, x, exponent):
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, g):
        return (g * self.exponent * self.x ** (self.exponent - 1.0),)


class Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, g):
        return (g * self.y,)


class Sigmoid(Function):
    def forward(self, x):
        self.y = stable_sigmoid(x)
        return self.y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class Gelu(Function):
    def forward(self, x):
        self.x = x
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def backward(self, g):
        x = self.x
        local = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * local,)


class Sum(Function):
    def forward(self, x, axis, keepdims):
        self.x_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return x.sum(axis=axis, keepdims=keepdims)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.x_shape),)


class Reshape(Function):
    def forward(self, x, shape):
        self.x_shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.x_shape),)


class SwapLast(Function):
    def forward(self, x):
        return np.swapaxes(x, -1, -2)

    def backward(self, g):
        return (np.swapaxes(g, -1, -2),)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = _unbroadcast(g @ np.swapaxes(self.b, -1, -2), self.a.shape)
        gb = _unbroadcast(np.swapaxes(self.a, -1, -2) @ g, self.b.shape)
        return ga, gb


class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        np.exp(shifted, out=shifted)
        shifted /= shifted.sum(axis=axis, keepdims=True)
        self.y = shifted
        return self.y

    def backward(self, g):
        if self.axis in (-1, self.y.ndim - 1):
            inner = np.einsum("...i,...i->...", g, self.y)[..., None]
        else:
            inner = (g * self.y).sum(axis=self.axis, keepdims=True)
        return (self.y * (g - inner),)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        splits = np.cumsum(self.sizes[:-1])
        return tuple(np.split(g, splits, axis=self.axis))


class AvgPool2x2(Function):
    """2x2 mean pooling over a row-major (h*w, d) token grid."""

    def forward(self, x, h, w):
        self.h, self.w = h, w
        lead = x.shape[:-2]
        d = x.shape[-1]
        blocks = x.reshape(*lead, h // 2, 2, w // 2, 2, d)
        return blocks.mean(axis=(-4, -2)).reshape(*lead, (h // 2) * (w // 2), d)

    def backward(self, g):
        h, w = self.h, self.w
        lead = g.shape[:-2]
        d = g.shape[-1]
        grid = g.reshape(*lead, h // 2, w // 2, d) * 0.25
        grid = np.repeat(np.repeat(grid, 2, axis=-3), 2, axis=-2)
        return (grid.reshape(*lead, h * w, d),)


class UpsampleNearest2x(Function):
    """Nearest-neighbor 2x upsampling over a row-major (h*w, d) token grid."""

    def forward(self, x, h, w):
        self.h, self.w = h, w
        lead = x.shape[:-2]
        d = x.shape[-1]
        grid = x.reshape(*lead, h, w, d)
        grid = np.repeat(np.repeat(grid, 2, axis=-3), 2, axis=-2)
        return grid.reshape(*lead, 4 * h * w, d)

    def backward(self, g):
        h, w = self.h, self.w
        lead = g.shape[:-2]
        d = g.shape[-1]
        blocks = g.reshape(*lead, h, 2, w, 2, d)
        return (blocks.sum(axis=(-4, -2)).reshape(*lead, h * w, d),)


# -- functional surface -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along one axis; rows sum to one."""
    return Softmax.apply(x, axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def avg_pool_2x2(x: Tensor, h: int, w: int) -> Tensor:
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even grid dims, got {h}x{w}")
    if x.shape[-2] != h * w:
        raise ShapeError(f"token count {x.shape[-2]} does not match grid {h}x{w}")
    return AvgPool2x2.apply(x, h=h, w=w)


def upsample_nearest_2x(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[-2] != h * w:
        raise ShapeError(f"token count {x.shape[-2]} does not match grid {h}x{w}")
    return UpsampleNearest2x.apply(x, h=h, w=w)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function on raw arrays."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype == np.float32 else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- layers --------------------------------------------------------------------

class LinearParams:
    """Weight (d_in x d_out) and optional bias for an affine projection."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        if weight.ndim != 2:
            raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
        if bias is not None and bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        self.weight = weight
        self.bias = bias

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def linear(x: Tensor, params: LinearParams) -> Tensor:
    y = matmul(x, params.weight)
    if params.bias is not None:
        y = y + params.bias
    return y


class LayerNormParams:
    def __init__(self, gain: Tensor, bias: Tensor, eps: float = 1e-5):
        self.gain = gain
        self.bias = bias
        self.eps = eps

    def tensors(self) -> list[Tensor]:
        return [self.gain, self.bias]


def layer_norm(x: Tensor, params: LayerNormParams) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * (var + params.eps).pow_const(-0.5)
    return normed * params.gain + params.bias


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention: softmax(QK^T/sqrt(d)) V."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value counts differ: {k.shape} vs {v.shape}")
    if k.shape[-2] == 0:
        raise ShapeError("attention needs at least one key")
    # scale the (small) query side rather than the (n_q x n_k) score matrix
    scaled_q = q * (1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(matmul(scaled_q, k.swap_last()), axis=-1), v)


class FFNParams:
    """Two affine layers around a GELU; hidden width is 4x the model dim."""

    def __init__(self, lin1: LinearParams, lin2: LinearParams):
        if lin1.d_out != lin2.d_in:
            raise ShapeError("FFN layer dims do not chain")
        self.lin1 = lin1
        self.lin2 = lin2

    def tensors(self) -> list[Tensor]:
        return self.lin1.tensors() + self.lin2.tensors()


def ffn(x: Tensor, params: FFNParams) -> Tensor:
    return linear(gelu(linear(x, params.lin1)), params.lin2)


# -- verification ---------------------------------------------------------------

def grad_check(f, xs, step: float = 1e-5,
               max_coords_per_tensor: int | None = None) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps the given tensor (or each tensor in a list) to a scalar
    Tensor.  Per coordinate the error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    By default every coordinate of every tensor is perturbed; for large
    parameter sets ``max_coords_per_tensor`` checks a deterministic
    evenly-spaced subset per tensor instead (every tensor is still
    covered).
    """
    xs_list = [xs] if isinstance(xs, Tensor) else list(xs)

    def call():
        return f(*xs_list)

    for x in xs_list:
        x.zero_grad()
        x.requires_grad = True
    out = call()
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs_list]

    worst = 0.0
    for x, a in zip(xs_list, analytic):
        flat = x.data.reshape(-1)
        if max_coords_per_tensor is None or flat.size <= max_coords_per_tensor:
            coords = range(flat.size)
        else:
            coords = np.unique(np.linspace(0, flat.size - 1,
                                           max_coords_per_tensor).round().astype(int))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(call().data)
            flat[i] = orig - step
            f_minus = float(call().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    return worst
