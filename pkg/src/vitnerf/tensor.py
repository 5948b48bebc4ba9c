"""Reverse-mode automatic differentiation on numpy arrays.

Every operation allocates a fresh array and, while gradients are enabled,
records a backward closure linking the result to its parents. ``backward()``
walks the implicit tape in reverse creation order (a valid topological order,
since parents are always created before children) and accumulates gradients
into leaf tensors.

Tensors are treated as immutable values: no op mutates its inputs, so
repeated evaluation of the same graph is bit-identical. The only sanctioned
mutation is gradient accumulation into a leaf's ``grad`` buffer.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor", "Parameter", "ShapeError", "no_grad", "as_tensor",
    "matmul", "conv2d", "conv_transpose2d", "layernorm",
    "relu", "gelu", "sigmoid", "softplus", "softmax",
    "exp", "log", "sin", "cos", "power",
    "reshape", "transpose", "concat", "cumsum", "detach",
    "bilinear_sample", "bilinear_resize",
    "grad_check", "GradCheckReport",
]

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _tune_allocator():
    """Keep multi-MB intermediate buffers on the heap instead of letting
    glibc mmap/munmap them; the page-fault churn otherwise dominates the
    cost of graph evaluation. No-op off glibc or with VITNERF_NO_MALLOPT."""
    import ctypes
    import os
    if os.environ.get("VITNERF_NO_MALLOPT"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 128 << 20)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 128 << 20)   # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_grad_enabled = True
_tensor_counter = 0


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward evaluation only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional real array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward = None
        global _tensor_counter
        _tensor_counter += 1
        self._id = _tensor_counter

    # ---- introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- autodiff ------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` is normally a scalar loss; for non-scalar outputs pass an
        explicit ``seed`` array of the same shape.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() on non-scalar shape {self.data.shape} needs a seed")
            seed = np.ones_like(self.data)
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._id, reverse=True)

        pending = {self._id: np.asarray(seed, dtype=self.data.dtype)}
        for node in nodes:
            g = pending.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ---- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Parameter:
    """Named trainable tensor; names form unique '/'-free dotted paths."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def assign(self, data):
        """Replace the underlying values (optimizer step / checkpoint load)."""
        arr = np.asarray(data, dtype=self.tensor.data.dtype)
        if arr.shape != self.tensor.data.shape:
            raise ShapeError(f"parameter {self.name}: cannot assign shape {arr.shape} "
                             f"to shape {self.tensor.data.shape}")
        self.tensor.data = arr

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    return _make(x.data ** p, (x,),
                 lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (g * -np.sin(x.data),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0)
    return _make(y, (x,), lambda g: (g * (x.data > 0),))


def gelu(x) -> Tensor:
    """Exact erf-based GELU: x * Phi(x)."""
    x = as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)
    return _make(x.data * phi, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data)
    return _make(y, (x,), lambda g: (g * expit(x.data),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)
    return _make(y, (x,), backward)


# ---- structural ops ------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    fancy = _is_fancy(idx)
    def backward(g):
        buf = np.zeros_like(x.data)
        if fancy:
            np.add.at(buf, idx, g)
        else:
            buf[idx] += g
        return (buf,)
    return _make(x.data[idx], (x,), backward)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def tensor_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(x, axis: int) -> Tensor:
    x = as_tensor(x)
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)
    return _make(np.cumsum(x.data, axis=axis), (x,), backward)


def detach(x) -> Tensor:
    return as_tensor(x).detach()


# ---- linear algebra -------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    """Fused x @ w + b for 2-d x [N, d_in] and w [d_in, d_out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes incompatible: {x.data.shape} x {w.data.shape}")
    y = x.data @ w.data
    if b is None:
        def backward(g):
            return (g @ w.data.T if x.requires_grad else None,
                    x.data.T @ g if w.requires_grad else None)
        return _make(y, (x, w), backward)
    b = as_tensor(b)
    np.add(y, b.data, out=y)   # y is fresh; in-place add is safe here
    def backward(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)
    return _make(y, (x, w, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; 2-d operands or stacked 3-d operands with equal batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.data.shape} x {b.data.shape}")
    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2) if a.requires_grad else None
        gb = a.data.swapaxes(-1, -2) @ g if b.requires_grad else None
        return (ga, gb)
    return _make(a.data @ b.data, (a, b), backward)


# ---- convolutions ----------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """2-d convolution on a single image.

    x: [C_in, H, W]; weight: [C_out, C_in, k, k]; padding is fixed at
    floor(k/2) (same-padding for odd kernels, none for 1x1).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [Co,Ci,k,k], got {x.data.shape}, {weight.data.shape}")
    c_out, c_in, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels must be square, got {kh}x{kw}")
    k = kh
    if x.data.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    pad = k // 2
    _, h, w = x.data.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < k or wp < k:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {hp}x{wp}")
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = weight.data
    y = np.zeros((c_out, out_h, out_w), dtype=x.data.dtype)
    for di in range(k):
        for dj in range(k):
            xs = xp[:, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride]
            y += np.tensordot(wd[:, :, di, dj], xs, axes=([1], [0]))

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros((c_in, hp, wp), dtype=g.dtype)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride] += \
                        np.tensordot(wd[:, :, di, dj], g, axes=([0], [0]))
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            for di in range(k):
                for dj in range(k):
                    xs = xp[:, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride]
                    gw[:, :, di, dj] = np.tensordot(g, xs, axes=([1, 2], [1, 2]))
        return (gx, gw)

    out = _make(y, (x, weight), backward)
    if bias is not None:
        bias = as_tensor(bias)
        out = add(out, reshape(bias, (c_out, 1, 1)))
    return out


def conv_transpose2d(x, weight, bias=None, stride: int = 2) -> Tensor:
    """Transposed convolution restricted to kernel == stride (disjoint tiling).

    x: [C_in, h, w]; weight: [C_in, C_out, k, k]; output [C_out, h*k, w*k].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d weight must be [Ci,Co,k,k], got {weight.data.shape}")
    c_in, c_out, kh, kw = weight.data.shape
    if kh != kw or kh != stride:
        raise ShapeError(f"conv_transpose2d supports kernel == stride only, "
                         f"got kernel {kh}x{kw} with stride {stride}")
    if x.data.ndim != 3 or x.data.shape[0] != c_in:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    k = kh
    _, h, w = x.data.shape
    # Disjoint tiling lets the op decompose into one matmul plus reshapes.
    flat = reshape(transpose(x, (1, 2, 0)), (h * w, c_in))            # [hw, Ci]
    wmat = reshape(weight, (c_in, c_out * k * k))                     # [Ci, Co*k*k]
    tiles = reshape(matmul(flat, wmat), (h, w, c_out, k, k))
    out = reshape(transpose(tiles, (2, 0, 3, 1, 4)), (c_out, h * k, w * k))
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (c_out, 1, 1)))
    return out


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must have shape ({d},), "
                         f"got {gain.data.shape} and {bias.data.shape}")
    if eps <= 0:
        raise ValueError("layernorm eps must be > 0")
    mu = tensor_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tensor_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# ---- sampling ---------------------------------------------------------------

def bilinear_sample(fmap, uv) -> Tensor:
    """Bilinear lookup into a [C, H, W] map at continuous pixel coordinates.

    uv is [Q, 2] with u horizontal and v vertical; (0.5, 0.5) is the center
    of pixel (0, 0). Out-of-range queries clamp to the nearest edge pixel.
    Differentiable in both the map and the coordinates. Returns [Q, C].
    """
    fmap, uv = as_tensor(fmap), as_tensor(uv)
    if fmap.data.ndim != 3 or uv.data.ndim != 2 or uv.data.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects [C,H,W] and [Q,2], got {fmap.data.shape}, {uv.data.shape}")
    c, h, w = fmap.data.shape
    x = uv.data[:, 0] - 0.5
    y = uv.data[:, 1] - 0.5
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0).astype(fmap.data.dtype)
    fy = (yc - y0).astype(fmap.data.dtype)

    m = fmap.data
    v00 = m[:, y0, x0]  # [C, Q]
    v01 = m[:, y0, x1]
    v10 = m[:, y1, x0]
    v11 = m[:, y1, x1]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).T  # [Q, C]

    def backward(g):
        gt = np.ascontiguousarray(g.T)  # [C, Q]
        gmap = guv = None
        if fmap.requires_grad:
            flat = np.empty((c, h * w), dtype=g.dtype)
            idx = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
            wts = np.concatenate([w00, w01, w10, w11])
            g4 = np.concatenate([gt, gt, gt, gt], axis=1) * wts
            for ch in range(c):
                flat[ch] = np.bincount(idx, weights=g4[ch], minlength=h * w)
            gmap = flat.reshape(c, h, w)
        if uv.requires_grad:
            live_x = ((x > 0) & (x < w - 1)).astype(g.dtype)
            live_y = ((y > 0) & (y < h - 1)).astype(g.dtype)
            dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * live_x
            dy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * live_y
            guv = np.stack([(gt * dx).sum(0), (gt * dy).sum(0)], axis=1)
        return (gmap, guv)

    return _make(out, (fmap, uv), backward)


def bilinear_resize(fmap, out_hw) -> Tensor:
    """Resize a [C, H, W] map to [C, out_h, out_w], matching pixel centers."""
    fmap = as_tensor(fmap)
    c, h, w = fmap.data.shape
    out_h, out_w = out_hw
    if (out_h, out_w) == (h, w):
        return fmap
    u = (np.arange(out_w) + 0.5) * (w / out_w)
    v = (np.arange(out_h) + 0.5) * (h / out_h)
    uu, vv = np.meshgrid(u, v)  # [out_h, out_w]
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(fmap.data.dtype)
    sampled = bilinear_sample(fmap, uv)  # [out_h*out_w, C]
    return transpose(reshape(sampled, (out_h, out_w, c)), (2, 0, 1))


# ---- gradient verification ---------------------------------------------------

class GradCheckReport:
    """Outcome of a finite-difference sweep over a set of parameters."""

    def __init__(self, tol: float):
        self.tol = tol
        self.rows = []  # (name, worst_rel_err, analytic, numeric)

    def record(self, name, rel_err, analytic, numeric):
        self.rows.append((name, rel_err, analytic, numeric))

    @property
    def worst(self):
        return max(self.rows, key=lambda r: r[1]) if self.rows else None

    @property
    def passed(self) -> bool:
        return all(r[1] <= self.tol for r in self.rows)

    def failures(self):
        return [r for r in self.rows if r[1] > self.tol]

    def summary(self) -> str:
        lines = []
        for name, err, ana, num in sorted(self.rows, key=lambda r: -r[1]):
            mark = "ok  " if err <= self.tol else "FAIL"
            lines.append(f"{mark} {name:<46} rel_err={err:.3e} analytic={ana:+.6e} numeric={num:+.6e}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter],
               h: float = 1e-6, tol: float = 1e-5,
               max_per_tensor: int = 32, rng=None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    For each parameter, up to ``max_per_tensor`` randomly chosen elements are
    perturbed by +/- h and the relative error |analytic - numeric| / max(1, |numeric|)
    is recorded (worst element per tensor). ``f`` must be deterministic.
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    report = GradCheckReport(tol)
    for p in params:
        grad = p.grad
        if grad is None:
            grad = np.zeros_like(p.data)
        flat = p.data.ravel()
        n = flat.size
        if n > max_per_tensor:
            idxs = rng.choice(n, size=max_per_tensor, replace=False)
        else:
            idxs = np.arange(n)
        worst = (-1.0, 0.0, 0.0)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = f().item()
            flat[i] = orig - h
            with no_grad():
                f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grad.ravel()[i])
            rel = abs(analytic - numeric) / max(1.0, abs(numeric))
            if rel > worst[0]:
                worst = (rel, analytic, numeric)
        report.record(p.name, worst[0], worst[1], worst[2])
    for p in params:
        p.zero_grad()
    return report
