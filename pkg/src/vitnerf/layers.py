"""Parameter registry and the small set of layers the pipeline needs."""
from __future__ import annotations

import numpy as np

from .tensor import (Parameter, ShapeError, Tensor, add, conv2d,
                     conv_transpose2d, layernorm, linear, mul, power,
                     reshape, sub, tensor_mean)


class ParamSet:
    """Flat registry of uniquely named parameters plus non-trainable buffers."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, np.ascontiguousarray(array, dtype=self.dtype))
        self.params[name] = p
        return p

    def add_buffer(self, name: str, array: np.ndarray) -> str:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name: {name}")
        self.buffers[name] = np.ascontiguousarray(array, dtype=self.dtype)
        return name

    # initializers ---------------------------------------------------------

    def trunc_normal(self, shape, std: float = 0.02) -> np.ndarray:
        x = self.rng.standard_normal(shape) * std
        return np.clip(x, -2.0 * std, 2.0 * std)

    def he_normal(self, shape, fan_in: int) -> np.ndarray:
        return self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    def cast(self, dtype) -> None:
        """Switch every parameter and buffer to a new float width in place."""
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.tensor.data = p.tensor.data.astype(self.dtype)
            p.tensor.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(self.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class Linear:
    """y = x @ W + b with W stored [in, out]."""

    def __init__(self, ps: ParamSet, name: str, d_in: int, d_out: int,
                 std: float | None = None, bias: bool = True):
        if std is None:
            w = ps.he_normal((d_in, d_out), fan_in=d_in)
        else:
            w = ps.trunc_normal((d_in, d_out), std=std)
        self.w = ps.add(f"{name}.weight", w)
        self.b = ps.add(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w.tensor, self.b.tensor if self.b is not None else None)


class Conv2d:
    def __init__(self, ps: ParamSet, name: str, c_in: int, c_out: int,
                 kernel: int, stride: int = 1):
        self.stride = stride
        fan_in = c_in * kernel * kernel
        self.w = ps.add(f"{name}.weight", ps.he_normal((c_out, c_in, kernel, kernel), fan_in))
        self.b = ps.add(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w.tensor, self.b.tensor, stride=self.stride)


class ConvTranspose2d:
    """Transposed conv with kernel == stride (the only mode the decoder uses)."""

    def __init__(self, ps: ParamSet, name: str, c_in: int, c_out: int, kernel: int):
        self.kernel = kernel
        self.w = ps.add(f"{name}.weight", ps.he_normal((c_in, c_out, kernel, kernel), c_in))
        self.b = ps.add(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.w.tensor, self.b.tensor, stride=self.kernel)


class LayerNorm:
    def __init__(self, ps: ParamSet, name: str, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.g = ps.add(f"{name}.gain", np.ones(dim))
        self.b = ps.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.g.tensor, self.b.tensor, eps=self.eps)


class BatchNorm2d:
    """Per-channel normalization over the spatial axes of one [C, H, W] image.

    Statistics come either from the current activations ("batch" mode, used
    during training and for per-scene overfitting) or from the running
    averages accumulated during training ("running" mode).
    """

    def __init__(self, ps: ParamSet, name: str, channels: int,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.ps = ps
        self.eps = eps
        self.momentum = momentum
        self.g = ps.add(f"{name}.gain", np.ones(channels))
        self.b = ps.add(f"{name}.bias", np.zeros(channels))
        self.mean_key = ps.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.var_key = ps.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, use_batch_stats: bool = True,
                 update_running: bool = False) -> Tensor:
        if x.data.ndim != 3:
            raise ShapeError(f"BatchNorm2d expects [C,H,W], got {x.data.shape}")
        c = x.data.shape[0]
        if use_batch_stats:
            mu = tensor_mean(x, axis=(1, 2), keepdims=True)              # [C,1,1]
            centered = sub(x, mu)
            var = tensor_mean(mul(centered, centered), axis=(1, 2), keepdims=True)
            if update_running:
                m = self.momentum
                bufs = self.ps.buffers
                bufs[self.mean_key] = (1 - m) * bufs[self.mean_key] + m * mu.data.reshape(c)
                bufs[self.var_key] = (1 - m) * bufs[self.var_key] + m * var.data.reshape(c)
        else:
            bufs = self.ps.buffers
            mu = Tensor(bufs[self.mean_key].reshape(c, 1, 1))
            var = Tensor(bufs[self.var_key].reshape(c, 1, 1))
            centered = sub(x, mu)
        inv = power(add(var, self.eps), -0.5)
        gain = reshape(self.g.tensor, (c, 1, 1))
        bias = reshape(self.b.tensor, (c, 1, 1))
        return add(mul(mul(centered, inv), gain), bias)
