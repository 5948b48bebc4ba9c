"""Global feature encoder: patch tokens + background token through a
pre-norm transformer, with intermediate layer outputs exposed as taps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import LayerNorm, Linear, ParamSet
from .tensor import (ShapeError, Tensor, add, as_tensor, bilinear_resize,
                     concat, gelu, matmul, mul, reshape, softmax, transpose)


@dataclass
class ViTConfig:
    patch_size: int = 16
    depth: int = 12
    latent_dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    tap_layers: tuple[int, ...] | None = None
    pos_grid: int = 8           # stored positional-embedding grid, resized per input

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ValueError(f"latent_dim {self.latent_dim} not divisible by heads {self.heads}")
        if self.tap_layers is None:
            self.tap_layers = self.default_taps(self.depth)
        taps = tuple(sorted(self.tap_layers))
        if taps != tuple(self.tap_layers):
            raise ValueError("tap_layers must be sorted ascending")
        if any(t < 1 or t > self.depth for t in taps):
            raise ValueError(f"tap_layers {taps} outside 1..{self.depth}")
        self.tap_layers = taps

    @staticmethod
    def default_taps(depth: int) -> tuple[int, ...]:
        # quarter-depth spacing when it divides evenly, else every layer
        if depth % 4 == 0:
            q = depth // 4
            return (q, 2 * q, 3 * q, depth)
        return tuple(range(1, depth + 1))


@dataclass
class TokenSequence:
    """(N+1) x D tokens; index 0 is the background token, the rest lay out
    row-major on ``grid``."""

    tokens: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        n = self.grid[0] * self.grid[1]
        if self.tokens.shape[0] != n + 1:
            raise ShapeError(f"expected {n + 1} tokens for grid {self.grid}, "
                             f"got {self.tokens.shape[0]}")


def patchify(image, patch_size: int) -> Tensor:
    """[3, H, W] -> [N, P*P*3] rows of flattened patches, row-major over the
    patch grid, channel-last within each patch. Lossless."""
    image = as_tensor(image)
    c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = reshape(image, (c, gh, p, gw, p))
    x = transpose(x, (1, 3, 2, 4, 0))            # [gh, gw, p, p, c]
    return reshape(x, (gh * gw, p * p * c))


def unpatchify(patches, grid: tuple[int, int], patch_size: int) -> Tensor:
    """Inverse of ``patchify``."""
    patches = as_tensor(patches)
    gh, gw = grid
    p = patch_size
    c = patches.shape[1] // (p * p)
    x = reshape(patches, (gh, gw, p, p, c))
    x = transpose(x, (4, 0, 2, 1, 3))            # [c, gh, p, gw, p]
    return reshape(x, (c, gh * p, gw * p))


class TransformerLayer:
    """Pre-norm residual block: x + MSA(LN(x)), then + MLP(LN(.)) with GELU."""

    def __init__(self, ps: ParamSet, name: str, dim: int, heads: int, mlp_ratio: float):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        hidden = int(dim * mlp_ratio)
        self.ln1 = LayerNorm(ps, f"{name}.ln1", dim)
        self.qkv = Linear(ps, f"{name}.qkv", dim, 3 * dim, std=0.02)
        self.proj = Linear(ps, f"{name}.proj", dim, dim, std=0.02)
        self.ln2 = LayerNorm(ps, f"{name}.ln2", dim)
        self.fc1 = Linear(ps, f"{name}.fc1", dim, hidden, std=0.02)
        self.fc2 = Linear(ps, f"{name}.fc2", hidden, dim, std=0.02)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        t = x.shape[0]
        qkv = self.qkv(x)                                       # [T, 3D]
        qkv = reshape(qkv, (t, 3, self.heads, self.head_dim))
        qkv = transpose(qkv, (1, 2, 0, 3))                      # [3, h, T, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]                        # [h, T, dh]
        scale = 1.0 / np.sqrt(self.head_dim)
        attn = softmax(mul(matmul(q, transpose(k, (0, 2, 1))), scale), axis=-1)  # [h, T, T]
        out = matmul(attn, v)                                   # [h, T, dh]
        out = reshape(transpose(out, (1, 0, 2)), (t, self.dim))
        return self.proj(out), attn

    def __call__(self, x: Tensor, return_attn: bool = False):
        msa, attn = self.attention(self.ln1(x))
        x = add(x, msa)
        h = self.fc2(gelu(self.fc1(self.ln2(x))))
        x = add(x, h)
        return (x, attn) if return_attn else x


class ViTEncoder:
    """Patchify, embed with resized positional embeddings, run the stack and
    return the tapped layer outputs from a single forward pass."""

    def __init__(self, ps: ParamSet, name: str, cfg: ViTConfig):
        self.cfg = cfg
        d = cfg.latent_dim
        in_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_proj = ps.add(f"{name}.patch_proj.weight", ps.trunc_normal((in_dim, d)))
        self.bg_token = ps.add(f"{name}.bg_token", ps.trunc_normal((1, d)))
        self.pos_bg = ps.add(f"{name}.pos_bg", ps.trunc_normal((1, d)))
        g = cfg.pos_grid
        self.pos_grid = ps.add(f"{name}.pos_grid", ps.trunc_normal((d, g, g)))
        self.layers = [TransformerLayer(ps, f"{name}.layers.{i}", d, cfg.heads, cfg.mlp_ratio)
                       for i in range(cfg.depth)]

    def positional(self, grid: tuple[int, int]) -> Tensor:
        """Image-token embeddings resized to the current patch grid, flattened
        row-major; the background token keeps its own slot."""
        resized = bilinear_resize(self.pos_grid.tensor, grid)        # [D, gh, gw]
        d = self.cfg.latent_dim
        flat = transpose(reshape(resized, (d, grid[0] * grid[1])), (1, 0))
        return concat([self.pos_bg.tensor, flat], axis=0)           # [N+1, D]

    def embed(self, patches: Tensor, grid: tuple[int, int]) -> TokenSequence:
        projected = matmul(patches, self.patch_proj.tensor)          # [N, D]
        tokens = concat([self.bg_token.tensor, projected], axis=0)
        tokens = add(tokens, self.positional(grid))
        return TokenSequence(tokens=tokens, grid=grid)

    def encode(self, image) -> dict[int, Tensor]:
        """Run the full stack once; return {layer index -> [(N+1), D] tokens}
        for every tap layer."""
        image = as_tensor(image)
        _, h, w = image.shape
        p = self.cfg.patch_size
        grid = (h // p, w // p)
        seq = self.embed(patchify(image, p), grid)
        x = seq.tokens
        taps: dict[int, Tensor] = {}
        want = set(self.cfg.tap_layers)
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x)
            if i in want:
                taps[i] = x
            if i >= max(want):
                break
        return taps

    def token_grid(self, image_hw: tuple[int, int]) -> tuple[int, int]:
        p = self.cfg.patch_size
        return (image_hw[0] // p, image_hw[1] // p)
