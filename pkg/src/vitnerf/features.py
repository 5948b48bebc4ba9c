"""From transformer taps and the raw image to the hybrid conditioning map.

Tap token sets are reassembled into spatial grids, decoded into multi-level
global maps at scale factors {x4, x2, x1, x1/2} relative to the token grid,
resized to half input resolution and fused by a two-conv head. A ResBlock
CNN extracts local appearance at the same half resolution; the hybrid map is
the channel concatenation of the two.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, ParamSet
from .tensor import (ShapeError, Tensor, add, as_tensor, bilinear_resize,
                     concat, relu, reshape, transpose)
from .vit import TokenSequence, ViTConfig, ViTEncoder


@dataclass
class FeatureSet:
    """All conditioning maps for one source image, pixel-aligned at half the
    input resolution (except the raw per-level maps)."""

    global_levels: dict[int, Tensor]   # tap layer -> [width, H_j, W_j]
    fused_global: Tensor               # [C_G, H/2, W/2]
    local: Tensor                      # [D_L, H/2, W/2]
    hybrid: Tensor                     # [C_G + D_L, H/2, W/2]


def reassemble(tokens, grid: tuple[int, int] | None = None) -> Tensor:
    """Drop the background token and lay the N image tokens row-major onto
    the patch grid, channels-first: [(N+1), D] -> [D, rows, cols]."""
    if isinstance(tokens, TokenSequence):
        grid = tokens.grid
        tokens = tokens.tokens
    tokens = as_tensor(tokens)
    rows, cols = grid
    if tokens.shape[0] != rows * cols + 1:
        raise ShapeError(f"got {tokens.shape[0]} tokens for grid {grid} "
                         f"(want {rows * cols + 1})")
    image_tokens = tokens[1:]                         # Drop
    d = tokens.shape[1]
    return reshape(transpose(image_tokens, (1, 0)), (d, rows, cols))  # Unflatten


class DecoderBranch:
    """One level of the convolutional decoder. Rank picks the resampling plan
    (0: x4 up, 1: x2 up, 2: keep, 3: halve); no activations inside."""

    SCALES = (4, 2, 1, 0.5)

    def __init__(self, ps: ParamSet, name: str, rank: int, in_dim: int,
                 mid: int, out: int):
        if rank not in (0, 1, 2, 3):
            raise ValueError(f"decoder rank must be 0..3, got {rank}")
        self.rank = rank
        self.squeeze = Conv2d(ps, f"{name}.squeeze", in_dim, mid, kernel=1)
        if rank == 0:
            self.resample = ConvTranspose2d(ps, f"{name}.up", mid, mid, kernel=4)
        elif rank == 1:
            self.resample = ConvTranspose2d(ps, f"{name}.up", mid, mid, kernel=2)
        elif rank == 3:
            self.resample = Conv2d(ps, f"{name}.down", mid, mid, kernel=3, stride=2)
        else:
            self.resample = None
        self.out = Conv2d(ps, f"{name}.out", mid, out, kernel=3)

    def __call__(self, fmap: Tensor) -> Tensor:
        x = self.squeeze(fmap)
        if self.resample is not None:
            x = self.resample(x)
        return self.out(x)


class GlobalFusion:
    """Resize every level to (H/2, W/2), concatenate in ascending tap order
    and mix with conv3x3-ReLU-conv3x3-ReLU."""

    def __init__(self, ps: ParamSet, name: str, in_channels: int, mid: int, out: int):
        self.conv1 = Conv2d(ps, f"{name}.conv1", in_channels, mid, kernel=3)
        self.conv2 = Conv2d(ps, f"{name}.conv2", mid, out, kernel=3)

    def __call__(self, levels: dict[int, Tensor], out_hw: tuple[int, int]) -> Tensor:
        if not levels:
            raise ValueError("fuse_global needs at least one level")
        resized = [bilinear_resize(levels[j], out_hw) for j in sorted(levels)]
        x = concat(resized, axis=0) if len(resized) > 1 else resized[0]
        return relu(self.conv2(relu(self.conv1(x))))


class ResBlock:
    """conv3x3-BN-ReLU-conv3x3-BN with additive skip, then ReLU."""

    def __init__(self, ps: ParamSet, name: str, channels: int):
        self.conv1 = Conv2d(ps, f"{name}.conv1", channels, channels, kernel=3)
        self.bn1 = BatchNorm2d(ps, f"{name}.bn1", channels)
        self.conv2 = Conv2d(ps, f"{name}.conv2", channels, channels, kernel=3)
        self.bn2 = BatchNorm2d(ps, f"{name}.bn2", channels)

    def __call__(self, x: Tensor, use_batch_stats: bool, update_running: bool) -> Tensor:
        h = self.bn1(self.conv1(x), use_batch_stats, update_running)
        h = self.bn2(self.conv2(relu(h)), use_batch_stats, update_running)
        return relu(add(x, h))


class LocalEncoder:
    """Strided stem plus three ResBlocks: [3, H, W] -> [D_L, H/2, W/2]."""

    def __init__(self, ps: ParamSet, name: str, channels: int, blocks: int = 3):
        self.stem = Conv2d(ps, f"{name}.stem", 3, channels, kernel=3, stride=2)
        self.blocks = [ResBlock(ps, f"{name}.blocks.{i}", channels) for i in range(blocks)]

    def __call__(self, image: Tensor, use_batch_stats: bool = True,
                 update_running: bool = False) -> Tensor:
        _, h, w = image.shape
        if h % 2 or w % 2:
            raise ShapeError(f"local encoder needs even image dims, got {h}x{w}")
        x = self.stem(image)
        for block in self.blocks:
            x = block(x, use_batch_stats, update_running)
        return x


def fuse_hybrid(fused_global: Tensor, local: Tensor) -> Tensor:
    """Channel-concatenate the global and local maps (global channels first)."""
    if fused_global.shape[1:] != local.shape[1:]:
        raise ShapeError(f"spatial sizes differ: global {fused_global.shape} "
                         f"vs local {local.shape}")
    return concat([fused_global, local], axis=0)


class FeatureExtractor:
    """ViT encoder + decoder branches + fusion head + local CNN."""

    def __init__(self, ps: ParamSet, vit_cfg: ViTConfig, decode_width: int,
                 branch_channels: tuple[int, ...] | None, fuse_mid: int,
                 global_channels: int, local_channels: int):
        d = vit_cfg.latent_dim
        if branch_channels is None:
            branch_channels = (max(d // 8, 1), max(d // 4, 1), max(d // 2, 1), d)
        self.vit = ViTEncoder(ps, "vit", vit_cfg)
        taps = vit_cfg.tap_layers
        self.branches = {
            j: DecoderBranch(ps, f"decoder.level{j}", rank, d,
                             branch_channels[rank], decode_width)
            for rank, j in enumerate(taps)
        }
        self.fusion = GlobalFusion(ps, "fusion", decode_width * len(taps),
                                   fuse_mid, global_channels)
        self.local = LocalEncoder(ps, "local", local_channels)
        self.local_channels = local_channels
        self.use_local = True

    def __call__(self, image, use_batch_stats: bool = True,
                 update_running: bool = False) -> FeatureSet:
        image = as_tensor(image)
        _, h, w = image.shape
        grid = self.vit.token_grid((h, w))
        taps = self.vit.encode(image)
        levels = {j: self.branches[j](reassemble(tokens, grid))
                  for j, tokens in taps.items()}
        half = (h // 2, w // 2)
        fused = self.fusion(levels, half)
        if self.use_local:
            local = self.local(image, use_batch_stats, update_running)
        else:
            # ablation switch: local branch zeroed, channel layout unchanged
            local = Tensor(np.zeros((self.local_channels, *half), dtype=image.data.dtype))
        hybrid = fuse_hybrid(fused, local)
        return FeatureSet(global_levels=levels, fused_global=fused,
                          local=local, hybrid=hybrid)
