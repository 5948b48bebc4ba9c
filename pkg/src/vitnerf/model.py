"""The full single-image view-synthesis model: feature extractor plus coarse
and fine radiance MLPs, with whole-image rendering helpers."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .features import FeatureExtractor, FeatureSet
from .geometry import CameraModel, RayBundle, generate_rays
from .layers import ParamSet
from .nerf import RadianceMLP, RenderResult, render_rays
from .tensor import Parameter, Tensor, no_grad


class SingleImageNerf:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.ps = ParamSet(np.random.default_rng(seed), dtype=np.dtype(cfg.dtype))
        self.features = FeatureExtractor(
            self.ps, cfg.vit, cfg.decode_width, cfg.branch_channels,
            cfg.fuse_mid, cfg.global_channels, cfg.local_channels)
        self.features.use_local = cfg.use_local
        self.coarse = RadianceMLP(self.ps, "nerf.coarse", cfg.mlp_in_dim,
                                  cfg.mlp_width, cfg.mlp_blocks)
        self.fine = RadianceMLP(self.ps, "nerf.fine", cfg.mlp_in_dim,
                                cfg.mlp_width, cfg.mlp_blocks)

    # ---- parameters ------------------------------------------------------

    def parameters(self) -> dict[str, Parameter]:
        return self.ps.params

    def param_groups(self) -> dict[str, list[Parameter]]:
        """'mlp' (both radiance networks) vs 'encoder' (ViT, decoder, fusion,
        local CNN); the groups train at different base rates."""
        groups = {"mlp": [], "encoder": []}
        for name, p in self.ps.params.items():
            groups["mlp" if name.startswith("nerf.") else "encoder"].append(p)
        return groups

    def cast(self, dtype) -> None:
        self.ps.cast(dtype)
        self.cfg.dtype = str(np.dtype(dtype))

    # ---- forward ----------------------------------------------------------

    def prepare_image(self, image: np.ndarray) -> Tensor:
        return Tensor(np.ascontiguousarray(image, dtype=self.ps.dtype))

    def featurize(self, image, mode: str = "eval") -> FeatureSet:
        """mode 'train': batch-norm batch statistics, running stats updated.
        mode 'eval': frozen running stats unless cfg.bn_eval_batch_stats."""
        if mode not in ("train", "eval"):
            raise ValueError(f"featurize mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(image, Tensor):
            image = self.prepare_image(image)
        if mode == "train":
            return self.features(image, use_batch_stats=True, update_running=True)
        return self.features(image, use_batch_stats=self.cfg.bn_eval_batch_stats,
                             update_running=False)

    def render(self, rays: RayBundle, camera_src: CameraModel, feats: FeatureSet,
               background, rng: np.random.Generator, jitter: bool = False,
               fine_t: np.ndarray | None = None) -> tuple[RenderResult, RenderResult]:
        return render_rays(rays, camera_src, feats.hybrid, self.coarse, self.fine,
                           self.cfg.n_coarse, self.cfg.n_fine, self.cfg.freq_count,
                           background, rng, jitter=jitter, fine_t=fine_t)

    def render_view(self, camera_target: CameraModel, camera_src: CameraModel,
                    feats: FeatureSet, background, rng: np.random.Generator,
                    chunk: int = 1024) -> np.ndarray:
        """Render a full image [3, H, W] from the fine pass (no gradients)."""
        h, w = camera_target.height, camera_target.width
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
        out = np.empty((h * w, 3), dtype=np.float64)
        with no_grad():
            for start in range(0, h * w, chunk):
                batch = pixels[start:start + chunk]
                rays = generate_rays(camera_target, batch)
                _, fine = self.render(rays, camera_src, feats, background, rng)
                out[start:start + len(batch)] = fine.color.data
        return np.clip(out.T.reshape(3, h, w), 0.0, 1.0)
