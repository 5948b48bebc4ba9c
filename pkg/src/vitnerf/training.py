"""Loss, learning-rate schedule, ray sampling strategy, Adam, and the
training loop with deterministic checkpoint/resume."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_archive, save_archive
from .config import ModelConfig, TrainConfig, config_to_dict, configs_from_flat
from .geometry import RayBundle, generate_rays
from .metrics import MetricReport, psnr, ssim
from .model import SingleImageNerf
from .scenes import Scene
from .tensor import Tensor


def l2_loss(rendered, truth) -> Tensor:
    """Sum over rays of the squared color error."""
    rendered = T.as_tensor(rendered)
    truth = np.asarray(truth)
    if rendered.shape != truth.shape:
        raise ValueError(f"l2_loss length mismatch: {rendered.shape} vs {truth.shape}")
    diff = T.sub(rendered, truth.astype(rendered.dtype))
    return T.tensor_sum(T.mul(diff, diff))


def lr_at_step(step: int, base_lr: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0, flat until the decay step, then scaled once."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step <= cfg.warmup_steps:
        return base_lr * step / cfg.warmup_steps
    if step <= cfg.decay_step:
        return base_lr
    return base_lr * cfg.decay_factor


def valid_mask(image: np.ndarray, background, tol: float = 2.0 / 255.0) -> np.ndarray:
    """Foreground = pixels differing from the background color by > tol."""
    bg = np.asarray(background, dtype=np.float64).reshape(3, 1, 1)
    return np.any(np.abs(image - bg) > tol, axis=0)


def sample_ray_pixels(mask: np.ndarray, n_rays: int, bbox_fraction: float,
                      rng: np.random.Generator) -> np.ndarray:
    """(row, col) draws: round(bbox_fraction*n) uniform over the tight bounding
    box of the mask, the rest uniform over the whole image. An empty mask
    degrades to whole-image sampling."""
    if n_rays < 1:
        raise ValueError(f"need n_rays >= 1, got {n_rays}")
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        n_box = 0
    else:
        n_box = int(round(bbox_fraction * n_rays))
        r0, r1 = ys.min(), ys.max()
        c0, c1 = xs.min(), xs.max()
    pixels = np.empty((n_rays, 2), dtype=np.int64)
    if n_box:
        pixels[:n_box, 0] = rng.integers(r0, r1 + 1, size=n_box)
        pixels[:n_box, 1] = rng.integers(c0, c1 + 1, size=n_box)
    n_any = n_rays - n_box
    if n_any:
        pixels[n_box:, 0] = rng.integers(0, h, size=n_any)
        pixels[n_box:, 1] = rng.integers(0, w, size=n_any)
    return pixels


class Adam:
    """Adam with per-parameter-group learning rates."""

    def __init__(self, params: dict[str, "T.Parameter"], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr_for) -> None:
        """Apply one update; ``lr_for(name) -> float`` supplies the rate."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.tensor.data = p.tensor.data - lr_for(name) * update.astype(p.data.dtype)


class TrainingDiverged(RuntimeError):
    pass


class Trainer:
    """Single-scene training loop: one source view conditions the model, ray
    batches are drawn from the training target views."""

    def __init__(self, model: SingleImageNerf, scene: Scene, cfg: TrainConfig,
                 train_views: list[int] | None = None):
        self.model = model
        self.scene = scene
        self.cfg = cfg
        self.train_views = list(train_views) if train_views is not None \
            else list(range(len(scene.views)))
        if scene.input_view not in self.train_views:
            raise ValueError(f"input view {scene.input_view} not among train views")
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.optimizer = Adam(model.parameters())
        self.source_image = model.prepare_image(scene.views[scene.input_view].image)
        self.masks = {i: self._mask_for(scene.views[i]) for i in self.train_views}

    def _mask_for(self, view) -> np.ndarray:
        if view.alpha_mask is not None:
            return view.alpha_mask
        return valid_mask(view.image, self.scene.background)

    def _lr(self, group: str) -> float:
        base = self.cfg.lr_mlp if group == "mlp" else self.cfg.lr_encoder
        return lr_at_step(self.step_count, base, self.cfg)

    def step(self) -> float:
        """One optimization step; returns the batch loss."""
        self.step_count += 1
        model, cfg, scene = self.model, self.cfg, self.scene
        src_cam = scene.views[scene.input_view].camera
        draws = self.rng.choice(np.asarray(self.train_views),
                                size=cfg.instances_per_batch, replace=True)
        feats = model.featurize(self.source_image, mode="train")
        # all instance draws render as one ray batch (bigger, fewer gemms)
        bundles, truths = [], []
        for view_id in draws:
            view = scene.views[int(view_id)]
            pixels = sample_ray_pixels(self.masks[int(view_id)], cfg.rays_per_instance,
                                       cfg.bbox_fraction, self.rng)
            bundles.append(generate_rays(view.camera, pixels))
            truths.append(view.image[:, pixels[:, 0], pixels[:, 1]].T)   # [n, 3]
        rays = RayBundle(np.concatenate([b.origins for b in bundles]),
                         np.concatenate([b.directions for b in bundles]),
                         np.concatenate([b.pixels for b in bundles]))
        truth = np.concatenate(truths)
        coarse, fine = model.render(rays, src_cam, feats, scene.background,
                                    self.rng, jitter=cfg.train_jitter)
        loss = T.add(l2_loss(coarse.color, truth), l2_loss(fine.color, truth))
        value = loss.item()
        if not np.isfinite(value):
            worst = max(model.parameters().values(),
                        key=lambda p: np.abs(p.data).max())
            raise TrainingDiverged(f"non-finite loss {value} at step {self.step_count}; "
                                   f"largest parameter: {worst.name}")
        loss.backward()
        lr_mlp, lr_enc = self._lr("mlp"), self._lr("encoder")
        self.optimizer.step(lambda name: lr_mlp if name.startswith("nerf.") else lr_enc)
        self.model.ps.zero_grad()
        return value

    def run(self, out_dir=None, log=None) -> list[str]:
        """Run to cfg.total_steps; returns the loss-log lines. With ``out_dir``
        writes ``loss_log.txt`` and periodic + final checkpoints."""
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        lines = []

        def emit(line):
            lines.append(line)
            if log is not None:
                log(line)

        if self.cfg.total_steps == 0 and out_dir is not None:
            self.save_checkpoint(out_dir / "checkpoint_final.vn")
        while self.step_count < self.cfg.total_steps:
            value = self.step()
            if self.step_count % self.cfg.log_every == 0 or \
                    self.step_count == self.cfg.total_steps:
                emit(f"{self.step_count} {value:.10e} "
                     f"{self._lr('mlp'):.8e} {self._lr('encoder'):.8e}")
            if out_dir is not None:
                every = self.cfg.checkpoint_every
                if every and self.step_count % every == 0:
                    self.save_checkpoint(out_dir / f"checkpoint_{self.step_count:06d}.vn")
                if self.step_count == self.cfg.total_steps:
                    self.save_checkpoint(out_dir / "checkpoint_final.vn")
        if out_dir is not None:
            (out_dir / "loss_log.txt").write_text("".join(l + "\n" for l in lines))
        return lines

    # ---- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, self.model, optimizer=self.optimizer,
                        step=self.step_count, rng=self.rng, train_cfg=self.cfg)

    def load_checkpoint(self, path) -> None:
        arrays, meta = load_archive(path)
        _load_model_arrays(self.model, arrays)
        for name in self.optimizer.m:
            self.optimizer.m[name] = arrays[f"opt.m.{name}"]
            self.optimizer.v[name] = arrays[f"opt.v.{name}"]
        self.optimizer.t = int(meta["optimizer_t"])
        self.step_count = int(meta["step"])
        self.rng.bit_generator.state = json.loads(meta["rng_state"])


def save_checkpoint(path, model: SingleImageNerf, optimizer: Adam | None = None,
                    step: int = 0, rng: np.random.Generator | None = None,
                    train_cfg: TrainConfig | None = None) -> None:
    arrays = {}
    for name, p in model.parameters().items():
        arrays[f"param.{name}"] = p.data
    for name, buf in model.ps.buffers.items():
        arrays[f"buffer.{name}"] = buf
    meta = {"step": int(step),
            "config": config_to_dict(model.cfg, train_cfg)}
    if optimizer is not None:
        for name in optimizer.m:
            arrays[f"opt.m.{name}"] = optimizer.m[name]
            arrays[f"opt.v.{name}"] = optimizer.v[name]
        meta["optimizer_t"] = optimizer.t
    if rng is not None:
        meta["rng_state"] = json.dumps(rng.bit_generator.state, sort_keys=True)
    save_archive(path, arrays, meta)


def _load_model_arrays(model: SingleImageNerf, arrays: dict) -> None:
    """Strict by name: extra or missing parameter paths are load errors."""
    params = model.parameters()
    want_params = {f"param.{name}" for name in params}
    want_buffers = {f"buffer.{name}" for name in model.ps.buffers}
    have = {k for k in arrays if k.startswith(("param.", "buffer."))}
    missing = (want_params | want_buffers) - have
    extra = have - (want_params | want_buffers)
    if missing:
        raise CheckpointError(f"checkpoint missing entries: {sorted(missing)[:4]}")
    if extra:
        raise CheckpointError(f"checkpoint has unknown entries: {sorted(extra)[:4]}")
    for name, p in params.items():
        p.assign(arrays[f"param.{name}"])
    for name in model.ps.buffers:
        model.ps.buffers[name] = arrays[f"buffer.{name}"].astype(model.ps.dtype)


def load_model(path) -> tuple[SingleImageNerf, dict]:
    """Rebuild a model (architecture from checkpoint meta) and load weights."""
    arrays, meta = load_archive(path)
    model_cfg, train_cfg = configs_from_flat(meta["config"])
    model = SingleImageNerf(model_cfg, seed=0)
    _load_model_arrays(model, arrays)
    return model, meta


def evaluate_scene(model: SingleImageNerf, scene: Scene, input_view: int | None = None,
                   view_ids: list[int] | None = None, seed: int = 0) -> MetricReport:
    """Render every non-input view from the input view; report PSNR/SSIM."""
    if len(scene.views) < 2:
        raise ValueError("evaluation needs at least 2 views")
    input_view = scene.input_view if input_view is None else input_view
    src = scene.views[input_view]
    feats = model.featurize(src.image, mode="eval")
    rng = np.random.default_rng(seed)
    report = MetricReport()
    targets = view_ids if view_ids is not None else \
        [i for i in range(len(scene.views)) if i != input_view]
    for i in targets:
        view = scene.views[i]
        rendered = model.render_view(view.camera, src.camera, feats,
                                     scene.background, rng)
        report.add(view.id, psnr(rendered, view.image), ssim(rendered, view.image))
    return report
