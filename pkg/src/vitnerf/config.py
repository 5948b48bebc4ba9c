"""Model/training configuration, presets, and the flat key=value config file
format used by the CLI (file values lose to explicit CLI overrides)."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .vit import ViTConfig


@dataclass
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    decode_width: int = 512
    branch_channels: tuple[int, ...] | None = None  # default: latent_dim * (1/8, 1/4, 1/2, 1)
    fuse_mid: int = 512
    global_channels: int = 256
    local_channels: int = 256
    mlp_width: int = 512
    mlp_blocks: int = 6
    freq_count: int = 10
    n_coarse: int = 64
    n_fine: int = 128
    use_local: bool = True
    use_viewdir: bool = True
    bn_eval_batch_stats: bool = False
    dtype: str = "float32"

    @property
    def hybrid_channels(self) -> int:
        return self.global_channels + self.local_channels

    @property
    def mlp_in_dim(self) -> int:
        view = 3 if self.use_viewdir else 0
        return 3 * 2 * self.freq_count + view + self.hybrid_channels


@dataclass
class TrainConfig:
    rays_per_instance: int = 128
    instances_per_batch: int = 2
    lr_mlp: float = 1e-4
    lr_encoder: float = 1e-5
    warmup_steps: int = 100
    decay_step: int = 4000
    decay_factor: float = 0.1
    bbox_fraction: float = 0.8
    total_steps: int = 5000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0   # 0: final checkpoint only
    train_jitter: bool = True

    def __post_init__(self):
        if not 0.0 <= self.bbox_fraction <= 1.0:
            raise ValueError(f"bbox_fraction must be in [0, 1], got {self.bbox_fraction}")
        if self.warmup_steps >= self.decay_step:
            raise ValueError(f"need warmup_steps < decay_step, got "
                             f"{self.warmup_steps} >= {self.decay_step}")


def full_scale() -> tuple[ModelConfig, TrainConfig]:
    """The published configuration: ViT-b16-sized encoder, width-512 MLP."""
    model = ModelConfig(
        vit=ViTConfig(patch_size=16, depth=12, latent_dim=768, heads=12,
                      mlp_ratio=4.0, pos_grid=8),
        decode_width=512, fuse_mid=512, global_channels=256,
        local_channels=256, mlp_width=512, mlp_blocks=6,
        n_coarse=64, n_fine=128,
    )
    train = TrainConfig(rays_per_instance=512, instances_per_batch=8,
                        warmup_steps=10_000, decay_step=450_000,
                        total_steps=500_000)
    return model, train


def toy() -> tuple[ModelConfig, TrainConfig]:
    """Desk-scale configuration used by the overfit experiment and most tests."""
    model = ModelConfig(
        vit=ViTConfig(patch_size=8, depth=4, latent_dim=64, heads=4,
                      mlp_ratio=4.0, tap_layers=(1, 2, 3, 4), pos_grid=8),
        decode_width=32, fuse_mid=64, global_channels=32,
        local_channels=32, mlp_width=64, mlp_blocks=6,
        n_coarse=16, n_fine=32,
    )
    return model, TrainConfig()


def tiny() -> ModelConfig:
    """Minimal configuration for finite-difference verification of the whole
    composed model (float64, 8x8 hybrid map on 16x16 inputs)."""
    return ModelConfig(
        vit=ViTConfig(patch_size=8, depth=2, latent_dim=16, heads=4,
                      mlp_ratio=2.0, tap_layers=(1, 2), pos_grid=2),
        decode_width=8, fuse_mid=16, global_channels=8,
        local_channels=8, mlp_width=16, mlp_blocks=2,
        n_coarse=4, n_fine=4, dtype="float64",
    )


# ---- flat config files -----------------------------------------------------

# every documented key, with the dataclass it belongs to
_VIT_KEYS = {"patch_size", "depth", "latent_dim", "heads", "mlp_ratio",
             "tap_layers", "pos_grid"}
_MODEL_KEYS = {"decode_width", "branch_channels", "fuse_mid", "global_channels",
               "local_channels", "mlp_width", "mlp_blocks", "freq_count",
               "n_coarse", "n_fine", "use_local", "use_viewdir",
               "bn_eval_batch_stats", "dtype"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in raw:
        return tuple(parse_value(part) for part in raw.split(","))
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def load_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        out[key.strip()] = parse_value(raw)
    return out


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Apply repeatable ``--set key=value`` pairs on top of file values."""
    merged = dict(values)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        merged[key.strip()] = parse_value(raw)
    return merged


def configs_from_dict(values: dict, base: tuple[ModelConfig, TrainConfig] | None = None
                      ) -> tuple[ModelConfig, TrainConfig]:
    model, train = base if base is not None else toy()
    vit_kwargs = {f.name: getattr(model.vit, f.name) for f in fields(ViTConfig)}
    model_kwargs = {f.name: getattr(model, f.name) for f in fields(ModelConfig)
                    if f.name != "vit"}
    train_kwargs = {f.name: getattr(train, f.name) for f in fields(TrainConfig)}
    for key, value in values.items():
        if key in _VIT_KEYS:
            if key == "tap_layers" and isinstance(value, int):
                value = (value,)
            vit_kwargs[key] = value
        elif key in _MODEL_KEYS:
            if key == "branch_channels" and isinstance(value, int):
                value = (value,)
            model_kwargs[key] = value
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = value
        else:
            raise ValueError(f"unknown config key: {key}")
    model = ModelConfig(vit=ViTConfig(**vit_kwargs), **model_kwargs)
    return model, TrainConfig(**train_kwargs)


def config_to_dict(model: ModelConfig, train: TrainConfig | None = None) -> dict:
    """Flatten configs into the documented key set (JSON/config-file friendly)."""
    out = {}
    for f in fields(ViTConfig):
        v = getattr(model.vit, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    for f in fields(ModelConfig):
        if f.name == "vit":
            continue
        v = getattr(model, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    if train is not None:
        for f in fields(TrainConfig):
            out[f.name] = getattr(train, f.name)
    return out


def configs_from_flat(values: dict) -> tuple[ModelConfig, TrainConfig]:
    """Rebuild configs from ``config_to_dict`` output (e.g. checkpoint meta)."""
    cleaned = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()
               if v is not None}
    return configs_from_dict(cleaned)
