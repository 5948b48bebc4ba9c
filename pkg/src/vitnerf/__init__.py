"""Single-image novel-view synthesis: a ViT global encoder and a ResBlock
local encoder produce a hybrid pixel-aligned feature map that conditions
coarse/fine radiance MLPs rendered by quadrature volume rendering. Built on
a small numpy reverse-mode autodiff core with finite-difference
verification as a first-class contract."""

from .config import ModelConfig, TrainConfig, full_scale, tiny, toy
from .features import FeatureSet, fuse_hybrid, reassemble
from .geometry import (CameraModel, Ray, RayBundle, generate_rays,
                       importance_resample, look_at, project,
                       stratified_samples)
from .metrics import MetricReport, psnr, ssim
from .model import SingleImageNerf
from .nerf import RadianceMLP, RenderResult, composite, gamma, render_rays
from .scenes import (Scene, SceneView, Sphere, generate_synthetic_scene,
                     load_scene, make_sphere_scene, orbit_cameras, save_scene)
from .tensor import (Parameter, Tensor, grad_check, no_grad)
from .training import (Adam, Trainer, evaluate_scene, l2_loss, load_model,
                       lr_at_step, sample_ray_pixels, save_checkpoint,
                       valid_mask)
from .vit import TokenSequence, ViTConfig, ViTEncoder, patchify, unpatchify

__version__ = "0.1.0"
