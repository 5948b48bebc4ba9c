"""Scene ingestion and generation.

A scene is a directory with one PNG per view and a ``manifest.json`` holding
``resolution``, ``intrinsics``, ``near``, ``far``, ``background``, an
optional ``input_view`` index and a ``views`` list of ``{image, pose}``
records (pose: 16 numbers, row-major, world-from-camera).

The synthetic generator renders constant-density spheres through the same
quadrature compositing the model uses, giving ground truth with a known
closed form per ray.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel, generate_rays, look_at, stratified_samples
from .nerf import composite
from .tensor import no_grad


class SceneError(RuntimeError):
    pass


@dataclass
class SceneView:
    image: np.ndarray            # [3, H, W] floats in [0, 1]
    camera: CameraModel
    id: str
    alpha_mask: np.ndarray | None = None   # [H, W] bool, from PNG alpha if present


@dataclass
class Scene:
    views: list[SceneView]
    background: np.ndarray       # [3]
    input_view: int = 0
    root: Path | None = None

    @property
    def resolution(self) -> tuple[int, int]:
        cam = self.views[0].camera
        return (cam.height, cam.width)


# ---- image / manifest IO ---------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_image(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a PNG to [3, H, W] floats; returns (image, alpha mask or None)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    alpha = None
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] == 4:
        alpha = arr[..., 3] > 127
        arr = arr[..., :3]
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0, alpha


def write_manifest(root, cameras: list[CameraModel], image_names: list[str],
                   background, input_view: int = 0) -> Path:
    cam0 = cameras[0]
    manifest = {
        "resolution": [cam0.height, cam0.width],
        "intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy},
        "near": cam0.t_near,
        "far": cam0.t_far,
        "background": [float(c) for c in background],
        "input_view": int(input_view),
        "views": [{"image": name, "pose": [float(v) for v in cam.pose.reshape(-1)]}
                  for name, cam in zip(image_names, cameras)],
    }
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_scene(manifest_path) -> Scene:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise SceneError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"{manifest_path}: invalid JSON ({e})") from e
    for key in ("resolution", "intrinsics", "near", "far", "background", "views"):
        if key not in manifest:
            raise SceneError(f"{manifest_path}: missing field {key!r}")
    h, w = manifest["resolution"]
    intr = manifest["intrinsics"]
    root = manifest_path.parent
    views = []
    for i, record in enumerate(manifest["views"]):
        img_path = root / record["image"]
        if not img_path.exists():
            raise SceneError(f"view {i}: image file missing: {img_path}")
        image, alpha = load_image(img_path)
        if image.shape[1:] != (h, w):
            raise SceneError(f"view {i}: image is {image.shape[1:]}, manifest says {(h, w)}")
        pose = np.asarray(record["pose"], dtype=np.float64)
        if pose.size != 16:
            raise SceneError(f"view {i}: pose needs 16 numbers, got {pose.size}")
        try:
            camera = CameraModel(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
                                 pose=pose.reshape(4, 4), t_near=manifest["near"],
                                 t_far=manifest["far"], height=h, width=w)
        except ValueError as e:
            raise SceneError(f"view {i}: {e}") from e
        views.append(SceneView(image=image, camera=camera, id=record["image"],
                               alpha_mask=alpha))
    return Scene(views=views, background=np.asarray(manifest["background"], dtype=np.float64),
                 input_view=int(manifest.get("input_view", 0)), root=root)


def save_scene(root, images: list[np.ndarray], cameras: list[CameraModel],
               background, input_view: int = 0) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"view_{i:03d}.png"
        save_image(root / name, img)
        names.append(name)
    return write_manifest(root, cameras, names, background, input_view)


# ---- synthetic scenes --------------------------------------------------------

@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float]
    density: float


def sphere_field(spheres: list[Sphere], points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the analytic field at [Q, 3] points: densities add where
    spheres overlap, colors blend density-weighted."""
    q = points.shape[0]
    sigma = np.zeros(q)
    weighted = np.zeros((q, 3))
    for s in spheres:
        inside = np.linalg.norm(points - np.asarray(s.center), axis=1) <= s.radius
        sigma[inside] += s.density
        weighted[inside] += s.density * np.asarray(s.color)
    color = np.where(sigma[:, None] > 0, weighted / np.maximum(sigma, 1e-30)[:, None], 0.0)
    return sigma, color


def generate_synthetic_scene(spheres: list[Sphere], cameras: list[CameraModel],
                             samples_per_ray: int = 256, background=(0.0, 0.0, 0.0)
                             ) -> list[np.ndarray]:
    """Render each camera by compositing dense midpoint samples of the
    analytic field; returns [3, H, W] float images."""
    images = []
    bg = np.asarray(background, dtype=np.float64)
    for cam in cameras:
        h, w = cam.height, cam.width
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rays = generate_rays(cam, np.stack([rows.ravel(), cols.ravel()], axis=1))
        ts = stratified_samples(cam.t_near, cam.t_far, samples_per_ray,
                                jitter=False, count=len(rays))
        pts = rays.origins[:, None, :] + ts[..., None] * rays.directions[:, None, :]
        sigma, color = sphere_field(spheres, pts.reshape(-1, 3))
        with no_grad():
            result = composite(ts, sigma.reshape(len(rays), -1),
                               color.reshape(len(rays), -1, 3), cam.t_far, bg)
        images.append(result.color.data.T.reshape(3, h, w))
    return images


def orbit_cameras(base: CameraModel, n: int, radius: float,
                  elevation_deg: float = 0.0) -> list[CameraModel]:
    """n cameras on a circle of the given radius/elevation about the point
    ``radius`` ahead of the base camera, all looking at that point. The first
    pose matches the base azimuth (and equals it when the base lies on the
    orbit)."""
    if n < 1:
        raise ValueError(f"orbit needs n >= 1, got {n}")
    center = base.origin + radius * base.rotation[:, 2]
    offset = base.origin - center
    azim0 = np.arctan2(offset[0], -offset[2])
    elev = np.deg2rad(elevation_deg)
    cams = []
    for i in range(n):
        theta = azim0 + 2.0 * np.pi * i / n
        eye = center + radius * np.array([
            np.cos(elev) * np.sin(theta),
            np.sin(elev),
            -np.cos(elev) * np.cos(theta),
        ])
        pose = look_at(eye, center)
        cams.append(CameraModel(fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
                                pose=pose, t_near=base.t_near, t_far=base.t_far,
                                height=base.height, width=base.width))
    return cams


def demo_spheres() -> list[Sphere]:
    """Three opaque colored spheres used by the bundled demo scene."""
    return [
        Sphere(center=(0.0, 0.05, 0.0), radius=0.45, color=(0.85, 0.25, 0.20), density=40.0),
        Sphere(center=(0.45, -0.12, 0.28), radius=0.28, color=(0.20, 0.75, 0.30), density=40.0),
        Sphere(center=(-0.42, -0.18, -0.22), radius=0.25, color=(0.25, 0.35, 0.85), density=40.0),
    ]


def make_sphere_scene(n_views: int = 12, resolution: int = 64, orbit_radius: float = 2.7,
                      elevation_deg: float = 12.0, samples_per_ray: int = 256,
                      spheres: list[Sphere] | None = None,
                      background=(0.0, 0.0, 0.0), input_view: int = 0) -> Scene:
    """Build the orbiting-camera sphere scene in memory."""
    spheres = spheres if spheres is not None else demo_spheres()
    fov_scale = resolution  # fx == resolution: ~53 degree field of view
    eye0 = orbit_radius * np.array([0.0, np.sin(np.deg2rad(elevation_deg)),
                                    -np.cos(np.deg2rad(elevation_deg))])
    base = CameraModel(fx=fov_scale, fy=fov_scale, cx=resolution / 2, cy=resolution / 2,
                       pose=look_at(eye0, (0.0, 0.0, 0.0)), t_near=orbit_radius - 1.1,
                       t_far=orbit_radius + 1.1, height=resolution, width=resolution)
    cameras = orbit_cameras(base, n_views, orbit_radius, elevation_deg)
    images = generate_synthetic_scene(spheres, cameras, samples_per_ray, background)
    views = [SceneView(image=img, camera=cam, id=f"view_{i:03d}.png")
             for i, (img, cam) in enumerate(zip(images, cameras))]
    return Scene(views=views, background=np.asarray(background, dtype=np.float64),
                 input_view=input_view)
