"""Pinhole cameras, ray generation, projection and depth sampling.

Conventions: camera x right, y down, z forward (rays leave through +z);
poses are 4x4 row-major world-from-camera transforms; continuous pixel
coordinates put (0.5, 0.5) at the center of pixel (0, 0), so a feature map
lookup at a projected uv agrees with ``bilinear_sample``'s node positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROT_TOL = 1e-6
MIN_DEPTH = 1e-6  # points with source-camera depth below this are invalid


@dataclass
class CameraModel:
    """Pinhole intrinsics, rigid pose and the near/far ray bounds."""

    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray            # 4x4 world-from-camera
    t_near: float
    t_far: float
    height: int
    width: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {self.pose.shape}")
        r = self.pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=ROT_TOL):
            raise ValueError("pose rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("pose rotation block has determinant -1 (reflection)")
        if not (0.0 < self.t_near < self.t_far):
            raise ValueError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.origin) @ self.rotation  # == R.T @ (p - t)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray       # unit
    pixel: tuple[int, int]      # (row, col) it was cast through


class RayBundle:
    """Vectorized batch of rays; indexes like a list of ``Ray``."""

    def __init__(self, origins, directions, pixels):
        self.origins = np.asarray(origins, dtype=np.float64)      # [R, 3]
        self.directions = np.asarray(directions, dtype=np.float64)  # [R, 3]
        self.pixels = np.asarray(pixels, dtype=np.int64)          # [R, 2] (row, col)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i], tuple(self.pixels[i]))


def generate_rays(camera: CameraModel, pixels) -> RayBundle:
    """Cast one ray through the center of each (row, col) pixel."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.int64))
    rows, cols = px[:, 0], px[:, 1]
    if (rows < 0).any() or (rows >= camera.height).any() or \
       (cols < 0).any() or (cols >= camera.width).any():
        bad = px[(rows < 0) | (rows >= camera.height) | (cols < 0) | (cols >= camera.width)][0]
        raise ValueError(f"pixel {tuple(bad)} outside {camera.height}x{camera.width} image")
    d_cam = np.stack([
        (cols + 0.5 - camera.cx) / camera.fx,
        (rows + 0.5 - camera.cy) / camera.fy,
        np.ones_like(cols, dtype=np.float64),
    ], axis=1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, d_world.shape).copy()
    return RayBundle(origins, d_world, px)


@dataclass
class Projection:
    """Result of projecting world points into a camera."""

    uv: np.ndarray        # [Q, 2] continuous pixel coordinates
    cam_points: np.ndarray  # [Q, 3] camera-frame positions
    depth: np.ndarray     # [Q]
    valid: np.ndarray     # [Q] bool; False behind the camera

    INVALID_UV = -1e9


def project(points: np.ndarray, camera: CameraModel) -> Projection:
    """Project world points; points at depth <= MIN_DEPTH get a sentinel uv."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = camera.world_to_camera(pts)
    depth = cam[:, 2]
    valid = depth > MIN_DEPTH
    safe = np.where(valid, depth, 1.0)
    uv = np.stack([
        camera.fx * cam[:, 0] / safe + camera.cx,
        camera.fy * cam[:, 1] / safe + camera.cy,
    ], axis=1)
    uv[~valid] = Projection.INVALID_UV
    return Projection(uv=uv, cam_points=cam, depth=depth, valid=valid)


def stratified_samples(t_near: float, t_far: float, n: int, jitter: bool,
                       rng: np.random.Generator | None = None, count: int | None = None):
    """Depths from n equal bins of [t_near, t_far]: midpoints, or one uniform
    draw per bin when ``jitter``. With ``count`` returns a [count, n] batch."""
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    width = (t_far - t_near) / n
    edges = t_near + width * np.arange(n)
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        shape = (n,) if count is None else (count, n)
        return edges + width * rng.random(shape)
    mids = edges + 0.5 * width
    return mids if count is None else np.broadcast_to(mids, (count, n)).copy()


def importance_resample(coarse_t, weights, n_fine: int, rng: np.random.Generator):
    """Draw n_fine depths by inverse-CDF over the piecewise-constant density
    defined by ``weights`` on the coarse bins, merge with ``coarse_t`` and sort.

    Bin edges are reconstructed as midpoints between consecutive coarse
    depths, with half-width end bins hugging the first/last sample, so every
    draw stays inside [coarse_t[0], coarse_t[-1]]. Weights that are all ~zero
    fall back to uniform. Accepts [N] or batched [R, N] inputs.
    """
    t = np.atleast_2d(np.asarray(coarse_t, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if t.shape != w.shape:
        raise ValueError(f"coarse_t and weights shapes differ: {t.shape} vs {w.shape}")
    r, n = t.shape
    edges = np.empty((r, n + 1))
    edges[:, 0] = t[:, 0]
    edges[:, 1:-1] = 0.5 * (t[:, :-1] + t[:, 1:])
    edges[:, -1] = t[:, -1]

    w = np.maximum(w, 0.0)
    total = w.sum(axis=1, keepdims=True)
    uniform = total[:, 0] <= 1e-12
    w[uniform] = 1.0
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    u = rng.random((r, n_fine))
    # index of the bin containing each u: count of interior cdf edges <= u
    idx = (u[:, :, None] >= cdf[:, None, :-1]).sum(axis=2) - 1
    idx = np.clip(idx, 0, n - 1)
    rows = np.arange(r)[:, None]
    lo = cdf[rows, idx]
    p = pdf[rows, idx]
    frac = np.where(p > 0, (u - lo) / np.where(p > 0, p, 1.0), 0.0)
    fine = edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])

    merged = np.sort(np.concatenate([t, fine], axis=1), axis=1)
    if np.asarray(coarse_t).ndim == 1:
        return merged[0]
    return merged


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera pose for a camera at ``eye`` looking at ``target``.

    Image up aligns with world ``up`` (camera y points world-down).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("look_at degenerate: view direction parallel to up")
    right /= nr
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose
