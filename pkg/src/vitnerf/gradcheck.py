"""Finite-difference verification suites: per-op checks at tight tolerance
and the composed full-model check on a miniature configuration.

Everything runs at float64; the composed check freezes the hierarchical
resampling depths at the probe point, since sample placement is routing
rather than a differentiated quantity.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import tiny
from .geometry import CameraModel, generate_rays, look_at
from .model import SingleImageNerf
from .nerf import composite
from .scenes import orbit_cameras
from .tensor import GradCheckReport, Parameter, grad_check, no_grad
from .training import l2_loss

OP_TOL = 1e-5
COMPOSED_TOL = 1e-4


def _param(rng, name, shape, scale=1.0) -> Parameter:
    return Parameter(name, rng.standard_normal(shape) * scale)


def check_matmul(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    a = _param(rng, "a", (3, 4))
    b = _param(rng, "b", (4, 2))
    proj = rng.standard_normal((3, 2))
    return grad_check(lambda: T.tensor_sum(T.mul(T.matmul(a.tensor, b.tensor), proj)),
                      [a, b], tol=OP_TOL)


def check_conv2d(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _param(rng, "x", (2, 6, 5))
    w = _param(rng, "w", (3, 2, 3, 3), scale=0.5)
    b = _param(rng, "b", (3,))
    proj1 = rng.standard_normal((3, 6, 5))
    proj2 = rng.standard_normal((3, 3, 3))
    def f():
        y1 = T.conv2d(x.tensor, w.tensor, b.tensor, stride=1)
        y2 = T.conv2d(x.tensor, w.tensor, b.tensor, stride=2)
        return T.add(T.tensor_sum(T.mul(y1, proj1)), T.tensor_sum(T.mul(y2, proj2)))
    return grad_check(f, [x, w, b], tol=OP_TOL)


def check_conv_transpose(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _param(rng, "x", (2, 3, 3))
    w = _param(rng, "w", (2, 4, 2, 2), scale=0.5)
    proj = rng.standard_normal((4, 6, 6))
    return grad_check(lambda: T.tensor_sum(T.mul(T.conv_transpose2d(x.tensor, w.tensor, stride=2), proj)),
                      [x, w], tol=OP_TOL)


def check_layernorm(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _param(rng, "x", (4, 8))
    g = _param(rng, "gain", (8,))
    b = _param(rng, "bias", (8,))
    proj = rng.standard_normal((4, 8))
    return grad_check(lambda: T.tensor_sum(T.mul(T.layernorm(x.tensor, g.tensor, b.tensor), proj)),
                      [x, g, b], tol=OP_TOL)


def check_activations(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _param(rng, "x", (40,))
    proj = rng.standard_normal((40,))
    def f():
        t = x.tensor
        pieces = [T.gelu(t), T.sigmoid(t), T.softplus(t), T.exp(T.mul(t, 0.3)),
                  T.sin(t), T.cos(t)]
        total = None
        for piece in pieces:
            term = T.tensor_sum(T.mul(piece, proj))
            total = term if total is None else T.add(total, term)
        return total
    return grad_check(f, [x], tol=OP_TOL)


def check_softmax(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _param(rng, "x", (4, 7))
    proj = rng.standard_normal((4, 7))
    return grad_check(lambda: T.tensor_sum(T.mul(T.softmax(x.tensor, axis=-1), proj)),
                      [x], tol=OP_TOL)


def check_bilinear(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    fmap = _param(rng, "map", (3, 5, 6))
    # keep queries off clamp boundaries and cell edges, where the sampler kinks
    uv = Parameter("uv", rng.uniform(1.2, 3.8, size=(10, 2)))
    proj = rng.standard_normal((10, 3))
    return grad_check(lambda: T.tensor_sum(T.mul(T.bilinear_sample(fmap.tensor, uv.tensor), proj)),
                      [fmap, uv], tol=OP_TOL)


def check_composite(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.uniform(0.1, 2.0, size=(4, 6)), axis=1)
    raw_sigma = _param(rng, "raw_sigma", (4, 6))
    color = Parameter("color", rng.uniform(0.1, 0.9, size=(4, 6, 3)))
    proj = rng.standard_normal((4, 3))
    def f():
        res = composite(ts, T.softplus(raw_sigma.tensor), color.tensor,
                        t_far=2.2, background=(0.2, 0.3, 0.4))
        return T.tensor_sum(T.mul(res.color, proj))
    return grad_check(f, [raw_sigma, color], tol=OP_TOL)


def build_composed_case(seed: int = 0):
    """Miniature end-to-end setup: tiny model, 16x16 source image, 2 rays."""
    cfg = tiny()
    cfg.bn_eval_batch_stats = True   # batch statistics, no buffer updates
    model = SingleImageNerf(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    image = rng.random((3, 16, 16))
    src_cam = CameraModel(fx=16.0, fy=16.0, cx=8.0, cy=8.0,
                          pose=look_at((0.0, 0.3, -2.5), (0.0, 0.0, 0.0)),
                          t_near=1.4, t_far=3.6, height=16, width=16)
    tgt_cam = orbit_cameras(src_cam, 8, 2.5)[1]
    rays = generate_rays(tgt_cam, [(5, 7), (9, 4)])
    truth = rng.random((2, 3))
    background = (0.0, 0.0, 0.0)

    with no_grad():
        feats = model.featurize(image, mode="eval")
        _, fine = model.render(rays, src_cam, feats, background,
                               rng=np.random.default_rng(seed + 2), jitter=False)
    fine_t = fine.t

    def f():
        feats = model.featurize(image, mode="eval")
        coarse, fine = model.render(rays, src_cam, feats, background,
                                    rng=np.random.default_rng(0), jitter=False,
                                    fine_t=fine_t)
        return T.add(l2_loss(coarse.color, truth), l2_loss(fine.color, truth))

    return model, f


def check_composed_model(seed: int = 0, h: float = 1e-6,
                         max_per_tensor: int = 32) -> GradCheckReport:
    model, f = build_composed_case(seed)
    return grad_check(f, model.parameters().values(), h=h, tol=COMPOSED_TOL,
                      max_per_tensor=max_per_tensor,
                      rng=np.random.default_rng(seed + 3))


OP_CHECKS = {
    "matmul": check_matmul,
    "conv2d": check_conv2d,
    "conv_transpose2d": check_conv_transpose,
    "layernorm": check_layernorm,
    "activations": check_activations,
    "softmax": check_softmax,
    "bilinear_sample": check_bilinear,
    "composite": check_composite,
}


def run_all(seed: int = 0, log=None) -> bool:
    """Run every suite; one pass/fail line per check. Returns overall pass."""
    emit = log if log is not None else (lambda s: None)
    ok = True
    for name, fn in OP_CHECKS.items():
        report = fn(seed)
        worst = report.worst
        status = "pass" if report.passed else "FAIL"
        emit(f"{status}  {name:<18} worst rel_err {worst[1]:.3e} ({worst[0]})")
        ok &= report.passed
    report = check_composed_model(seed)
    worst = report.worst
    status = "pass" if report.passed else "FAIL"
    emit(f"{status}  {'composed_model':<18} worst rel_err {worst[1]:.3e} ({worst[0]})")
    return ok and report.passed
