"""PSNR and single-scale Gaussian-windowed SSIM for [0, 1] images."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) with peak 1.0; identical images report the 100 dB cap."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode Gaussian-weighted local means of a 2-d array."""
    win = kernel.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(x, (win, win))
    return np.tensordot(view, kernel, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM index over channels and valid window positions."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    values = []
    for ca, cb in zip(a, b):
        mu_a = _windowed(ca, kernel)
        mu_b = _windowed(cb, kernel)
        var_a = _windowed(ca * ca, kernel) - mu_a ** 2
        var_b = _windowed(cb * cb, kernel) - mu_b ** 2
        cov = _windowed(ca * cb, kernel) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        values.append(num / den)
    return float(np.mean(values))


@dataclass
class MetricReport:
    """Per-view PSNR/SSIM rows plus their arithmetic means."""

    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, view_id: str, psnr_db: float, ssim_value: float) -> None:
        self.rows.append((view_id, float(psnr_db), float(ssim_value)))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def format_table(self) -> str:
        lines = [f"{vid}  psnr={p:.4f}  ssim={s:.4f}" for vid, p, s in self.rows]
        lines.append(f"mean  psnr={self.mean_psnr:.4f}  ssim={self.mean_ssim:.4f}")
        return "\n".join(lines)
