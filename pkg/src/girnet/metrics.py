"""Charbonnier reconstruction loss and PSNR / SSIM quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, make_node

CHARBONNIER_EPS = 1e-3
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def charbonnier_loss(pred: Sequence[Tensor], target: Sequence, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Mean over frames and pixels of sqrt((pred - target)^2 + eps^2)."""
    if len(pred) != len(target) or not pred:
        raise ValueError(f"pred has {len(pred)} frames, target has {len(target)}")
    diffs = []
    for p, t in zip(pred, target):
        td = t.data if isinstance(t, Tensor) else np.asarray(t)
        if p.shape != td.shape:
            raise ValueError(f"frame shape mismatch {p.shape} vs {td.shape}")
        diffs.append(p.data - td.astype(p.dtype, copy=False))
    count = sum(d.size for d in diffs)
    roots = [np.sqrt(d * d + p.dtype.type(eps * eps)) for d, p in zip(diffs, pred)]
    value = sum(float(r.sum(dtype=np.float64)) for r in roots) / count

    def backward(g):
        gs = float(np.asarray(g).reshape(()))
        return tuple(d / r * (gs / count) for d, r in zip(diffs, roots))

    return make_node(np.array([value], dtype=pred[0].dtype), tuple(pred), backward, "charbonnier")


def to_luma(frame: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of a (3, H, W) RGB frame in [0, 1], as (1, H, W)."""
    r, g, b = frame[0], frame[1], frame[2]
    return ((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)[None]


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, target, peak: float = 1.0, luma_only: bool = False) -> float:
    a, b = _check_pair(pred, target)
    if luma_only:
        a, b = to_luma(a), to_luma(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    k = g1.size
    rows = sliding_window_view(img, k, axis=-2) @ g1  # (..., H-k+1, W)
    return sliding_window_view(rows, k, axis=-1) @ g1


def ssim_map(pred, target, data_range: float = 1.0) -> np.ndarray:
    """Per-channel SSIM over every fully-contained 11x11 Gaussian window."""
    a, b = _check_pair(pred, target)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    ax = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g1 = np.exp(-(ax**2) / (2 * SSIM_SIGMA**2))
    g1 /= g1.sum()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g1)
    mu_b = _filter_valid(b, g1)
    var_a = _filter_valid(a * a, g1) - mu_a * mu_a
    var_b = _filter_valid(b * b, g1) - mu_b * mu_b
    cov = _filter_valid(a * b, g1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, target, data_range: float = 1.0, luma_only: bool = False) -> float:
    a, b = _check_pair(pred, target)
    if luma_only:
        a, b = to_luma(a), to_luma(b)
    return float(ssim_map(a, b, data_range).mean())


@dataclass
class MetricReport:
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    charbonnier: float | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")


def evaluate_frames(pred: Sequence[np.ndarray], target: Sequence[np.ndarray], luma_only: bool = False) -> MetricReport:
    if len(pred) != len(target):
        raise ValueError(f"{len(pred)} predicted frames vs {len(target)} ground-truth frames")
    report = MetricReport()
    for p, t in zip(pred, target):
        report.psnr_db.append(psnr(p, t, luma_only=luma_only))
        report.ssim.append(ssim(p, t, luma_only=luma_only))
    return report
