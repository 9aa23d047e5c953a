"""Reconstruction-quality metrics: MSE, PSNR, SSIM.

All metrics expect images in de-normalized [0, 1] space.  SSIM follows the
standard local-statistics formulation with an 11x11 Gaussian window
(sigma 1.5) evaluated on the valid interior region, constants
C1=(0.01 L)^2 and C2=(0.03 L)^2 with L=1.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def mse(x: np.ndarray, ref: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return float(np.mean((x - ref) ** 2))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    err = mse(x, ref)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _gaussian_kernel(sigma: float = SSIM_SIGMA, size: int = SSIM_WINDOW):
    radius = size // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    k /= k.sum()
    return np.outer(k, k)


_KERNEL = _gaussian_kernel()


def _local_mean(img: np.ndarray) -> np.ndarray:
    """Valid-mode correlation with the Gaussian window."""
    windows = np.lib.stride_tricks.sliding_window_view(img, _KERNEL.shape)
    return np.einsum("ijkl,kl->ij", windows, _KERNEL)


def _ssim_single(x: np.ndarray, ref: np.ndarray) -> float:
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    ux = _local_mean(x)
    uy = _local_mean(ref)
    uxx = _local_mean(x * x)
    uyy = _local_mean(ref * ref)
    uxy = _local_mean(x * ref)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cxy = uxy - ux * uy
    num = (2 * ux * uy + _C1) * (2 * cxy + _C2)
    den = (ux * ux + uy * uy + _C1) * (vx + vy + _C2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Mean local SSIM; multi-channel images average per-channel scores."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        return _ssim_single(x, ref)
    if x.ndim == 3:
        return float(np.mean([_ssim_single(x[c], ref[c]) for c in range(x.shape[0])]))
    raise ValueError("ssim expects (H, W) or (C, H, W) images")


@dataclass
class MetricReport:
    """Per-sample scores plus their mean and standard deviation."""

    sample_ids: list[int]
    ssim: list[float]
    psnr: list[float]
    mse: list[float]
    mmd: list[float] = field(default_factory=list)
    trd: list[float] = field(default_factory=list)

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in ("ssim", "psnr", "mse", "mmd", "trd"):
            vals = getattr(self, name)
            if vals:
                out[name] = (float(np.mean(vals)), float(np.std(vals)))
        return out

    def write_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "ssim", "psnr", "mse", "mmd", "trd"])
            for k, sid in enumerate(self.sample_ids):
                row = [sid,
                       repr(self.ssim[k]),
                       repr(self.psnr[k]),
                       repr(self.mse[k]),
                       repr(self.mmd[k]) if self.mmd else "",
                       repr(self.trd[k]) if self.trd else ""]
                writer.writerow(row)
        os.replace(tmp, path)


def compare_batches(originals: np.ndarray, recons: np.ndarray,
                    sample_ids=None) -> MetricReport:
    """Per-sample metrics between matched (B, C, H, W) batches in [0, 1]."""
    originals = np.asarray(originals, dtype=np.float64)
    recons = np.asarray(recons, dtype=np.float64)
    if originals.shape != recons.shape:
        raise ValueError("batch shapes differ")
    n = originals.shape[0]
    if sample_ids is None:
        sample_ids = list(range(n))
    report = MetricReport(sample_ids=list(sample_ids), ssim=[], psnr=[], mse=[])
    for k in range(n):
        report.ssim.append(ssim(originals[k], recons[k]))
        report.psnr.append(psnr(recons[k], originals[k]))
        report.mse.append(mse(recons[k], originals[k]))
    return report
