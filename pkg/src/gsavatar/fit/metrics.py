"""Image quality metrics on the human region."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..objective import crop_box, ssim

PSNR_CAP = 99.0


def psnr(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """PSNR over masked pixels of images in [0, 1]; identical inputs give the cap."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    diff = np.asarray(rendered, dtype=np.float64)[mask] - np.asarray(target, dtype=np.float64)[mask]
    mse = float(np.mean(diff * diff))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def masked_ssim(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """SSIM over the human crop (mask bounding box, dilated)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    y0, y1, x0, x1 = crop_box(mask)
    return ssim(rendered[y0:y1, x0:x1], target[y0:y1, x0:x1])


@dataclass
class Evaluation:
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim}


def evaluate(rendered: list[np.ndarray], targets: list[np.ndarray], masks: list[np.ndarray]) -> Evaluation:
    if not (len(rendered) == len(targets) == len(masks)):
        raise ValueError(f"set sizes differ: {len(rendered)} rendered, {len(targets)} targets, {len(masks)} masks")
    return Evaluation(
        [psnr(r, t, m) for r, t, m in zip(rendered, targets, masks)],
        [masked_ssim(r, t, m) for r, t, m in zip(rendered, targets, masks)],
    )
