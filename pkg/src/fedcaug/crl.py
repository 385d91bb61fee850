"""Causal region localization.

A saliency backend proposes a raw binary mask for the (sharpened) image; the
mask is then reduced to its largest 8-connected component, closed with a 3x3
square, and summarised by its tight bounding box. Empty proposals fall back to
the full frame so downstream augmentation degrades to a no-op.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

from . import image_ops
from .image_ops import EIGHT

BACKENDS = ("threshold", "spectral_residual")


@dataclass(frozen=True)
class CausalRegion:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    bbox: Tuple[int, int, int, int]  # x1, y1, x2, y2 inclusive

    @classmethod
    def from_mask(cls, mask) -> "CausalRegion":
        mask = (np.asarray(mask) != 0).astype(np.uint8)
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            raise ValueError("causal region mask must be non-empty")
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        return cls(mask, bbox)

    @classmethod
    def full_frame(cls, height: int, width: int) -> "CausalRegion":
        return cls(np.ones((height, width), dtype=np.uint8), (0, 0, width - 1, height - 1))

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def complement(self) -> np.ndarray:
        return (1 - self.mask).astype(np.uint8)


@dataclass(frozen=True)
class SaliencyBackend:
    """Classical stand-in for a learned saliency network.

    ``threshold``: pixels whose luminance deviates from the image median by
    more than ``level``. ``spectral_residual``: log-spectrum residual saliency
    with an ``avg_window`` box filter.
    """

    kind: str = "threshold"
    level: float = 0.15
    avg_window: int = 3

    def __post_init__(self):
        if self.kind not in BACKENDS:
            raise ValueError(f"unknown saliency backend {self.kind!r}; choose from {BACKENDS}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("threshold level must lie in (0, 1)")
        if self.avg_window < 3 or self.avg_window % 2 == 0:
            raise ValueError("avg_window must be an odd integer >= 3")

    def raw_mask(self, img) -> np.ndarray:
        if self.kind == "threshold":
            return threshold_saliency(img, self.level)
        return spectral_residual_saliency(img, self.avg_window)


def threshold_saliency(img, level: float) -> np.ndarray:
    lum = image_ops.luminance(img)
    return (np.abs(lum - np.median(lum)) > level).astype(np.uint8)


def spectral_residual_map(img, avg_window: int = 3) -> np.ndarray:
    """Continuous spectral-residual saliency (before binarization)."""
    lum = image_ops.luminance(img)
    h, w = lum.shape
    if h < 16 or w < 16:
        raise ValueError(f"spectral residual saliency needs an image of at least 16x16, got {h}x{w}")
    spectrum = np.fft.fft2(lum)
    amp = np.abs(spectrum)
    # relative floor keeps the residual invariant to luminance scaling
    log_amp = np.log(amp + 1e-12 * max(amp.max(), 1e-300))
    phase = np.angle(spectrum)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=avg_window, mode="wrap")
    sal = np.abs(np.fft.ifft2(np.exp(residual + 1j * phase))) ** 2
    return ndimage.gaussian_filter(sal, sigma=2.5, mode="reflect")


def spectral_residual_saliency(img, avg_window: int = 3) -> np.ndarray:
    sal = spectral_residual_map(img, avg_window)
    return (sal > 3.0 * sal.mean()).astype(np.uint8)


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=EIGHT)
    if count <= 1:
        return (labels > 0).astype(np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1  # ties -> first in raster order
    return (labels == keep).astype(np.uint8)


def close3x3(mask: np.ndarray) -> np.ndarray:
    # zero padding so the erosion does not eat pixels at the frame border
    padded = np.pad(mask.astype(bool), 2)
    closed = ndimage.binary_closing(padded, structure=EIGHT)
    return closed[2:-2, 2:-2].astype(np.uint8)


def localize(img, backend: SaliencyBackend = SaliencyBackend()) -> CausalRegion:
    img = image_ops.as_image(img)
    h, w = img.shape[:2]
    raw = backend.raw_mask(img)
    if not raw.any():
        return CausalRegion.full_frame(h, w)
    return CausalRegion.from_mask(close3x3(largest_component(raw)))


def extract_object(img, region: CausalRegion) -> np.ndarray:
    return image_ops.mask_apply(img, region.mask)


def extract_background(img, region: CausalRegion) -> np.ndarray:
    return image_ops.mask_apply(img, region.complement())


def fill_background(img, region: CausalRegion) -> np.ndarray:
    """Background with the object hole painted in the mean background colour.

    A full-frame region has no background pixels; the mean colour of the whole
    image is used instead.
    """
    img = image_ops.as_image(img)
    bg = region.complement().astype(bool)
    src = img[bg] if bg.any() else img.reshape(-1, img.shape[2])
    mean = src.mean(axis=0)
    out = img.copy()
    out[~bg] = mean
    return out


@dataclass(frozen=True)
class CRLConfig:
    lambda_weighted: float = 0.1
    canny_low: float = 0.1
    canny_high: float = 0.3
    canny_sigma: float = 1.0
    backend: SaliencyBackend = SaliencyBackend()


def sharpen_image(img, cfg: CRLConfig = CRLConfig()) -> np.ndarray:
    edges = image_ops.canny(img, cfg.canny_low, cfg.canny_high, cfg.canny_sigma)
    return image_ops.sharpen(img, edges, cfg.lambda_weighted)


def process(img, cfg: CRLConfig = CRLConfig()):
    """Sharpen then localize; returns (sharpened, region, object)."""
    sharpened = sharpen_image(img, cfg)
    region = localize(sharpened, cfg.backend)
    return sharpened, region, extract_object(sharpened, region)


# -- mask sidecar -----------------------------------------------------------

def write_mask_sidecar(path, region: CausalRegion) -> Tuple[Path, Path]:
    """Write ``<path>`` as a 0/255 PGM and ``<stem>.txt`` holding "x1 y1 x2 y2"."""
    path = Path(path)
    image_ops.write_pnm(path, region.mask.astype(np.float64))
    txt = path.with_suffix(".txt")
    txt.write_text(" ".join(str(v) for v in region.bbox) + "\n")
    return path, txt


def read_mask_sidecar(path) -> CausalRegion:
    path = Path(path)
    mask = (image_ops.read_pnm(path)[:, :, 0] > 0.5).astype(np.uint8)
    bbox = tuple(int(v) for v in path.with_suffix(".txt").read_text().split())
    if len(bbox) != 4:
        raise ValueError(f"{path.with_suffix('.txt')}: expected 4 integers, got {len(bbox)}")
    region = CausalRegion.from_mask(mask)
    if region.bbox != bbox:
        raise ValueError(f"bbox {bbox} in sidecar does not match mask bbox {region.bbox}")
    return region
