"""Pixel kernels: Gaussian blur, Sobel, Canny, sharpening, masking, compositing.

Images are float arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1]. Grayscale inputs may also be passed as (H, W). Edge maps and masks are
(H, W) uint8 arrays with values in {0, 1}.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])

# 8-connectivity structuring element
EIGHT = np.ones((3, 3), dtype=bool)


def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W), (H, W, 1) or (H, W, 3) image, got {img.shape}")
    return img


def luminance(img) -> np.ndarray:
    """(H, W) luminance; RGB weighted 0.299/0.587/0.114, grayscale passed through."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA


def _check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    return (mask != 0).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    # half-sample symmetric padding (d c b a | a b c d)
    r = len(kernel) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    ap = np.pad(a, pad, mode="symmetric")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for t, w in enumerate(kernel):
        out += w * np.take(ap, np.arange(t, t + n), axis=axis)
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), symmetric borders."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    img = as_image(img)
    k = gaussian_kernel(sigma)
    out = _correlate_axis(_correlate_axis(img, k, 0), k, 1)
    return np.clip(out, 0.0, 1.0)


def _blur_plane(plane: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    return _correlate_axis(_correlate_axis(plane, k, 0), k, 1)


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


def sobel(gray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """3x3 Sobel gradients of a single-channel image.

    Returns (gx, gy, magnitude, direction). gx grows to the right, gy grows
    downward; direction = atan2(gy, gx) folded into (-pi, pi].
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        if g.shape[2] != 1:
            raise ValueError("sobel expects a single-channel image")
        g = g[:, :, 0]
    gp = np.pad(g, 1, mode="symmetric")
    # difference first, then [1, 2, 1] smoothing: constants give exact zeros
    dx = gp[:, 2:] - gp[:, :-2]
    dy = gp[2:, :] - gp[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    mag = np.hypot(gx, gy)
    direction = np.arctan2(gy, gx)
    direction[direction <= -np.pi] = np.pi
    return gx, gy, mag, direction


# (row, col) step along the gradient for each quantized direction bin
_NMS_STEPS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[i, j] = a[i + dy, j + dx], zero outside."""
    h, w = a.shape
    out = np.zeros_like(a)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[yd, xd] = a[ys, xs]
    return out


def non_max_suppression(mag: np.ndarray, direction: np.ndarray, rel_tol: float = 1e-9) -> np.ndarray:
    """Thin ridges along the gradient, with direction quantized to 0/45/90/135 deg.

    A pixel survives if it is >= its forward neighbour and > its backward one,
    so flat two-pixel plateaus keep exactly one pixel. Differences below
    ``rel_tol`` of the peak count as ties, which keeps the choice stable under
    rounding noise (e.g. after a uniform brightness shift).
    """
    eps = rel_tol * float(mag.max())
    angle = np.degrees(direction) % 180.0
    bins = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dy, dx) in _NMS_STEPS.items():
        sel = bins == b
        if not sel.any():
            continue
        fwd = _shifted(mag, dy, dx)
        back = _shifted(mag, -dy, -dx)
        keep |= sel & (mag >= fwd - eps) & (mag > back + eps)
    return np.where(keep, mag, 0.0)


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    strong = nms >= high
    labels, count = ndimage.label(weak, structure=EIGHT)
    if count == 0:
        return np.zeros(nms.shape, dtype=np.uint8)
    seeded = np.zeros(count + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return seeded[labels].astype(np.uint8)


def canny(img, low: float = 0.1, high: float = 0.3, sigma: float = 1.0) -> np.ndarray:
    """Canny edge map.

    ``low`` and ``high`` are fractions of the maximum gradient magnitude, so the
    result does not depend on absolute contrast or on a uniform brightness
    offset. RGB input is reduced to luminance first.
    """
    if not (0 < low < high <= 1):
        raise ValueError(f"thresholds must satisfy 0 < low < high <= 1, got low={low}, high={high}")
    gray = luminance(img)
    smooth = _blur_plane(gray, sigma)
    _, _, mag, direction = sobel(smooth)
    peak = mag.max()
    # flat images: any residual gradient is float noise
    if peak <= 1e-9:
        return np.zeros(gray.shape, dtype=np.uint8)
    nms = non_max_suppression(mag / peak, direction)
    return hysteresis(nms, low, high)


def sharpen(img, edges, lambda_weighted: float) -> np.ndarray:
    """img * (1 - lambda) + edges * lambda, edges broadcast over channels."""
    if not 0.0 <= lambda_weighted <= 1.0:
        raise ValueError("lambda_weighted must lie in [0, 1]")
    img = as_image(img)
    e = _check_mask(edges, img.shape).astype(np.float64)[:, :, None]
    return np.clip(img * (1.0 - lambda_weighted) + e * lambda_weighted, 0.0, 1.0)


def mask_apply(img, mask) -> np.ndarray:
    img = as_image(img)
    m = _check_mask(mask, img.shape)
    return img * m[:, :, None]


def composite(obj, mask, background, alpha: float) -> np.ndarray:
    """Blend ``obj`` onto ``background`` inside ``mask``; background elsewhere."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    obj = as_image(obj)
    background = as_image(background)
    if obj.shape != background.shape:
        raise ValueError(f"object {obj.shape} and background {background.shape} differ")
    m = _check_mask(mask, obj.shape).astype(bool)[:, :, None]
    blend = alpha * obj + (1.0 - alpha) * background
    return np.clip(np.where(m, blend, background), 0.0, 1.0)


# -- PPM / PGM --------------------------------------------------------------

PathLike = Union[str, Path]


def quantize(img) -> np.ndarray:
    return np.round(np.clip(as_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(img) -> bytes:
    """P6 for 3-channel images, P5 for single-channel, maxval 255."""
    q = quantize(img)
    h, w, c = q.shape
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def _header_tokens(data: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ValueError(f"truncated PNM header at offset {pos}")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _header_tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise ValueError(f"truncated raster: expected {n} bytes at offset {pos}, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c).astype(np.float64) / 255.0


def write_pnm(path: PathLike, img) -> None:
    Path(path).write_bytes(encode_pnm(img))


def read_pnm(path: PathLike) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())
