"""Fundus photograph preprocessing: field-of-view crop, resize, illumination
normalization.

The pipeline is crop -> bilinear resize -> subtract a large-kernel Gaussian
background estimate -> per-channel standardization. The Gaussian subtraction
removes smooth illumination gradients while leaving small lesions intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .records import DataError

SD_FLOOR = 1e-6


@dataclass(frozen=True)
class RawImage:
    """8-bit RGB image, values shaped (height, width, 3)."""
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[2] != 3 or v.dtype != np.uint8:
            raise ValueError(f"RawImage needs uint8 (H, W, 3) values, got "
                             f"{v.shape} {v.dtype}")
        if v.shape[0] < 16 or v.shape[1] < 16:
            raise ValueError(f"image too small: {v.shape[1]}x{v.shape[0]}")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class PreprocessedImage:
    tensor: np.ndarray          # float32, (3, S, S)
    source_id: str
    fov_bbox: tuple             # (x0, y0, x1, y1) in source pixel coords
    degenerate: bool = False


def load_raw(path) -> RawImage:
    """Load a PNG or binary PPM (P6) file as RGB."""
    try:
        with Image.open(path) as im:
            return RawImage(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def save_png(image, path):
    arr = image.values if isinstance(image, RawImage) else np.asarray(image)
    Image.fromarray(arr).save(path, format="PNG")


def fov_crop(raw: RawImage):
    """Tight square crop around the illuminated field of view.

    Pixels brighter than 10% of the 99th-percentile gray level define the
    field. The tight bounding box is expanded to a square and clipped to the
    image; if the box covers less than 25% of the image (or the image is
    black) a centered square crop is returned and flagged degenerate.
    """
    gray = raw.values.astype(np.float64).mean(axis=2)
    h, w = gray.shape
    thresh = 0.1 * np.percentile(gray, 99)
    mask = gray > thresh
    degenerate = False
    if not mask.any():
        degenerate = True
    else:
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        y0, y1 = rows[0], rows[-1] + 1
        x0, x1 = cols[0], cols[-1] + 1
        if (y1 - y0) * (x1 - x0) < 0.25 * h * w:
            degenerate = True
    if degenerate:
        side = min(h, w)
        y0 = (h - side) // 2
        x0 = (w - side) // 2
        bbox = (x0, y0, x0 + side, y0 + side)
    else:
        side = min(max(y1 - y0, x1 - x0), min(h, w))
        cy = (y0 + y1) / 2.0
        cx = (x0 + x1) / 2.0
        y0 = int(round(cy - side / 2.0))
        x0 = int(round(cx - side / 2.0))
        y0 = min(max(y0, 0), h - side)
        x0 = min(max(x0, 0), w - side)
        bbox = (x0, y0, x0 + side, y0 + side)
    x0, y0, x1, y1 = bbox
    return RawImage(raw.values[y0:y1, x0:x1]), bbox, degenerate


def bilinear_resize(channel, out_h, out_w=None):
    """Center-aligned bilinear resample of a 2-d array to (out_h, out_w)."""
    if out_w is None:
        out_w = out_h
    h, w = channel.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    c = channel.astype(np.float64)
    top = c[np.ix_(y0, x0)] * (1 - wx) + c[np.ix_(y0, x1)] * wx
    bot = c[np.ix_(y1, x0)] * (1 - wx) + c[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def normalize(raw: RawImage, target_size: int, source_id: str = "") -> PreprocessedImage:
    """Crop, resize to target_size, remove background, standardize channels.

    Each channel gets a sigma = S/6 Gaussian background estimate subtracted,
    then is standardized to mean 0 / sd 1 (sd floored at 1e-6). A constant
    input produces an all-zero tensor flagged degenerate.
    """
    if target_size < 4:
        raise ValueError(f"target_size too small: {target_size}")
    cropped, bbox, crop_degenerate = fov_crop(raw)
    sigma = target_size / 6.0
    out = np.empty((3, target_size, target_size), dtype=np.float32)
    dead_channels = 0
    for ch in range(3):
        resized = bilinear_resize(cropped.values[:, :, ch], target_size)
        background = gaussian_filter(resized, sigma=sigma, mode="reflect")
        residual = resized - background
        sd = residual.std()
        if sd < SD_FLOOR:
            out[ch] = 0.0
            dead_channels += 1
        else:
            out[ch] = ((residual - residual.mean()) / max(sd, SD_FLOOR)).astype(np.float32)
    degenerate = crop_degenerate or dead_channels == 3
    if dead_channels == 3:
        out[:] = 0.0
    return PreprocessedImage(tensor=out, source_id=source_id, fov_bbox=bbox,
                             degenerate=degenerate)
