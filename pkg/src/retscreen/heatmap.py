"""Per-pixel pathological-evidence maps from input gradients.

The evidence for an image is the absolute gradient of the model's pathology
score with respect to each input pixel, summed over channels, smoothed with
a sigma = 2 px Gaussian and max-normalized to [0, 1]. Ensemble maps average
the member maps before normalization. Overlays blend the green channel
toward 255 where the map exceeds a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt, gaussian_filter

from . import autodiff as ad
from .autodiff import Tensor
from .ensemble import Ensemble
from .micro_cnn import logits_graph
from .preprocess import PreprocessedImage, RawImage, bilinear_resize

SMOOTH_SIGMA = 2.0


@dataclass(frozen=True)
class EvidenceMap:
    values: np.ndarray          # (S, S) float32 in [0, 1]
    source_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"evidence map must be 2-d, got {v.shape}")
        if (v < 0).any() or (v > 1).any():
            raise ValueError("evidence map values must lie in [0, 1]")


def _score_weights(n_classes):
    if n_classes == 2:
        return np.array([0.0, 1.0])
    return np.arange(n_classes, dtype=np.float64)


def model_gradient_map(model, pre):
    """Unnormalized smoothed |d score / d pixel| map at the model's input size."""
    tensor = pre.tensor if isinstance(pre, PreprocessedImage) else np.asarray(pre)
    x = Tensor(tensor[None].astype(np.float32), requires_grad=True)
    logits, _ = logits_graph(model, x)
    probs = ad.softmax(logits)
    w = _score_weights(model.config.n_classes).astype(np.float32)
    score = ad.tensor_sum(ad.mul(probs, Tensor(w[None, :])))
    score.backward()
    raw_map = np.abs(x.grad[0]).sum(axis=0)
    return gaussian_filter(raw_map.astype(np.float64), sigma=SMOOTH_SIGMA,
                           mode="reflect")


def input_gradient_map(model_or_ensemble, pre, source_id="") -> EvidenceMap:
    """Evidence map for one image; accepts a model with a matching
    PreprocessedImage, or an ensemble with a dict of them keyed by size."""
    if isinstance(model_or_ensemble, Ensemble):
        e = model_or_ensemble
        target = max(m.config.input_size for m in e.members)
        acc = np.zeros((target, target), dtype=np.float64)
        for m in e.members:
            size = m.config.input_size
            member_pre = pre[size] if isinstance(pre, dict) else pre
            raw_map = model_gradient_map(m, member_pre)
            if size != target:
                raw_map = bilinear_resize(raw_map, target)
            acc += raw_map
        raw_map = acc / len(e.members)
        model_id = f"ensemble[{len(e.members)}]"
    else:
        raw_map = model_gradient_map(model_or_ensemble, pre)
        model_id = "model"
    peak = raw_map.max()
    if peak > 0:
        raw_map = raw_map / peak
    return EvidenceMap(values=raw_map.astype(np.float32), source_id=source_id,
                       model_id=model_id)


def overlay_green(raw: RawImage, emap: EvidenceMap, tau=0.5, bbox=None) -> RawImage:
    """Blend the green channel toward 255 where the map is >= tau.

    The map is resized to ``bbox`` (default: the whole image); red and blue
    channels are never modified.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    h, w = raw.values.shape[:2]
    if bbox is None:
        bbox = (0, 0, w, h)
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"crop box {bbox} does not fit image {w}x{h}")
    resized = bilinear_resize(emap.values.astype(np.float64), y1 - y0, x1 - x0)
    weight = np.where(resized >= tau, np.clip(resized, 0.0, 1.0), 0.0)
    out = raw.values.copy()
    green = out[y0:y1, x0:x1, 1].astype(np.float64)
    out[y0:y1, x0:x1, 1] = np.clip(
        np.round(green + weight * (255.0 - green)), 0, 255).astype(np.uint8)
    return RawImage(out)


def save_map_png16(emap: EvidenceMap, path):
    """Raw evidence map as a 16-bit grayscale PNG."""
    arr = np.round(emap.values.astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def pointing_game_hit(emap_values, lesion_mask, dilation_px=5):
    """Whether the map's argmax pixel falls inside the dilated lesion mask.

    ``emap_values`` must already be at the mask's resolution.
    """
    mask = np.asarray(lesion_mask) > 0
    if not mask.any():
        return False
    if emap_values.shape != mask.shape:
        raise ValueError(
            f"map shape {emap_values.shape} does not match mask {mask.shape}")
    dilated = distance_transform_edt(~mask) <= dilation_px
    idx = np.unravel_index(int(np.argmax(emap_values)), emap_values.shape)
    return bool(dilated[idx])
