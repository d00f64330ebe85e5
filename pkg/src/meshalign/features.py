"""Deterministic multi-scale features standing in for a learned backbone.

Each scale carries three channels computed on the downsampled grayscale image:
intensity centred on mid-gray, and the horizontal and vertical Sobel responses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import Image, resize_array, to_grayscale

NORM_EPS = 1e-8
# Raw intensities are all positive and would dominate every normalized vector.
INTENSITY_CENTER = 0.5


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (C, H, W)
    normalized: bool = False

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _sobel_features(gray: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.stack([gray - INTENSITY_CENTER, gx, gy])


def extract_features(img: Image, num_scales: int) -> list[FeatureMap]:
    """Return ``num_scales`` maps; scale k (1-based) is (H / 2**k, W / 2**k)."""
    if num_scales < 1:
        raise ValueError("need at least one scale")
    h, w = img.height, img.width
    if h < 2**num_scales or w < 2**num_scales:
        raise ValueError(f"{h}x{w} image is too small for {num_scales} scales")
    gray = to_grayscale(img).data
    scales = []
    for k in range(1, num_scales + 1):
        gray = resize_array(gray, h >> k, w >> k)
        scales.append(FeatureMap(_sobel_features(gray[0])))
    return scales


def l2_normalize(f: FeatureMap) -> FeatureMap:
    norm = np.sqrt(np.sum(f.data**2, axis=0, keepdims=True))
    return FeatureMap(f.data / np.maximum(norm, NORM_EPS), normalized=True)


def build_layer_features(scales: list[FeatureMap], layer: int) -> FeatureMap:
    """Stack scales ``layer..N`` at the size of scale ``layer`` (1-based) and normalize."""
    n = len(scales)
    if not 1 <= layer <= n:
        raise ValueError(f"layer must lie in [1, {n}], got {layer}")
    base = scales[layer - 1]
    parts = [resize_array(s.data, base.height, base.width) for s in scales[layer - 1 :]]
    return l2_normalize(FeatureMap(np.concatenate(parts, axis=0)))


def image_features(img: Image, layer: int, num_scales: int = 3) -> FeatureMap:
    return build_layer_features(extract_features(img, num_scales), layer)
