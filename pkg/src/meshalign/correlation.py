"""Contextual correlation: patch correlation volume, scale softmax, feature flow.

Volumes are stored channel-last, ``(H, W, H*W)``: the vector at a reference
cell holds one entry per target cell, target index ``k = row * W + col``.
The point-to-point cost volume is kept as the comparison baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .features import FeatureMap


@dataclass(frozen=True)
class CorrelationVolume:
    data: np.ndarray  # (H, W, H*W)
    kind: str = "raw"  # "raw" | "probability"

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FlowField:
    data: np.ndarray  # (H, W, 2): (m_hor, m_ver) per cell

    @property
    def horizontal(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def vertical(self) -> np.ndarray:
        return self.data[..., 1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _check_pair(f_r: FeatureMap, f_t: FeatureMap):
    if f_r.data.shape != f_t.data.shape:
        raise ValueError(f"feature maps differ in shape: {f_r.data.shape} vs {f_t.data.shape}")
    if not (f_r.normalized and f_t.normalized):
        raise ValueError("feature maps must be l2-normalized")


@numba.njit(cache=True)
def _cost_volume_loop(fr, ft, radius):
    c, h, w = fr.shape
    side = 2 * radius + 1
    out = np.zeros((h, w, side * side))
    for y in range(h):
        for x in range(w):
            for dy in range(-radius, radius + 1):
                yt = y + dy
                if yt < 0 or yt >= h:
                    continue
                for dx in range(-radius, radius + 1):
                    xt = x + dx
                    if xt < 0 or xt >= w:
                        continue
                    acc = 0.0
                    for ch in range(c):
                        acc += fr[ch, y, x] * ft[ch, yt, xt]
                    out[y, x, (dy + radius) * side + dx + radius] = acc
    return out


def cost_volume(f_r: FeatureMap, f_t: FeatureMap, radius: int) -> np.ndarray:
    """Point-to-point cosine similarity over a (2r+1)^2 displacement window.

    Channel ``(dy + r) * (2r + 1) + (dx + r)`` holds <F_r(x, y), F_t(x + dx, y + dy)>.
    Target locations outside the map contribute 0. Returns an (H, W, (2r+1)^2) array.
    """
    _check_pair(f_r, f_t)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    return _cost_volume_loop(np.ascontiguousarray(f_r.data), np.ascontiguousarray(f_t.data), int(radius))


@numba.njit(cache=True)
def _patches(data, k):
    """Zero-padded stride-1 K x K patches, flattened to (H*W, C*K*K)."""
    c, h, w = data.shape
    r = k // 2
    out = np.zeros((h * w, c * k * k))
    for y in range(h):
        for x in range(w):
            row = y * w + x
            for ch in range(c):
                for a in range(k):
                    yy = y + a - r
                    if yy < 0 or yy >= h:
                        continue
                    for b in range(k):
                        xx = x + b - r
                        if 0 <= xx < w:
                            out[row, (ch * k + a) * k + b] = data[ch, yy, xx]
    return out


@numba.njit(cache=True)
def _softmax_flow(corr, alpha, w):
    # fused scale softmax + expectation; one pass per reference cell
    n = corr.shape[0]
    out = np.empty((n, 2))
    for i in range(n):
        row = corr[i]
        top = row.max()
        total = 0.0
        sx = 0.0
        sy = 0.0
        for k in range(row.shape[0]):
            e = np.exp(alpha * (row[k] - top))
            total += e
            sx += e * (k % w)
            sy += e * (k // w)
        out[i, 0] = sx / total - (i % w)
        out[i, 1] = sy / total - (i // w)
    return out


def _raw_correlation(f_r: np.ndarray, f_t: np.ndarray, k: int) -> np.ndarray:
    return _patches(np.ascontiguousarray(f_r), k) @ _patches(np.ascontiguousarray(f_t), k).T


def correlation_volume(f_r: FeatureMap, f_t: FeatureMap, k: int = 3) -> CorrelationVolume:
    """Patch-to-patch correlation with H*W channels.

    Target patches act as K x K filters slid over the reference map, which
    reduces to one matrix product of the two im2col patch matrices.
    """
    _check_pair(f_r, f_t)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"patch side must be odd and positive, got {k}")
    _, h, w = f_r.data.shape
    corr = _raw_correlation(f_r.data, f_t.data, k)
    return CorrelationVolume(corr.reshape(h, w, h * w), kind="raw")


def scale_softmax(v: CorrelationVolume, alpha: float = 10.0) -> CorrelationVolume:
    if v.kind != "raw":
        raise ValueError("scale softmax expects a raw correlation volume")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    z = alpha * v.data
    z = z - z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return CorrelationVolume(z, kind="probability")


def feature_flow(p: CorrelationVolume) -> FlowField:
    """Expected target coordinate minus own coordinate, (horizontal, vertical)."""
    if p.kind != "probability":
        raise ValueError("feature flow needs a probability volume")
    h, w = p.height, p.width
    k = np.arange(h * w)
    tx = (k % w).astype(np.float64)
    ty = (k // w).astype(np.float64)
    rows, cols = np.mgrid[0:h, 0:w]
    m_hor = p.data @ tx - cols
    m_ver = p.data @ ty - rows
    return FlowField(np.stack([m_hor, m_ver], axis=-1))


def ccl(f_r: FeatureMap, f_t: FeatureMap, k: int = 3, alpha: float = 10.0) -> FlowField:
    """Feature flow from reference to target features.

    Same result as ``feature_flow(scale_softmax(correlation_volume(...)))`` but
    the softmax and the expectation are fused so the probability volume is
    never materialized.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    vol = correlation_volume(f_r, f_t, k)
    h, w = vol.height, vol.width
    flow = _softmax_flow(vol.data.reshape(h * w, h * w), float(alpha), w)
    return FlowField(flow.reshape(h, w, 2))


def cost_volume_channels(n: int) -> int:
    """Channels of the full-range cost volume on an n x n map."""
    return (2 * n + 1) ** 2


def correlation_channels(n: int) -> int:
    return n * n
