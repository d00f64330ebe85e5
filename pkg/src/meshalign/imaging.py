"""Image container, 8-bit file I/O and the bilinear sampler used by all warps.

Images are stored planar, shape ``(channels, height, width)``, float64 in [0, 1].
Pixel centres sit on integer coordinates: ``x`` indexes columns, ``y`` rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

_PNM_SUFFIXES = {".ppm", ".pgm", ".pnm"}


@dataclass(frozen=True)
class Image:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or 0 in data.shape:
            raise ValueError(f"image data must be (C, H, W) and non-empty, got {data.shape}")
        if data is self.data or data.base is not None:
            data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def from_hwc(cls, arr) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr[None])
        return cls(np.moveaxis(arr, -1, 0))

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.data, 0, -1)


def load_image(path) -> Image:
    """Read an 8-bit PNG or binary PPM/PGM, scaling bytes to [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as pil:
            pil.load()
            if pil.format not in ("PNG", "PPM"):
                raise ValueError(f"unsupported image format {pil.format!r}: {path}")
            if pil.mode in ("L", "1", "P", "LA", "RGBA", "RGB"):
                pil = pil.convert("L" if pil.mode in ("L", "1", "LA") else "RGB")
            else:
                raise ValueError(f"unsupported pixel mode {pil.mode!r} (8-bit gray/RGB only): {path}")
            arr = np.asarray(pil, dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0:
        raise ValueError(f"zero-dimension image: {path}")
    return Image.from_hwc(arr)


def save_image(img: Image, path) -> None:
    """Write 8-bit PNG, or PPM/PGM when the suffix asks for it. Values are clamped."""
    if img.channels not in (1, 3):
        raise ValueError(f"can only save 1 or 3 channels, got {img.channels}")
    path = Path(path)
    arr = np.round(np.clip(img.to_hwc(), 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(arr[..., 0] if img.channels == 1 else arr, mode="L" if img.channels == 1 else "RGB")
    fmt = "PPM" if path.suffix.lower() in _PNM_SUFFIXES else "PNG"
    pil.save(path, format=fmt)


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    if img.channels != 3:
        raise ValueError(f"grayscale conversion needs 1 or 3 channels, got {img.channels}")
    return Image(np.tensordot(GRAY_WEIGHTS, img.data, axes=1)[None])


def sample_array(data: np.ndarray, x, y) -> np.ndarray:
    """Bilinear lookup into a (C, H, W) array with zero padding.

    ``x``/``y`` may be scalars or arrays of any matching shape; the result has
    shape ``(C, *x.shape)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c, h, w = data.shape
    # One ring of zeros makes every sample inside [-1, W] x [-1, H] a plain lookup.
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = data
    return _sample_padded(padded, x, y)


def _sample_padded(padded: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = padded.shape[1] - 2, padded.shape[2] - 2
    xs = x + 1.0
    ys = y + 1.0
    outside = ~((xs > 0.0) & (xs < w + 1.0) & (ys > 0.0) & (ys < h + 1.0))
    xs = np.where(outside, 0.0, xs)
    ys = np.where(outside, 0.0, ys)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h)
    fx = xs - x0
    fy = ys - y0
    v00 = padded[:, y0, x0]
    v01 = padded[:, y0, x0 + 1]
    v10 = padded[:, y0 + 1, x0]
    v11 = padded[:, y0 + 1, x0 + 1]
    out = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy
    return np.where(outside, 0.0, out)


def sample_bilinear(img: Image, x, y) -> np.ndarray:
    """Per-channel bilinear value(s) at continuous column ``x`` and row ``y``."""
    return sample_array(img.data, x, y)


def resize_array(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    c, h, w = data.shape
    if (h, w) == (out_h, out_w):
        return data.copy()
    # align_corners=False; source coords clamped to the border
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.minimum(np.floor(sy).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    top = data[:, y0][:, :, x0] * (1 - fx) + data[:, y0][:, :, x1] * fx
    bot = data[:, y1][:, :, x0] * (1 - fx) + data[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    return Image(resize_array(img.data, out_h, out_w))


def constant_image(height: int, width: int, value: float = 1.0, channels: int = 1) -> Image:
    return Image(np.full((channels, height, width), float(value)))
