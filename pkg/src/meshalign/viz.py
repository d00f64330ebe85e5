"""Diagnostic renderings: flow color wheel, mesh overlay, red/blue fusion."""
from __future__ import annotations

import colorsys

import numpy as np

from .correlation import FlowField
from .imaging import Image, to_grayscale
from .mesh import Mesh

EDGE_COLOR = (1.0, 0.15, 0.1)
VERTEX_COLOR = (0.1, 1.0, 0.2)

_hsv_to_rgb = np.vectorize(colorsys.hsv_to_rgb, otypes=[float, float, float])


def flow_to_color(flow: FlowField, upscale: int = 1) -> Image:
    """Hue encodes direction, saturation the magnitude relative to the largest one."""
    u, v = flow.horizontal, flow.vertical
    mag = np.hypot(u, v)
    peak = mag.max()
    sat = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    rgb = np.stack(_hsv_to_rgb(hue, sat, np.ones_like(mag)))
    if upscale > 1:
        rgb = rgb.repeat(upscale, axis=1).repeat(upscale, axis=2)
    return Image(rgb)


def _as_rgb(img: Image) -> np.ndarray:
    if img.channels == 3:
        return np.array(img.data)
    return np.repeat(to_grayscale(img).data, 3, axis=0)


def _paint(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray, color) -> None:
    xi = np.rint(xs).astype(np.intp)
    yi = np.rint(ys).astype(np.intp)
    keep = (xi >= 0) & (xi < canvas.shape[2]) & (yi >= 0) & (yi < canvas.shape[1])
    for ch, val in enumerate(color):
        canvas[ch, yi[keep], xi[keep]] = val


def mesh_overlay(img: Image, mesh: Mesh, radius: int = 1) -> Image:
    """Draw mesh edges and vertices (target coordinates) over ``img``."""
    canvas = _as_rgb(img)
    v = mesh.vertices
    segments = [(v[:, :-1], v[:, 1:]), (v[:-1, :], v[1:, :])]
    for a, b in segments:
        a = a.reshape(-1, 2)
        b = b.reshape(-1, 2)
        steps = int(np.ceil(np.abs(b - a).max())) * 2 + 2
        t = np.linspace(0.0, 1.0, steps)[:, None, None]
        pts = a[None] + t * (b - a)[None]
        _paint(canvas, pts[..., 0].ravel(), pts[..., 1].ravel(), EDGE_COLOR)
    offs = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(offs, offs)
    vx = v[..., 0].reshape(-1, 1) + dx.reshape(1, -1)
    vy = v[..., 1].reshape(-1, 1) + dy.reshape(1, -1)
    _paint(canvas, vx.ravel(), vy.ravel(), VERTEX_COLOR)
    return Image(canvas)


def fuse(reference: Image, warped: Image) -> Image:
    """Reference with its blue channel zeroed over warped target with its red channel zeroed.

    Red comes from the reference, blue from the warped target and green is the
    mean of both, so reference-only regions show orange and misalignment shows
    as colour fringes. Gray inputs are replicated to three channels.
    """
    if (reference.height, reference.width) != (warped.height, warped.width):
        raise ValueError("fusion needs images of equal size")
    r, t = (np.repeat(x.data, 3, axis=0) if x.channels == 1 else x.data for x in (reference, warped))
    return Image(np.stack([r[0], 0.5 * (r[1] + t[1]), t[2]]))
