"""Backward multi-grid deformation.

A regular U x V grid lives on the warped canvas; each vertex stores where that
canvas point lands in the target image. Every output pixel finds its cell by
floor division and is mapped into the target by that cell's homography.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import homography as hg
from .imaging import Image, sample_array

CONVEX_TOL = 1e-9


class InvalidMeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (U+1, V+1, 2) target-image (x, y)
    canvas_h: int
    canvas_w: int

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"vertices must be (U+1, V+1, 2), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def rows(self) -> int:
        """U, the number of cell rows."""
        return self.vertices.shape[0] - 1

    @property
    def cols(self) -> int:
        """V, the number of cell columns."""
        return self.vertices.shape[1] - 1

    @property
    def cell_h(self) -> float:
        return self.canvas_h / self.rows

    @property
    def cell_w(self) -> float:
        return self.canvas_w / self.cols

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.canvas_h, self.canvas_w)


def regular_vertices(rows: int, cols: int, canvas_h: float, canvas_w: float) -> np.ndarray:
    ys = np.arange(rows + 1) * (canvas_h / rows)
    xs = np.arange(cols + 1) * (canvas_w / cols)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def regular_mesh(rows: int, cols: int, canvas_h: int, canvas_w: int) -> Mesh:
    if rows < 1 or cols < 1:
        raise ValueError(f"grid counts must be >= 1, got {rows}x{cols}")
    return Mesh(regular_vertices(rows, cols, canvas_h, canvas_w), canvas_h, canvas_w)


def mesh_from_homography(h: np.ndarray, rows: int, cols: int, canvas_h: int, canvas_w: int) -> Mesh:
    reg = regular_mesh(rows, cols, canvas_h, canvas_w)
    return reg.with_vertices(hg.apply(h, reg.vertices))


def cell_rect(mesh: Mesh, row: int, col: int):
    return (col * mesh.cell_w, row * mesh.cell_h, (col + 1) * mesh.cell_w, (row + 1) * mesh.cell_h)


def cell_quad(mesh: Mesh, row: int, col: int) -> np.ndarray:
    """Cell vertices in corner order TL, TR, BL, BR."""
    v = mesh.vertices
    return np.array([v[row, col], v[row, col + 1], v[row + 1, col], v[row + 1, col + 1]])


def cell_homography(mesh: Mesh, row: int, col: int) -> np.ndarray:
    if not (0 <= row < mesh.rows and 0 <= col < mesh.cols):
        raise IndexError(f"cell ({row}, {col}) outside {mesh.rows}x{mesh.cols} mesh")
    return hg.dlt_solve(hg.rect_corners(cell_rect(mesh, row, col)), cell_quad(mesh, row, col))


def square_to_quad(tl, tr, bl, br) -> np.ndarray:
    """Closed-form unit-square-to-quad homographies, batched over leading axes.

    (0,0)->tl, (1,0)->tr, (1,1)->br, (0,1)->bl.
    """
    p0, p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (tl, tr, br, bl))
    sx = p0[..., 0] - p1[..., 0] + p2[..., 0] - p3[..., 0]
    sy = p0[..., 1] - p1[..., 1] + p2[..., 1] - p3[..., 1]
    dx1 = p1[..., 0] - p2[..., 0]
    dx2 = p3[..., 0] - p2[..., 0]
    dy1 = p1[..., 1] - p2[..., 1]
    dy2 = p3[..., 1] - p2[..., 1]
    den = dx1 * dy2 - dx2 * dy1
    g = (sx * dy2 - dx2 * sy) / den
    h = (dx1 * sy - sx * dy1) / den
    out = np.empty(den.shape + (3, 3))
    out[..., 0, 0] = p1[..., 0] - p0[..., 0] + g * p1[..., 0]
    out[..., 0, 1] = p3[..., 0] - p0[..., 0] + h * p3[..., 0]
    out[..., 0, 2] = p0[..., 0]
    out[..., 1, 0] = p1[..., 1] - p0[..., 1] + g * p1[..., 1]
    out[..., 1, 1] = p3[..., 1] - p0[..., 1] + h * p3[..., 1]
    out[..., 1, 2] = p0[..., 1]
    out[..., 2, 0] = g
    out[..., 2, 1] = h
    out[..., 2, 2] = 1.0
    return out


def cell_homographies(mesh: Mesh) -> np.ndarray:
    """All (U, V, 3, 3) canvas-to-target cell homographies in closed form."""
    return _cell_homographies(mesh.vertices, mesh.cell_h, mesh.cell_w)


def _cell_homographies(v: np.ndarray, cell_h: float, cell_w: float) -> np.ndarray:
    rows, cols = v.shape[0] - 1, v.shape[1] - 1
    quad = square_to_quad(v[:-1, :-1], v[:-1, 1:], v[1:, :-1], v[1:, 1:])
    # canvas -> unit square of each cell
    to_unit = np.zeros((rows, cols, 3, 3))
    to_unit[..., 0, 0] = 1.0 / cell_w
    to_unit[..., 1, 1] = 1.0 / cell_h
    to_unit[..., 0, 2] = -np.arange(cols)[None, :]
    to_unit[..., 1, 2] = -np.arange(rows)[:, None]
    to_unit[..., 2, 2] = 1.0
    return quad @ to_unit


def cell_status(mesh: Mesh) -> np.ndarray:
    """Per-cell code: 0 convex, 1 concave but simple, 2 self-intersecting/flipped/degenerate."""
    v = mesh.vertices
    ring = np.stack([v[:-1, :-1], v[:-1, 1:], v[1:, 1:], v[1:, :-1]], axis=2)  # TL TR BR BL
    edges = np.roll(ring, -1, axis=2) - ring
    nxt = np.roll(edges, -1, axis=2)
    cross = edges[..., 0] * nxt[..., 1] - edges[..., 1] * nxt[..., 0]
    positive = np.sum(cross > CONVEX_TOL, axis=-1)
    status = np.full(positive.shape, 2, dtype=np.int8)
    status[positive == 3] = 1
    status[positive == 4] = 0
    status[~np.all(np.isfinite(ring), axis=(-1, -2))] = 2
    return status


def is_valid(mesh: Mesh) -> bool:
    """True when every cell is strictly convex and positively oriented."""
    return bool(np.all(cell_status(mesh) == 0))


@lru_cache(maxsize=32)
def cell_assignment(rows: int, cols: int, canvas_h: int, canvas_w: int) -> np.ndarray:
    """Flat cell index ``row * V + col`` of every canvas pixel (read-only)."""
    ys = np.arange(canvas_h, dtype=np.float64)
    xs = np.arange(canvas_w, dtype=np.float64)
    r = np.minimum(np.floor(ys / (canvas_h / rows)).astype(np.intp), rows - 1)
    c = np.minimum(np.floor(xs / (canvas_w / cols)).astype(np.intp), cols - 1)
    idx = r[:, None] * cols + c[None, :]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=32)
def cell_pixels(rows: int, cols: int, canvas_h: int, canvas_w: int) -> tuple:
    """For each flat cell index, the flat canvas pixel indices it owns."""
    idx = cell_assignment(rows, cols, canvas_h, canvas_w).ravel()
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(rows * cols + 1))
    return tuple(order[bounds[i] : bounds[i + 1]] for i in range(rows * cols))


def map_points(hs: np.ndarray, cell_idx: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Project canvas points through the homography of their assigned cell."""
    m = hs.reshape(-1, 9)[cell_idx]
    den = m[..., 6] * x + m[..., 7] * y + m[..., 8]
    den = np.where(np.abs(den) < hg.DENOM_EPS, np.nan, den)
    u = (m[..., 0] * x + m[..., 1] * y + m[..., 2]) / den
    v = (m[..., 3] * x + m[..., 4] * y + m[..., 5]) / den
    return u, v


_GRIDS: dict = {}


def _pixel_coords(canvas_h: int, canvas_w: int):
    key = (canvas_h, canvas_w)
    if key not in _GRIDS:
        ys, xs = np.mgrid[0:canvas_h, 0:canvas_w].astype(np.float64)
        xs.setflags(write=False)
        ys.setflags(write=False)
        _GRIDS[key] = (xs, ys)
    return _GRIDS[key]


def sample_coords(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Target-image (x, y) sampled by every canvas pixel, each (canvas_h, canvas_w)."""
    if np.any(cell_status(mesh) == 2):
        raise InvalidMeshError("mesh has self-intersecting, flipped or degenerate cells")
    xs, ys = _pixel_coords(mesh.canvas_h, mesh.canvas_w)
    idx = cell_assignment(mesh.rows, mesh.cols, mesh.canvas_h, mesh.canvas_w)
    return map_points(cell_homographies(mesh), idx, xs, ys)


def warp_mesh_array(data: np.ndarray, mesh: Mesh) -> np.ndarray:
    u, v = sample_coords(mesh)
    return sample_array(data, u, v)


def warp_mesh(img: Image, mesh: Mesh) -> Image:
    """Backward mesh warp of ``img`` onto the mesh's canvas."""
    return Image(warp_mesh_array(img.data, mesh))


def warp_mask(mesh: Mesh, target_h: int, target_w: int) -> Image:
    """Warp of an all-one target-sized image: per-pixel validity weight."""
    return Image(warp_mesh_array(np.ones((1, target_h, target_w)), mesh))


def format_mesh(mesh: Mesh) -> str:
    lines = [f"{mesh.rows} {mesh.cols} {mesh.canvas_h} {mesh.canvas_w}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices.reshape(-1, 2)]
    return "\n".join(lines) + "\n"


def parse_mesh(text: str) -> Mesh:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    rows, cols, canvas_h, canvas_w = (int(t) for t in lines[0].split())
    pts = np.array([[float(t) for t in ln.split()] for ln in lines[1:]])
    if pts.shape != ((rows + 1) * (cols + 1), 2):
        raise ValueError(f"expected {(rows + 1) * (cols + 1)} vertex lines, got {len(pts)}")
    return Mesh(pts.reshape(rows + 1, cols + 1, 2), canvas_h, canvas_w)


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(format_mesh(mesh))


def load_mesh(path) -> Mesh:
    return parse_mesh(Path(path).read_text())
