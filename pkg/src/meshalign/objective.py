"""Unsupervised alignment objective on meshes and homographies.

content:  mean |W(E) * I_r - W(I_t)| per pyramid layer, weighted by omega
shape:    edge-direction consistency between adjacent cells at the same depth level
total:    lam * content + mu * shape
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image as PILImage

from . import homography as hg
from . import mesh as ms
from .imaging import Image, _sample_padded, sample_array

FD_STEP = 1e-3
EDGE_EPS = 1e-12

# corner k of a cell -> (row offset, col offset) of its vertex; order TL, TR, BL, BR
CORNER_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class LossParams:
    lam: float = 1.0
    mu: float = 10.0
    omega: tuple = (1.0, 4.0, 16.0)
    levels: int = 32


@dataclass(frozen=True)
class DepthMap:
    data: np.ndarray  # (H, W), positive relative depth

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 2 or d.size == 0:
            raise ValueError(f"depth map must be a non-empty 2-D array, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("depth map has non-finite values")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def constant(self) -> bool:
        return bool(np.ptp(self.data) == 0.0)

    @classmethod
    def flat(cls, height: int, width: int, value: float = 1.0) -> "DepthMap":
        return cls(np.full((height, width), float(value)))


def load_depth(path) -> DepthMap:
    """Read an 8- or 16-bit grayscale PGM/PNG as depth in (0, 1]."""
    with PILImage.open(path) as pil:
        pil.load()
        if pil.mode in ("I;16", "I;16B", "I;16L", "I"):
            raw = np.asarray(pil, dtype=np.float64)
            maxval = 65535.0
        else:
            raw = np.asarray(pil.convert("L"), dtype=np.float64)
            maxval = 255.0
    if raw.ndim != 2 or raw.size == 0:
        raise ValueError(f"depth file must be single-channel: {path}")
    return DepthMap((raw + 1.0) / (maxval + 1.0))


def save_depth(depth: DepthMap, path) -> None:
    d = depth.data
    span = np.ptp(d)
    scaled = np.zeros_like(d) if span == 0 else (d - d.min()) / span
    arr = np.round(scaled * 65535).astype(np.uint16)
    PILImage.fromarray(arr).save(Path(path), format="PNG" if str(path).lower().endswith(".png") else "PPM")


@dataclass(frozen=True)
class GridDepthLevels:
    labels: np.ndarray  # (U, V) ints in [0, M)
    num_levels: int
    cell_means: np.ndarray = field(default=None, repr=False)

    @property
    def d_hor(self) -> np.ndarray:
        return self.labels[:, :-1] == self.labels[:, 1:]

    @property
    def d_ver(self) -> np.ndarray:
        return self.labels[:-1, :] == self.labels[1:, :]

    @classmethod
    def single(cls, rows: int, cols: int) -> "GridDepthLevels":
        return cls(np.zeros((rows, cols), dtype=np.intp), 1)


@dataclass(frozen=True)
class LossBreakdown:
    content_per_layer: tuple
    content_total: float
    shape: float
    objective_total: float
    omega: tuple
    lam: float
    mu: float


def _canvas_of(warp, i_r: Image):
    if isinstance(warp, ms.Mesh):
        if (warp.canvas_h, warp.canvas_w) != (i_r.height, i_r.width):
            raise ValueError("mesh canvas must match the reference image size")
        return ms.sample_coords(warp)
    h = np.asarray(warp, dtype=np.float64)
    if h.shape != (3, 3) or not hg.is_invertible(h):
        raise ValueError("warp must be a Mesh or an invertible 3x3 homography")
    uv = hg.project(h, hg.pixel_grid(i_r.height, i_r.width))
    return uv[..., 0], uv[..., 1]


def _with_ones(data: np.ndarray) -> np.ndarray:
    """Zero-padded target stack with an all-one channel appended last."""
    c, h, w = data.shape
    padded = np.zeros((c + 1, h + 2, w + 2))
    padded[:c, 1:-1, 1:-1] = data
    padded[c, 1:-1, 1:-1] = 1.0
    return padded


def _content_from_coords(ref: np.ndarray, padded_target: np.ndarray, u, v) -> float:
    s = _sample_padded(padded_target, u, v)
    return float(np.mean(np.abs(s[-1] * ref - s[:-1])))


def content_loss_layer(i_r: Image, i_t: Image, warp) -> float:
    """Mean absolute difference between the masked reference and the warped target."""
    if i_r.channels != i_t.channels:
        raise ValueError("reference and target need the same channel count")
    u, v = _canvas_of(warp, i_r)
    return _content_from_coords(i_r.data, _with_ones(i_t.data), u, v)


def content_loss_total(losses, omega=(1.0, 4.0, 16.0)) -> float:
    losses = tuple(losses)
    if len(losses) != 3 or len(omega) != 3:
        raise ValueError("expected three layer losses and three weights")
    return float(sum(w * l for w, l in zip(omega, losses)))


def _levels_from_means(means: np.ndarray, num_levels: int) -> np.ndarray:
    lo, hi = means.min(), means.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros(means.shape, dtype=np.intp)
    lab = np.floor((means - lo) / (hi - lo) * num_levels).astype(np.intp)
    return np.clip(lab, 0, num_levels - 1)


def grid_depth_levels(depth: DepthMap | None, mesh: ms.Mesh, num_levels: int) -> GridDepthLevels:
    """Bin per-cell mean warped depth into ``num_levels`` equal-width levels."""
    if num_levels < 1:
        raise ValueError("need at least one depth level")
    if depth is None or depth.constant:
        lv = GridDepthLevels.single(mesh.rows, mesh.cols)
        return GridDepthLevels(lv.labels, num_levels, np.zeros((mesh.rows, mesh.cols)))
    u, v = ms.sample_coords(mesh)
    stack = np.stack([depth.data, np.ones_like(depth.data)])
    warped, mask = sample_array(stack, u, v)
    valid = mask > 0.5
    # undo the zero-padding blend so border pixels report true depth
    value = np.where(valid, warped / np.where(valid, mask, 1.0), 0.0)
    idx = ms.cell_assignment(mesh.rows, mesh.cols, mesh.canvas_h, mesh.canvas_w).ravel()
    n_cells = mesh.rows * mesh.cols
    counts = np.bincount(idx, weights=valid.ravel(), minlength=n_cells)
    sums = np.bincount(idx, weights=value.ravel(), minlength=n_cells)
    global_mean = value[valid].mean() if valid.any() else depth.data.mean()
    means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean).reshape(mesh.rows, mesh.cols)
    return GridDepthLevels(_levels_from_means(means, num_levels), num_levels, means)


def _abs_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < EDGE_EPS) or np.any(nb < EDGE_EPS):
        raise ValueError("zero-length mesh edge")
    return np.abs(np.sum(a * b, axis=-1)) / (na * nb)


def edge_similarity(quad_a, quad_b, orientation: str) -> float:
    """2 - |cos(e1, e2)| - |cos(e3, e4)| for two adjacent cells (corners TL, TR, BL, BR).

    Horizontal neighbours (A left of B) compare the top edges and the bottom
    edges; vertical neighbours (A above B) compare the left and right edges.
    """
    a = np.asarray(quad_a, dtype=np.float64).reshape(4, 2)
    b = np.asarray(quad_b, dtype=np.float64).reshape(4, 2)
    if orientation == "horizontal":
        e1, e2 = a[1] - a[0], b[1] - b[0]
        e3, e4 = a[3] - a[2], b[3] - b[2]
    elif orientation == "vertical":
        e1, e2 = a[2] - a[0], b[2] - b[0]
        e3, e4 = a[3] - a[1], b[3] - b[1]
    else:
        raise ValueError(f"orientation must be 'horizontal' or 'vertical', got {orientation!r}")
    return float(2.0 - _abs_cos(e1, e2) - _abs_cos(e3, e4))


def similarity_matrices(v: np.ndarray):
    """(L_hor, L_ver) of shapes (..., U, V-1) and (..., U-1, V) for vertex arrays (..., U+1, V+1, 2)."""
    ex = v[..., :, 1:, :] - v[..., :, :-1, :]  # horizontal edges (..., U+1, V, 2)
    ey = v[..., 1:, :, :] - v[..., :-1, :, :]  # vertical edges (..., U, V+1, 2)
    hor = 2.0 - _abs_cos(ex[..., :-1, :-1, :], ex[..., :-1, 1:, :]) - _abs_cos(ex[..., 1:, :-1, :], ex[..., 1:, 1:, :])
    ver = 2.0 - _abs_cos(ey[..., :-1, :-1, :], ey[..., 1:, :-1, :]) - _abs_cos(ey[..., :-1, 1:, :], ey[..., 1:, 1:, :])
    return hor, ver


def _shape_from_vertices(v: np.ndarray, d_hor: np.ndarray, d_ver: np.ndarray) -> np.ndarray:
    rows, cols = v.shape[-3] - 1, v.shape[-2] - 1
    hor, ver = similarity_matrices(v)
    total = np.zeros(v.shape[:-3])
    if cols > 1:
        total = total + np.sum(hor * d_hor, axis=(-1, -2)) / (rows * (cols - 1))
    if rows > 1:
        total = total + np.sum(ver * d_ver, axis=(-1, -2)) / ((rows - 1) * cols)
    return total


def shape_loss(mesh: ms.Mesh, levels: GridDepthLevels) -> float:
    if levels.labels.shape != (mesh.rows, mesh.cols):
        raise ValueError(f"levels {levels.labels.shape} do not match a {mesh.rows}x{mesh.cols} mesh")
    return float(_shape_from_vertices(mesh.vertices, levels.d_hor, levels.d_ver))


def objective(i_r: Image, i_t: Image, warps, depth: DepthMap | None, params: LossParams = LossParams(),
              levels: GridDepthLevels | None = None) -> LossBreakdown:
    """Full loss for one warp per pyramid layer; the shape term uses the last one."""
    warps = list(warps)
    if len(warps) != 3:
        raise ValueError("need one warp per pyramid layer (3)")
    per_layer = tuple(content_loss_layer(i_r, i_t, w) for w in warps)
    content = content_loss_total(per_layer, params.omega)
    shape = 0.0
    last = warps[-1]
    if isinstance(last, ms.Mesh):
        if levels is None:
            levels = grid_depth_levels(depth, last, params.levels)
        shape = shape_loss(last, levels)
    total = params.lam * content + params.mu * shape
    return LossBreakdown(per_layer, content, shape, total, tuple(params.omega), params.lam, params.mu)


@numba.njit(cache=True)
def _abs_sums_kernel(m, x, y, valid, ref, target):
    # m: (cells, B, 9) unit-square homographies; x, y, valid: (cells, P); ref: (C, cells, P)
    # target: (C+1, H+2, W+2) zero-padded stack, last channel all ones
    n_cells, n_var = m.shape[0], m.shape[1]
    n_px = x.shape[1]
    nc = ref.shape[0]
    hp, wp = target.shape[1] - 2, target.shape[2] - 2
    out = np.zeros((n_cells, n_var))
    for c in range(n_cells):
        for b in range(n_var):
            h = m[c, b]
            acc = 0.0
            for i in range(n_px):
                if valid[c, i] == 0.0:
                    continue
                px = x[c, i]
                py = y[c, i]
                den = h[6] * px + h[7] * py + h[8]
                if abs(den) < 1e-12:
                    continue
                u = (h[0] * px + h[1] * py + h[2]) / den + 1.0
                v = (h[3] * px + h[4] * py + h[5]) / den + 1.0
                if not (u > 0.0 and u < wp + 1.0 and v > 0.0 and v < hp + 1.0):
                    continue
                x0 = min(int(np.floor(u)), wp)
                y0 = min(int(np.floor(v)), hp)
                fx = u - x0
                fy = v - y0
                w00 = (1.0 - fx) * (1.0 - fy)
                w01 = fx * (1.0 - fy)
                w10 = (1.0 - fx) * fy
                w11 = fx * fy
                mask = (w00 * target[nc, y0, x0] + w01 * target[nc, y0, x0 + 1]
                        + w10 * target[nc, y0 + 1, x0] + w11 * target[nc, y0 + 1, x0 + 1])
                for ch in range(nc):
                    s = (w00 * target[ch, y0, x0] + w01 * target[ch, y0, x0 + 1]
                         + w10 * target[ch, y0 + 1, x0] + w11 * target[ch, y0 + 1, x0 + 1])
                    acc += abs(mask * ref[ch, c, i] - s)
            out[c, b] = acc
    return out


def content_losses(i_r: Image, i_t: Image, hs) -> np.ndarray:
    """content_loss_layer for a batch of (B, 3, 3) canvas-to-target homographies."""
    if i_r.channels != i_t.channels:
        raise ValueError("reference and target need the same channel count")
    hs = np.asarray(hs, dtype=np.float64).reshape(1, -1, 9)
    h, w = i_r.height, i_r.width
    ys, xs = np.divmod(np.arange(h * w, dtype=np.float64), w)
    ones = np.ones((1, h * w))
    ref = i_r.data.reshape(i_r.channels, 1, -1)
    sums = _abs_sums_kernel(hs, xs[None], ys[None], ones, ref, _with_ones(i_t.data))
    return sums[0] / i_r.data.size


class MeshObjective:
    """Layer-3 objective ``lam * omega3 * content + mu * shape`` as a function of mesh vertices.

    Depth levels are held fixed; call :meth:`set_levels` to refresh them.
    Holds the padded images and per-cell pixel tables so repeated evaluations
    and finite differences stay cheap.
    """

    def __init__(self, i_r: Image, i_t: Image, template: ms.Mesh, params: LossParams = LossParams(),
                 levels: GridDepthLevels | None = None):
        if i_r.channels != i_t.channels:
            raise ValueError("reference and target need the same channel count")
        if (template.canvas_h, template.canvas_w) != (i_r.height, i_r.width):
            raise ValueError("mesh canvas must match the reference image size")
        self.ref = i_r.data
        self.target = _with_ones(i_t.data)
        self.params = params
        self.rows, self.cols = template.rows, template.cols
        self.canvas_h, self.canvas_w = template.canvas_h, template.canvas_w
        self.cell_h, self.cell_w = template.cell_h, template.cell_w
        self.weight = params.lam * params.omega[2]
        self.n_values = self.ref.size
        self.levels = levels or GridDepthLevels.single(self.rows, self.cols)
        self._build_cell_tables()

    def set_levels(self, levels: GridDepthLevels):
        self.levels = levels

    def _build_cell_tables(self):
        groups = ms.cell_pixels(self.rows, self.cols, self.canvas_h, self.canvas_w)
        width = max(len(g) for g in groups)
        n = len(groups)
        flat = np.zeros((n, width), dtype=np.intp)
        valid = np.zeros((n, width))
        for i, g in enumerate(groups):
            flat[i, : len(g)] = g
            valid[i, : len(g)] = 1.0
        self.px = (flat % self.canvas_w).astype(np.float64)
        self.py = (flat // self.canvas_w).astype(np.float64)
        self.pvalid = valid
        c = self.ref.shape[0]
        self.pref = self.ref.reshape(c, -1)[:, flat]  # (C, cells, P)
        cell_r, cell_c = np.divmod(np.arange(n), self.cols)
        self.cell_r = cell_r
        self.cell_c = cell_c

    def mesh(self, vertices) -> ms.Mesh:
        return ms.Mesh(vertices, self.canvas_h, self.canvas_w)

    def content(self, vertices) -> float:
        v = np.asarray(vertices, dtype=np.float64)
        if np.any(ms.cell_status(self.mesh(v)) == 2):
            raise ms.InvalidMeshError("mesh has self-intersecting, flipped or degenerate cells")
        quads = [q.reshape(-1, 1, 2) for q in (v[:-1, :-1], v[:-1, 1:], v[1:, :-1], v[1:, 1:])]
        return float(self._cell_abs_sums(*quads).sum() / self.n_values)

    def shape(self, vertices) -> float:
        return float(_shape_from_vertices(np.asarray(vertices), self.levels.d_hor, self.levels.d_ver))

    def value(self, vertices) -> float:
        return self.weight * self.content(vertices) + self.params.mu * self.shape(vertices)

    def _cell_abs_sums(self, tl, tr, bl, br) -> np.ndarray:
        """Per-cell sum of |mask * ref - warped| for batches of cell quads shaped (cells, B, 2)."""
        quad = ms.square_to_quad(tl, tr, bl, br)  # (cells, B, 3, 3)
        x = self.px / self.cell_w - self.cell_c[:, None]
        y = self.py / self.cell_h - self.cell_r[:, None]
        return _abs_sums_kernel(quad.reshape(quad.shape[:2] + (9,)), x, y, self.pvalid, self.pref, self.target)

    def fd_gradient(self, vertices, step: float = FD_STEP) -> np.ndarray:
        """Central differences of :meth:`value` per vertex coordinate.

        A vertex only moves the cells incident to it, so every perturbed
        objective is formed from the changed cells' sums; the result equals
        re-evaluating the whole objective 2 * 2 * (U+1)(V+1) times.
        """
        if not step > 1e-12:
            raise ValueError(f"finite-difference step {step} underflows")
        v = np.asarray(vertices, dtype=np.float64)
        if np.any(ms.cell_status(self.mesh(v)) == 2):
            raise ms.InvalidMeshError("cannot differentiate an invalid mesh")
        corners = np.stack([v[:-1, :-1], v[:-1, 1:], v[1:, :-1], v[1:, 1:]], axis=2).reshape(-1, 4, 2)
        # variants: corner k, coordinate d, sign s -> 16 perturbed quads per cell
        batch = np.repeat(corners[:, None], 16, axis=1)  # (cells, 16, 4, 2)
        for k in range(4):
            for d in range(2):
                for si, sgn in enumerate((1.0, -1.0)):
                    batch[:, k * 4 + d * 2 + si, k, d] += sgn * step
        sums = self._cell_abs_sums(batch[:, :, 0], batch[:, :, 1], batch[:, :, 2], batch[:, :, 3])
        diff = (sums[:, 0::2] - sums[:, 1::2]).reshape(-1, 4, 2)  # (cells, corner, coord)
        grad = np.zeros_like(v)
        for k, (dr, dc) in enumerate(CORNER_OFFSETS):
            np.add.at(grad, (self.cell_r + dr, self.cell_c + dc), diff[:, k])
        grad *= self.weight / (2.0 * step * self.n_values)
        if self.params.mu != 0.0:
            grad += self.params.mu * self._shape_fd(v, step)
        return grad

    def _shape_fd(self, v: np.ndarray, step: float) -> np.ndarray:
        n = v.size
        eye = np.eye(n).reshape((n,) + v.shape) * step
        plus = _shape_from_vertices(v[None] + eye, self.levels.d_hor, self.levels.d_ver)
        minus = _shape_from_vertices(v[None] - eye, self.levels.d_hor, self.levels.d_ver)
        return ((plus - minus) / (2.0 * step)).reshape(v.shape)


def gradient(i_r: Image, i_t: Image, mesh: ms.Mesh, depth: DepthMap | None, params: LossParams = LossParams(),
             mode: str = "fd", step: float = FD_STEP, levels: GridDepthLevels | None = None) -> np.ndarray:
    """Per-vertex (dx, dy) gradient of the layer-3 objective, shape (U+1, V+1, 2)."""
    if mode != "fd":
        raise NotImplementedError(f"gradient mode {mode!r} is not available; use 'fd'")
    if levels is None:
        levels = grid_depth_levels(depth, mesh, params.levels)
    return MeshObjective(i_r, i_t, mesh, params, levels).fd_gradient(mesh.vertices, step)
