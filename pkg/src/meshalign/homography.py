"""Projective maps: DLT, 4-pt motions, flow fitting and backward global warping.

Every homography here maps warped-canvas (reference) coordinates to
target-image coordinates, so warping never needs an inverse. Homographies are
plain 3x3 float arrays scaled so that ``h[2, 2] == 1`` when that is possible.
Four-point motions are (4, 2) arrays of (du, dv) in corner order TL, TR, BL, BR.
"""
from __future__ import annotations

from itertools import combinations
from pathlib import Path

import numpy as np

from .imaging import Image, sample_array

DENOM_EPS = 1e-12
DET_EPS = 1e-12


class DegenerateConfigurationError(ValueError):
    pass


def normalize(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) > 1e-15:
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def identity() -> np.ndarray:
    return np.eye(3)


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def inverse(h: np.ndarray) -> np.ndarray:
    return normalize(np.linalg.inv(h))


def compose(*hs: np.ndarray) -> np.ndarray:
    """Matrix product ``hs[0] @ hs[1] @ ...``: the last map is applied first."""
    out = np.eye(3)
    for h in hs:
        out = out @ h
    return normalize(out)


def is_invertible(h: np.ndarray) -> bool:
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)) or not np.any(h):
        return False
    return abs(np.linalg.det(normalize(h))) > DET_EPS


def project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorized projection without the denominator check; NaN where undefined."""
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    den = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    bad = np.abs(den) < DENOM_EPS
    den = np.where(bad, np.nan, den)
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / den
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / den
    return np.stack([u, v], axis=-1)


def apply(h: np.ndarray, pts) -> np.ndarray:
    """Map point(s) with shape (..., 2) through ``h``."""
    out = project(h, pts)
    if np.any(np.isnan(out)) and not np.any(np.isnan(np.asarray(pts, dtype=float))):
        raise ValueError("point maps to the line at infinity")
    return out


def _hartley(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    if mean_dist < 1e-15:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _has_collinear_triple(pts: np.ndarray) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300)
    for a, b, c in combinations(range(len(pts)), 3):
        d1 = pts[b] - pts[a]
        d2 = pts[c] - pts[a]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= 1e-10 * scale * scale:
            return True
    return False


def dlt_solve(src, dst) -> np.ndarray:
    """Normalized DLT from >= 4 correspondences, ``dst ~ h @ src``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise ValueError(f"need >= 4 matching correspondences, got {len(src)} and {len(dst)}")
    if n == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise DegenerateConfigurationError("three of the four points are collinear")
    t_src = _hartley(src)
    t_dst = _hartley(dst)
    ps = src @ t_src[:2, :2].T + t_src[:2, 2]
    pd = dst @ t_dst[:2, :2].T + t_dst[:2, 2]
    x, y = ps[:, 0], ps[:, 1]
    u, v = pd[:, 0], pd[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    a[1::2] = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    # 4 points give an 8 x 9 system whose null vector needs the full V
    _, sv, vt = np.linalg.svd(a, full_matrices=2 * n < 9)
    if len(sv) >= 8 and sv[7] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("DLT system is rank deficient")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    h = normalize(h)
    if not is_invertible(h):
        raise DegenerateConfigurationError("solution is singular")
    return h


def rect_corners(rect) -> np.ndarray:
    """Corners TL, TR, BL, BR of ``rect = (left, top, right, bottom)``."""
    left, top, right, bottom = rect
    if not (right > left and bottom > top):
        raise ValueError(f"degenerate rectangle {rect}")
    return np.array([[left, top], [right, top], [left, bottom], [right, bottom]], dtype=np.float64)


def from_4pt(motion, rect) -> np.ndarray:
    corners = rect_corners(rect)
    return dlt_solve(corners, corners + np.asarray(motion, dtype=np.float64).reshape(4, 2))


def to_4pt(h: np.ndarray, rect) -> np.ndarray:
    corners = rect_corners(rect)
    return apply(h, corners) - corners


def fit_flow(flow, valid_mask=None, robust: bool = False, rounds: int = 3) -> np.ndarray:
    """Fit a homography to cell-centre correspondences ``(col, row) -> + flow``.

    ``flow`` is a FlowField or an (H, W, 2) array in cell units. With ``robust``,
    each round drops correspondences whose transfer residual exceeds twice the
    median and refits.
    """
    data = np.asarray(getattr(flow, "data", flow), dtype=np.float64)
    h, w = data.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    src = np.stack([cols, rows], axis=-1).astype(np.float64)
    dst = src + data
    mask = np.ones((h, w), bool) if valid_mask is None else np.asarray(valid_mask, bool)
    mask = mask & np.all(np.isfinite(dst), axis=-1)
    src, dst = src[mask], dst[mask]
    if len(src) < 8:
        raise ValueError(f"need at least 8 valid cells, got {len(src)}")
    hom = dlt_solve(src, dst)
    if robust:
        for _ in range(rounds):
            resid = np.linalg.norm(project(hom, src) - dst, axis=1)
            med = np.median(resid)
            keep = resid <= 2.0 * med
            if med == 0.0 or keep.all() or keep.sum() < 8:
                break
            src, dst = src[keep], dst[keep]
            hom = dlt_solve(src, dst)
    return hom


def pixel_grid(out_h: int, out_w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def warp_array(data: np.ndarray, h: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    coords = project(h, pixel_grid(out_h, out_w))
    return sample_array(data, coords[..., 0], coords[..., 1])


def warp_global(img: Image, h: np.ndarray, out_h: int | None = None, out_w: int | None = None) -> Image:
    """Backward warp: output pixel p takes ``img`` sampled at ``h(p)``."""
    out_h = img.height if out_h is None else out_h
    out_w = img.width if out_w is None else out_w
    return Image(warp_array(img.data, h, out_h, out_w))


def scale_adapt(h: np.ndarray, s: float) -> np.ndarray:
    """Conjugate ``h`` to a resolution ``s`` times larger: S h S^-1, S = diag(s, s, 1)."""
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    S = np.diag([s, s, 1.0])
    S_inv = np.diag([1.0 / s, 1.0 / s, 1.0])
    return normalize(S @ h @ S_inv)


def format_homography(h: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in normalize(h).ravel())


def parse_homography(text: str) -> np.ndarray:
    vals = [float(t) for t in text.split()]
    if len(vals) != 9:
        raise ValueError(f"homography needs 9 numbers, got {len(vals)}")
    return normalize(np.array(vals).reshape(3, 3))


def save_homography(h: np.ndarray, path) -> None:
    Path(path).write_text(format_homography(h) + "\n")


def load_homography(path) -> np.ndarray:
    return parse_homography(Path(path).read_text())
