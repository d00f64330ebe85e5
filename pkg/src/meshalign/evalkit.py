"""Metrics and synthetic data: overlap PSNR/SSIM, 4-pt RMSE, tiers, pair generators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import homography as hg
from . import mesh as ms
from .imaging import Image, sample_array, to_grayscale
from .objective import DepthMap, _canvas_of

PSNR_CAP = 99.0
MASK_THRESHOLD = 0.99
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class SynthPair:
    reference: Image
    target: Image
    gt_motion: np.ndarray  # (4, 2), TL TR BL BR
    rho: float
    seed: int
    patch_origin: tuple = (0, 0)
    homography: np.ndarray = None  # source-image map from perturbed to original corners

    @property
    def rect(self):
        return (0, 0, self.reference.width, self.reference.height)


@dataclass(frozen=True)
class TierReport:
    scores: tuple
    easy: float
    moderate: float
    hard: float
    average: float
    sizes: tuple


@dataclass(frozen=True)
class ParallaxPair:
    reference: Image
    target: Image
    depth: DepthMap  # on the target image
    near: np.ndarray  # canvas -> target map of the near region
    far: np.ndarray
    boundary: float  # canvas column where the near region ends


def textured_image(height: int, width: int, seed: int, channels: int = 3) -> Image:
    """Multi-octave smoothed noise in [0, 1]; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    acc = np.zeros((channels, height, width))
    for sigma, weight in ((1.0, 0.25), (2.5, 0.5), (6.0, 1.0), (14.0, 1.0)):
        layer = ndimage.gaussian_filter(rng.standard_normal((channels, height, width)), (0, sigma, sigma), mode="reflect")
        acc += weight * layer / (layer.std() + 1e-12)
    acc -= acc.min(axis=(1, 2), keepdims=True)
    acc /= acc.max(axis=(1, 2), keepdims=True)
    return Image(0.05 + 0.9 * acc)


def synth_pair(src: Image, rho: float, patch: int, seed: int) -> SynthPair:
    """Corner-perturbation pair: crop, perturb the crop corners, warp, crop again."""
    h, w = src.height, src.width
    margin = int(math.ceil(rho))
    if patch < 2 or h < patch + 2 * margin or w < patch + 2 * margin:
        raise ValueError(f"{h}x{w} source too small for patch {patch} with rho {rho}")
    rng = np.random.default_rng(seed)
    x0 = int(rng.integers(margin, w - patch - margin + 1))
    y0 = int(rng.integers(margin, h - patch - margin + 1))
    motion = rng.uniform(-rho, rho, size=(4, 2)) if rho > 0 else np.zeros((4, 2))
    corners = hg.rect_corners((x0, y0, x0 + patch, y0 + patch))
    h_gen = hg.dlt_solve(corners + motion, corners)
    target = hg.warp_global(src, h_gen @ hg.translation(x0, y0), patch, patch)
    reference = Image(src.data[:, y0 : y0 + patch, x0 : x0 + patch])
    return SynthPair(reference, target, motion, float(rho), int(seed), (x0, y0), h_gen)


def corner_motion(warp, rect) -> np.ndarray:
    """4-pt motion (TL, TR, BL, BR) of a homography, or of a mesh's outer vertices."""
    if isinstance(warp, ms.Mesh):
        v = warp.vertices
        return np.array([v[0, 0], v[0, -1], v[-1, 0], v[-1, -1]]) - hg.rect_corners(rect)
    return hg.to_4pt(warp, rect)


def rmse_4pt(pred, gt) -> float:
    d = np.asarray(pred, dtype=np.float64).reshape(4, 2) - np.asarray(gt, dtype=np.float64).reshape(4, 2)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _overlap(i_r: Image, i_t: Image, warp):
    u, v = _canvas_of(warp, i_r)
    mask = sample_array(np.ones((1, i_t.height, i_t.width)), u, v)[0]
    warped = sample_array(i_t.data, u, v)
    return mask * i_r.data, warped, mask > MASK_THRESHOLD


def psnr_overlap(i_r: Image, i_t: Image, warp) -> float:
    a, b, valid = _overlap(i_r, i_t, warp)
    if not valid.any():
        raise ValueError("warp leaves no overlap")
    mse = float(np.mean((a[:, valid] - b[:, valid]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gaussian-window SSIM map for 2-D arrays with dynamic range 1."""
    filt = lambda z: ndimage.gaussian_filter(z, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="constant")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim_overlap(i_r: Image, i_t: Image, warp) -> float:
    """Mean SSIM over windows lying entirely inside the overlap."""
    a, b, valid = _overlap(i_r, i_t, warp)
    if not valid.any():
        raise ValueError("warp leaves no overlap")
    ga = to_grayscale(Image(a)).data[0]
    gb = to_grayscale(Image(b)).data[0]
    side = 2 * SSIM_RADIUS + 1
    inside = ndimage.binary_erosion(valid, structure=np.ones((side, side)), border_value=0)
    if not inside.any():
        raise ValueError("overlap is smaller than the SSIM window")
    return float(ssim_map(ga, gb)[inside].mean())


def tier_partition(scores, higher_is_better: bool = True) -> TierReport:
    s = np.asarray(list(scores), dtype=np.float64)
    n = len(s)
    if n == 0:
        raise ValueError("no scores to partition")
    order = np.sort(s)[::-1] if higher_is_better else np.sort(s)
    b1, b2 = int(math.floor(0.3 * n)), int(math.floor(0.6 * n))
    tiers = (order[:b1], order[b1:b2], order[b2:])
    means = [float(t.mean()) if len(t) else float("nan") for t in tiers]
    return TierReport(tuple(s.tolist()), *means, float(s.mean()), tuple(len(t) for t in tiers))


def random_homography(rng: np.random.Generator, size: int, rho: float) -> np.ndarray:
    """Mild projective map: corners of a size x size rect jittered by up to rho."""
    return hg.from_4pt(rng.uniform(-rho, rho, size=(4, 2)), (0, 0, size, size))


def parallax_pair(size: int = 128, seed: int = 0, near_shift: float = 6.0, far_shift: float = 1.0,
                  channels: int = 3) -> ParallaxPair:
    """Two-plane pair: canvas columns left of a boundary follow the near plane, the rest the far plane.

    The target is an untouched textured image; the reference samples it
    through one map per region, so no single homography explains both halves.
    """
    rng = np.random.default_rng(seed)
    src = textured_image(size, size, seed + 10_007, channels)
    boundary = float(rng.uniform(0.35, 0.65) * size)
    sign = rng.choice([-1.0, 1.0], size=2)
    near = hg.compose(hg.translation(sign[0] * near_shift, sign[1] * near_shift * 0.5),
                      random_homography(rng, size, 1.0))
    # opposite vertical motions make the seam bend mesh edges, not just stretch them
    far = hg.compose(hg.translation(-sign[0] * far_shift, -sign[1] * far_shift), random_homography(rng, size, 1.0))
    grid = hg.pixel_grid(size, size)
    uv = np.where((grid[..., 0] < boundary)[..., None], hg.project(near, grid), hg.project(far, grid))
    ref = sample_array(src.data, uv[..., 0], uv[..., 1])
    # target-side depth: pixels reached by the near region are near (small depth)
    near_edge = hg.project(near, np.array([[boundary, size / 2.0]]))[0, 0]
    depth = np.where(grid[..., 0] < near_edge, 0.25, 1.0)
    return ParallaxPair(Image(ref), src, DepthMap(depth), near, far, boundary)
