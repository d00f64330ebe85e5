"""Three-layer coarse-to-fine alignment driven by classical estimators.

Layers 1 and 2 estimate a global homography from CCL feature flow (the second
layer works on the target pre-warped by the first result) followed by a
photometric polish. Layer 3 starts a mesh from that homography and descends on
the full objective, vertex by vertex.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import homography as hg
from . import mesh as ms
from .correlation import FlowField, ccl
from .features import build_layer_features, extract_features
from .imaging import Image, resize_bilinear
from .objective import (
    DepthMap,
    GridDepthLevels,
    LossBreakdown,
    LossParams,
    MeshObjective,
    content_loss_layer,
    content_losses,
    grid_depth_levels,
    objective,
)

log = logging.getLogger(__name__)

MAX_HALVINGS = 10
GRAD_TOL = 1e-5
MIN_OVERLAP = 0.01
NUM_SCALES = 3
# pyramid layer (1 = finest, all scales stacked) feeding each CCL stage
STAGE_LAYERS = (2, 1)


class NoOverlapError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignConfig:
    rows: int = 8  # U
    cols: int = 8  # V
    k: int = 3
    alpha: float = 10.0
    levels: int = 32
    lam: float = 1.0
    mu: float = 10.0
    omega: tuple = (1.0, 4.0, 16.0)
    refine_iters: int = 100
    step_size: float = 1.0
    working_resolution: int = 128
    robust_fit: bool = True
    freeze_levels: bool = False

    def __post_init__(self):
        positive = ("rows", "cols", "k", "alpha", "levels", "refine_iters", "step_size", "working_resolution")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0 or self.mu < 0 or len(self.omega) != 3 or min(self.omega) < 0:
            raise ValueError("loss weights must be non-negative and omega must have three entries")
        if self.k % 2 == 0:
            raise ValueError(f"patch side k must be odd, got {self.k}")

    @property
    def loss_params(self) -> LossParams:
        return LossParams(self.lam, self.mu, tuple(self.omega), self.levels)


@dataclass
class AlignmentResult:
    global_h: np.ndarray
    mesh: ms.Mesh
    layer_h: tuple  # (layer-1 homography, layer-1+2 homography) at input resolution
    history: list = field(default_factory=list)  # (stage name, LossBreakdown)
    iterations: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    flows: tuple = ()
    mesh_valid: bool = True
    working_mesh: ms.Mesh | None = None
    working_h: np.ndarray | None = None


def _cell_to_pixel(scale: int) -> np.ndarray:
    # feature cell j covers pixels [scale*j, scale*(j+1)); its centre is scale*j + (scale-1)/2
    off = (scale - 1) / 2.0
    return np.array([[scale, 0.0, off], [0.0, scale, off], [0.0, 0.0, 1.0]])


def _layer_flow(i_r: Image, i_t: Image, layer: int, cfg: AlignConfig) -> FlowField:
    fr = build_layer_features(extract_features(i_r, NUM_SCALES), layer)
    ft = build_layer_features(extract_features(i_t, NUM_SCALES), layer)
    return ccl(fr, ft, cfg.k, cfg.alpha)


def flow_homography(flow: FlowField, scale: int, robust: bool) -> np.ndarray:
    """Pixel-domain homography from a feature flow at ``scale`` pixels per cell."""
    valid = np.zeros((flow.height, flow.width), bool)
    valid[1:-1, 1:-1] = True  # border cells see zero-padded patches
    if valid.sum() < 8:
        valid[:] = True
    h_cell = hg.fit_flow(flow, valid, robust=robust)
    t = _cell_to_pixel(scale)
    return hg.normalize(t @ h_cell @ np.linalg.inv(t))


def _descend(f, x0: np.ndarray, grad, step0: float, iters: int, accept=None):
    """Steepest descent with halving backtracking; step measured as max coordinate move.

    Returns the final point, the accepted objective values and the iteration count.
    """
    x = np.array(x0, dtype=np.float64)
    fx = f(x)
    values = [fx]
    step = step0
    it = 0
    for it in range(1, iters + 1):
        g = grad(x)
        gmax = np.abs(g).max()
        if not np.isfinite(gmax) or np.linalg.norm(g) < GRAD_TOL:
            it -= 1
            break
        direction = -g / gmax
        t = step
        for _ in range(MAX_HALVINGS + 1):
            cand = x + t * direction
            if accept is None or accept(cand):
                fc = f(cand)
                if fc < fx:
                    break
            t *= 0.5
        else:
            it -= 1
            break
        x, fx = cand, fc
        values.append(fx)
        step = min(2.0 * t, step0 * 4.0)
    return x, values, it


def refine_global(i_r: Image, i_t: Image, h0: np.ndarray, cfg: AlignConfig = AlignConfig(),
                  iters: int | None = None, fd_step: float = 1e-3):
    """Photometric polish of a homography over its 8 corner motions.

    Returns ``(h, loss_values)``; ``h`` is ``h0`` itself when no step lowers the loss.
    """
    if not hg.is_invertible(h0):
        raise ValueError("initial homography is singular")
    rect = (0, 0, i_r.width, i_r.height)
    params0 = hg.to_4pt(h0, rect)

    def homs(ps):
        return np.array([hg.from_4pt(q, rect) for q in ps])

    def loss(p):
        try:
            return float(content_losses(i_r, i_t, homs([p]))[0])
        except ValueError:
            return np.inf

    eye = np.eye(8).reshape(8, 4, 2) * fd_step

    def grad(p):
        try:
            vals = content_losses(i_r, i_t, homs(np.concatenate([p + eye, p - eye])))
        except ValueError:
            return np.full_like(p, np.nan)
        return ((vals[:8] - vals[8:]) / (2.0 * fd_step)).reshape(p.shape)

    p, values, _ = _descend(loss, params0, grad, cfg.step_size, cfg.refine_iters if iters is None else iters)
    if len(values) == 1:
        return h0, values
    return hg.from_4pt(p, rect), values


def refine_mesh(i_r: Image, i_t: Image, mesh0: ms.Mesh, depth: DepthMap | None, cfg: AlignConfig = AlignConfig(),
                iters: int | None = None):
    """Descend on the layer-3 objective over mesh vertices.

    Steps leading to a non-convex cell are halved like rejected steps. Depth
    levels are recomputed after every accepted step unless ``cfg.freeze_levels``.
    Returns ``(mesh, values, n_iterations)``; each value is the objective after an
    accepted step under the levels used for that step.
    """
    if not ms.is_valid(mesh0):
        raise ms.InvalidMeshError("initial mesh is not valid")
    params = cfg.loss_params
    levels = grid_depth_levels(depth, mesh0, params.levels)
    obj = MeshObjective(i_r, i_t, mesh0, params, levels)
    iters = cfg.refine_iters if iters is None else iters

    x = mesh0.vertices.copy()
    fx = obj.value(x)
    values = [fx]
    step = cfg.step_size
    n = 0
    for n in range(1, iters + 1):
        g = obj.fd_gradient(x)
        gmax = np.abs(g).max()
        if not np.isfinite(gmax) or np.linalg.norm(g) < GRAD_TOL:
            n -= 1
            break
        direction = -g / gmax
        t = step
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = x + t * direction
            if ms.is_valid(obj.mesh(cand)):
                fc = obj.value(cand)
                if fc < fx:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            n -= 1
            break
        x = cand
        values.append(fc)
        step = min(2.0 * t, 4.0 * cfg.step_size)
        if depth is not None and not cfg.freeze_levels:
            obj.set_levels(grid_depth_levels(depth, obj.mesh(x), params.levels))
        fx = obj.value(x)
    return obj.mesh(x), values, n


def _lift(h: np.ndarray, s_ref: tuple, s_tgt: tuple) -> np.ndarray:
    """Working-resolution homography to input resolution (per-axis scales)."""
    return hg.normalize(np.diag([s_tgt[0], s_tgt[1], 1.0]) @ h @ np.diag([1.0 / s_ref[0], 1.0 / s_ref[1], 1.0]))


def align(i_r: Image, i_t: Image, cfg: AlignConfig = AlignConfig(), depth: DepthMap | None = None) -> AlignmentResult:
    """Estimate the global homography and the U x V mesh mapping reference to target."""
    timings = {}
    t0 = time.perf_counter()
    res = cfg.working_resolution
    if i_r.channels != i_t.channels:
        raise ValueError("reference and target need the same channel count")
    wr = resize_bilinear(i_r, res, res)
    wt = resize_bilinear(i_t, res, res)
    s_ref = (i_r.width / res, i_r.height / res)
    s_tgt = (i_t.width / res, i_t.height / res)
    wdepth = None
    if depth is not None:
        wdepth = DepthMap(resize_bilinear(Image(depth.data), res, res).data[0])
    params = cfg.loss_params
    timings["prepare"] = time.perf_counter() - t0

    # layer 1: coarsest features
    t0 = time.perf_counter()
    flow1 = _layer_flow(wr, wt, STAGE_LAYERS[0], cfg)
    h1 = flow_homography(flow1, 2 ** STAGE_LAYERS[0], cfg.robust_fit)
    if not hg.is_invertible(h1):
        h1 = hg.identity()
    timings["layer1"] = time.perf_counter() - t0

    # layer 2: residual on the pre-warped target
    t0 = time.perf_counter()
    flow2 = _layer_flow(wr, hg.warp_global(wt, h1), STAGE_LAYERS[1], cfg)
    try:
        h2 = hg.compose(h1, flow_homography(flow2, 2 ** STAGE_LAYERS[1], cfg.robust_fit))
    except ValueError:
        h2 = h1
    if content_loss_layer(wr, wt, h2) > content_loss_layer(wr, wt, h1):
        log.info("layer-2 residual raised the content loss; keeping layer 1")
        h2 = h1
    h_global, global_values = refine_global(wr, wt, h2, cfg)
    timings["layer2"] = time.perf_counter() - t0

    overlap = float(ms.warp_mask(ms.mesh_from_homography(h_global, 1, 1, res, res), res, res).data.mean())
    if overlap < MIN_OVERLAP:
        raise NoOverlapError(f"estimated overlap covers {overlap:.2%} of the canvas")

    history = [
        ("layer1", objective(wr, wt, [h1, h1, h1], wdepth, params)),
        ("layer2", objective(wr, wt, [h1, h_global, h_global], wdepth, params)),
    ]

    # layer 3: mesh refinement
    t0 = time.perf_counter()
    mesh0 = ms.mesh_from_homography(h_global, cfg.rows, cfg.cols, res, res)
    if ms.is_valid(mesh0):
        mesh, mesh_values, n_mesh = refine_mesh(wr, wt, mesh0, wdepth, cfg)
    else:
        log.warning("global homography folds the mesh; skipping mesh refinement")
        mesh, mesh_values, n_mesh = mesh0, [], 0
    timings["layer3"] = time.perf_counter() - t0
    history.append(("layer3", objective(wr, wt, [h1, h_global, mesh], wdepth, params)))

    full_mesh = ms.Mesh(
        mesh.vertices * np.array(s_tgt),
        i_r.height,
        i_r.width,
    )
    return AlignmentResult(
        global_h=_lift(h_global, s_ref, s_tgt),
        mesh=full_mesh,
        layer_h=(_lift(h1, s_ref, s_tgt), _lift(h_global, s_ref, s_tgt)),
        history=history,
        iterations={"global": len(global_values) - 1, "mesh": n_mesh},
        timings=timings,
        flows=(flow1, flow2),
        mesh_valid=ms.is_valid(mesh),
        working_mesh=mesh,
        working_h=h_global,
    )


def config_with(cfg: AlignConfig, **overrides) -> AlignConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
