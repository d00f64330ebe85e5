"""Command line: ``meshalign <synth|align|eval|bench> [flags]``.

Every command accepts the same flag set; a ``--config`` file of ``key=value``
lines supplies defaults that explicit flags override. The resolved settings and
where each came from are echoed at the top of every run report.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
import timeit
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalkit as ek
from . import homography as hg
from . import mesh as ms
from . import viz
from .aligner import AlignConfig, NoOverlapError, align
from .correlation import (
    correlation_channels,
    correlation_volume,
    cost_volume,
    cost_volume_channels,
    feature_flow,
    scale_softmax,
)
from .features import FeatureMap, l2_normalize
from .imaging import Image, load_image, save_image
from .objective import load_depth

log = logging.getLogger("meshalign")

THREADS_ENV = "MESHALIGN_THREADS"
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")
BENCH_SIZES = (8, 16, 32, 64)
BENCH_CHANNELS = 9  # layer-1 feature width: 3 scales x 3 channels

# flag name -> (parser, AlignConfig field or None)
_KEYS = {
    "src": (str, None),
    "out": (str, None),
    "n": (int, None),
    "rho": (float, None),
    "patch": (int, None),
    "seed": (int, None),
    "grid": (None, None),  # parsed into rows / cols
    "alpha": (float, "alpha"),
    "k": (int, "k"),
    "levels": (int, "levels"),
    "lambda": (float, "lam"),
    "mu": (float, "mu"),
    "omega": (None, "omega"),
    "iters": (int, "refine_iters"),
    "resolution": (int, "working_resolution"),
    "depth": (str, None),
    "threads": (int, None),
}


class CliError(RuntimeError):
    pass


def parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"grid must look like UxV, got {text!r}")
    rows, cols = (int(p) for p in parts)
    return rows, cols


def parse_omega(text: str) -> tuple[float, float, float]:
    vals = tuple(float(p) for p in text.split(","))
    if len(vals) != 3:
        raise ValueError(f"omega needs three comma-separated weights, got {text!r}")
    return vals


def read_config(path) -> dict:
    """``key=value`` per line; blank lines and ``#`` comments ignored; keys are flag names."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in _KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    command: str
    src: str | None = None
    out: str | None = None
    n: int = 10
    rho: float = 8.0
    patch: int = 128
    seed: int = 0
    depth: str | None = None
    threads: int | None = None
    align: AlignConfig = field(default_factory=AlignConfig)
    sources: dict = field(default_factory=dict)  # key -> (value, "flag" | "config" | "env")

    def report_lines(self) -> list[str]:
        lines = [f"command: {self.command}"]
        for key, (value, origin) in sorted(self.sources.items()):
            lines.append(f"override {key} = {value} ({origin})")
        a = self.align
        lines.append(
            f"align: grid={a.rows}x{a.cols} k={a.k} alpha={a.alpha:g} levels={a.levels} lambda={a.lam:g} "
            f"mu={a.mu:g} omega={','.join(f'{w:g}' for w in a.omega)} iters={a.refine_iters} "
            f"resolution={a.working_resolution}"
        )
        lines.append(f"threads: {self.threads if self.threads else 'all'}")
        return lines


def resolve(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        for key, value in read_config(args.config).items():
            raw[key] = (value, "config")
    for key in _KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = (value, "flag")
    if "threads" not in raw and os.environ.get(THREADS_ENV):
        raw["threads"] = (os.environ[THREADS_ENV], "env")

    cfg = RunConfig(command=args.command)
    align_kw = {}
    for key, (value, origin) in raw.items():
        try:
            if key == "grid":
                align_kw["rows"], align_kw["cols"] = parse_grid(str(value))
            elif key == "omega":
                align_kw["omega"] = parse_omega(str(value))
            else:
                conv, align_field = _KEYS[key]
                typed = conv(value)
                if align_field:
                    align_kw[align_field] = typed
                else:
                    setattr(cfg, key, typed)
        except ValueError as exc:
            raise CliError(f"bad value for {key} ({origin}): {exc}") from exc
    try:
        cfg.align = AlignConfig(**align_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid alignment settings: {exc}") from exc
    if cfg.threads is not None and cfg.threads < 1:
        raise CliError(f"threads must be >= 1, got {cfg.threads}")
    cfg.sources = {k: v for k, v in raw.items()}
    return cfg


def _need(value, flag: str):
    if value is None:
        raise CliError(f"missing required --{flag}")
    return value


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _find_image(directory: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def _pair_dirs(root: Path) -> list[Path]:
    """A single pair directory, or every sub-directory holding a reference image."""
    if _find_image(root, "reference"):
        return [root]
    return sorted(d for d in root.iterdir() if d.is_dir() and _find_image(d, "reference"))


def format_motion(m: np.ndarray) -> str:
    return "".join(f"{du:.17g} {dv:.17g}\n" for du, dv in np.asarray(m).reshape(4, 2))


def parse_motion(text: str) -> np.ndarray:
    vals = [float(t) for t in text.split()]
    if len(vals) != 8:
        raise ValueError(f"motion file needs 8 numbers, got {len(vals)}")
    return np.array(vals).reshape(4, 2)


def _write_report(path: Path, cfg: RunConfig, body: list[str]) -> None:
    path.write_text("\n".join(cfg.report_lines() + body) + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(_need(cfg.out, "out"))
    if cfg.src is not None:
        src_dir = Path(cfg.src)
        if not src_dir.is_dir():
            raise CliError(f"source directory not found: {src_dir}")
        files = _image_files(src_dir)
        if not files:
            raise CliError(f"no PNG/PPM/PGM images in {src_dir}")
    else:
        files = []
    out.mkdir(parents=True, exist_ok=True)
    side = cfg.patch + 2 * int(math.ceil(cfg.rho)) + 8
    for i in range(cfg.n):
        pair_seed = cfg.seed * 1_000_003 + i
        if files:
            src = load_image(files[i % len(files)])
        else:
            src = ek.textured_image(side, side, pair_seed)
        pair = ek.synth_pair(src, cfg.rho, cfg.patch, pair_seed)
        d = out / f"pair_{i:04d}"
        d.mkdir(exist_ok=True)
        save_image(pair.reference, d / "reference.png")
        save_image(pair.target, d / "target.png")
        (d / "gt.txt").write_text(format_motion(pair.gt_motion))
    _write_report(out / "synth_report.txt", cfg, [f"pairs: {cfg.n}", f"source: {cfg.src or 'procedural texture'}"])
    print(f"wrote {cfg.n} pairs to {out}")
    return 0


def _align_one(pair_dir: Path, out: Path, cfg: RunConfig) -> list[str]:
    ref = load_image(_find_image(pair_dir, "reference"))
    tgt_path = _find_image(pair_dir, "target")
    if tgt_path is None:
        raise CliError(f"no target image in {pair_dir}")
    tgt = load_image(tgt_path)
    if ref.channels != tgt.channels:
        ref, tgt = (Image(np.repeat(x.data, 3, axis=0)) if x.channels == 1 else x for x in (ref, tgt))
    depth = None
    depth_path = Path(cfg.depth) if cfg.depth else _find_image(pair_dir, "depth")
    if depth_path is not None:
        depth = load_depth(depth_path)
        if (depth.height, depth.width) != (tgt.height, tgt.width):
            raise CliError(f"depth map {depth.height}x{depth.width} does not match target {tgt.height}x{tgt.width}")

    result = align(ref, tgt, cfg.align, depth)
    out.mkdir(parents=True, exist_ok=True)
    warped = ms.warp_mesh(tgt, result.mesh)
    save_image(warped, out / "warped.png")
    save_image(viz.fuse(ref, warped), out / "fused.png")
    save_image(viz.mesh_overlay(tgt, result.mesh), out / "mesh_overlay.ppm")
    flow = result.flows[0]
    save_image(viz.flow_to_color(flow, max(1, 128 // flow.width)), out / "flow.ppm")
    hg.save_homography(result.global_h, out / "homography.txt")
    ms.save_mesh(result.mesh, out / "mesh.txt")
    motion = ek.corner_motion(result.mesh, (0, 0, ref.width, ref.height))
    (out / "pred.txt").write_text(format_motion(motion))

    body = [f"pair: {pair_dir}", f"depth: {depth_path or 'none (single level)'}"]
    for stage, lb in result.history:
        body.append(
            f"{stage}: content={','.join(f'{c:.6f}' for c in lb.content_per_layer)} "
            f"shape={lb.shape:.6f} total={lb.objective_total:.6f}"
        )
    body.append(f"iterations: {' '.join(f'{k}={v}' for k, v in result.iterations.items())}")
    body.append(f"timings_s: {' '.join(f'{k}={v:.3f}' for k, v in result.timings.items())}")
    body.append(f"mesh_valid: {result.mesh_valid}")
    body.append(f"psnr_overlap: {ek.psnr_overlap(ref, tgt, result.mesh):.4f}")
    _write_report(out / "report.txt", cfg, body)
    return body


def cmd_align(cfg: RunConfig) -> int:
    src = Path(_need(cfg.src, "src"))
    out = Path(_need(cfg.out, "out"))
    if not src.is_dir():
        raise CliError(f"pair directory not found: {src}")
    pairs = _pair_dirs(src)
    if not pairs:
        raise CliError(f"no reference/target pairs under {src}")
    if cfg.depth and len(pairs) > 1:
        raise CliError("--depth applies to a single pair; put depth.png inside each pair directory instead")
    for p in pairs:
        dest = out if p == src else out / p.name
        t0 = time.perf_counter()
        _align_one(p, dest, cfg)
        print(f"aligned {p.name} in {time.perf_counter() - t0:.1f}s -> {dest}")
    return 0


def _predicted_warp(pred_dir: Path):
    mesh_file = pred_dir / "mesh.txt"
    if mesh_file.exists():
        return ms.load_mesh(mesh_file)
    h_file = pred_dir / "homography.txt"
    if h_file.exists():
        return hg.load_homography(h_file)
    raise CliError(f"no mesh.txt or homography.txt in {pred_dir}")


def cmd_eval(cfg: RunConfig) -> int:
    """CSV per pair plus tier summary. ``--out`` names the directory of align outputs;
    without it every pair is scored under the identity (no-warping) prediction."""
    src = Path(_need(cfg.src, "src"))
    if not src.is_dir():
        raise CliError(f"pair directory not found: {src}")
    pairs = _pair_dirs(src)
    if not pairs:
        raise CliError(f"no pairs under {src}")
    pred_root = Path(cfg.out) if cfg.out else None
    rows = []
    for p in pairs:
        ref = load_image(_find_image(p, "reference"))
        tgt = load_image(_find_image(p, "target"))
        if pred_root is None:
            warp = hg.identity()
        else:
            warp = _predicted_warp(pred_root if p == src else pred_root / p.name)
        gt_file = p / "gt.txt"
        rmse = float("nan")
        if gt_file.exists():
            pred = ek.corner_motion(warp, (0, 0, ref.width, ref.height))
            rmse = ek.rmse_4pt(pred, parse_motion(gt_file.read_text()))
        rows.append((p.name, rmse, ek.psnr_overlap(ref, tgt, warp), ek.ssim_overlap(ref, tgt, warp)))

    lines = ["id,rmse_4pt,psnr,ssim"]
    lines += [f"{name},{r:.6f},{ps:.4f},{ss:.6f}" for name, r, ps, ss in rows]
    lines.append("")
    lines.append(f"{'metric':<10}{'Easy':>12}{'Moderate':>12}{'Hard':>12}{'Average':>12}")
    metrics = [("rmse_4pt", 1, False), ("psnr", 2, True), ("ssim", 3, True)]
    for name, col, higher in metrics:
        vals = [r[col] for r in rows]
        if all(np.isnan(vals)):
            continue
        t = ek.tier_partition(vals, higher_is_better=higher)
        lines.append(f"{name:<10}{t.easy:>12.4f}{t.moderate:>12.4f}{t.hard:>12.4f}{t.average:>12.4f}")
    sizes = ek.tier_partition([0.0] * len(rows)).sizes
    lines.append(f"tier sizes: {sizes[0]}/{sizes[1]}/{sizes[2]}")
    text = "\n".join(lines)
    print("\n".join(cfg.report_lines()))
    print(f"prediction: {pred_root or 'identity'}")
    print(text)
    if pred_root is not None and pred_root.is_dir():
        (pred_root / "eval.csv").write_text("\n".join(lines[: len(rows) + 1]) + "\n")
    return 0


def _best_time(fn, repeats: int = 3) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeats, number=number)) / number


def bench_rows(sizes=BENCH_SIZES, k: int = 3, alpha: float = 10.0, seed: int = 0, repeats: int = 3) -> list[dict]:
    """Time both volumes per map side n; byte counts are analytic peak estimates."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        f_r = l2_normalize(FeatureMap(rng.standard_normal((BENCH_CHANNELS, n, n))))
        f_t = l2_normalize(FeatureMap(rng.standard_normal((BENCH_CHANNELS, n, n))))
        cost_volume(f_r, f_t, 1)  # compile outside the timed region
        feature_flow(scale_softmax(correlation_volume(f_r, f_t, k), alpha))
        t_cost = _best_time(lambda: cost_volume(f_r, f_t, n), repeats)
        t_ccl = _best_time(lambda: feature_flow(scale_softmax(correlation_volume(f_r, f_t, k), alpha)), repeats)
        cc, cr = cost_volume_channels(n), correlation_channels(n)
        rows.append({
            "n": n,
            "cost_channels": cc,
            "corr_channels": cr,
            "ratio": cr / cc,
            "cost_time": t_cost,
            "ccl_time": t_ccl,
            "cost_bytes": 8 * n * n * cc,
            # two im2col matrices, raw volume, probability volume, flow
            "ccl_bytes": 8 * (2 * n * n * BENCH_CHANNELS * k * k + 2 * n * n * cr + 2 * n * n),
        })
    return rows


def loglog_slope(ns, times) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)[0])


def cmd_bench(cfg: RunConfig) -> int:
    rows = bench_rows(k=cfg.align.k, alpha=cfg.align.alpha, seed=cfg.seed)
    lines = cfg.report_lines()
    lines.append(f"{'n':>4}{'cost_ch':>9}{'corr_ch':>9}{'ratio':>8}{'cost_ms':>11}{'ccl_ms':>11}{'cost_MB':>10}{'ccl_MB':>10}")
    for r in rows:
        lines.append(
            f"{r['n']:>4}{r['cost_channels']:>9}{r['corr_channels']:>9}{r['ratio']:>8.4f}"
            f"{r['cost_time'] * 1e3:>11.3f}{r['ccl_time'] * 1e3:>11.3f}"
            f"{r['cost_bytes'] / 2**20:>10.2f}{r['ccl_bytes'] / 2**20:>10.2f}"
        )
    ns = [r["n"] for r in rows]
    s_cost = loglog_slope(ns, [r["cost_time"] for r in rows])
    s_ccl = loglog_slope(ns, [r["ccl_time"] for r in rows])
    lines.append(f"loglog slope: cost_volume={s_cost:.3f} ccl={s_ccl:.3f}")
    text = "\n".join(lines)
    print(text)
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.out).write_text(text + "\n")
    return 0


COMMANDS = {"synth": cmd_synth, "align": cmd_align, "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--src", help="source image dir (synth) or pair dir/set (align, eval)")
    common.add_argument("--out", help="output dir; for eval, the dir of align outputs")
    common.add_argument("--n", type=int, help="number of synthetic pairs")
    common.add_argument("--rho", type=float, help="max corner perturbation in px")
    common.add_argument("--patch", type=int, help="synthetic patch side in px")
    common.add_argument("--seed", type=int)
    common.add_argument("--grid", help="mesh cells as UxV")
    common.add_argument("--alpha", type=float, help="softmax scale factor")
    common.add_argument("--k", type=int, help="correlation patch side")
    common.add_argument("--levels", type=int, help="depth levels M")
    common.add_argument("--lambda", dest="lambda", type=float, help="content weight")
    common.add_argument("--mu", type=float, help="shape weight")
    common.add_argument("--omega", help="layer weights a,b,c")
    common.add_argument("--iters", type=int, help="refinement iterations")
    common.add_argument("--resolution", type=int, help="working resolution in px")
    common.add_argument("--depth", help="depth map for the target image")
    common.add_argument("--threads", type=int, help=f"kernel thread cap (fallback: ${THREADS_ENV})")
    common.add_argument("--config", help="key=value file; flags win")
    parser = argparse.ArgumentParser(prog="meshalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[cfg.command](cfg)
    except (CliError, NoOverlapError, ms.InvalidMeshError, hg.DegenerateConfigurationError, ValueError, OSError) as exc:
        print(f"meshalign {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
