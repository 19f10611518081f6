"""Command line entry point: ``relufields <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .field import FetchMode

log = logging.getLogger("relufields")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _floats(text: str, n: int | None = None, what: str = "value") -> tuple:
    try:
        vals = tuple(float(x) for x in text.replace("x", ",").split(","))
    except ValueError:
        raise InvalidArgumentError(f"could not parse {what} {text!r}") from None
    if n is not None and len(vals) != n:
        raise InvalidArgumentError(f"{what} needs {n} numbers, got {len(vals)}")
    return vals


def parse_dims(text: str, m: int) -> tuple:
    parts = text.replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise InvalidArgumentError(f"could not parse --dims {text!r}") from None
    if len(dims) == 1:
        dims = dims * m
    if len(dims) != m:
        raise InvalidArgumentError(f"--dims needs 1 or {m} integers")
    return dims


def _common(p, default_dims: str):
    p.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run folders")
    p.add_argument("--run-id", default=None, help="run folder name (default derived from the settings)")
    p.add_argument("--dims", default=default_dims, help="final grid resolution, e.g. 64 or 64,64,64")
    p.add_argument("--mode", choices=("relu", "none"), default="relu")
    p.add_argument("--no-progressive", action="store_true", help="train at the final resolution only")
    p.add_argument("--stage-iters", type=int, default=2000)
    p.add_argument("--start-shrink-exponent", type=int, default=4,
                   help="first stage is the final resolution divided by 2**k")
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--aabb", default=None, help="xmin,ymin,zmin,xmax,ymax,zmax")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--force", action="store_true", help="overwrite an existing run folder")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="relufields", description="ReLU field fitting, rendering and evaluation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit-image", help="fit a PNG into a 2D grid")
    p.add_argument("image", type=Path)
    _common(p, "64")

    p = sub.add_parser("fit-occupancy", help="fit a watertight OBJ mesh as an occupancy grid")
    p.add_argument("mesh", type=Path)
    _common(p, "64")
    p.add_argument("--batch-points", type=int, default=32768)
    p.add_argument("--iou-samples", type=int, default=1_000_000)

    p = sub.add_parser("fit-radiance", help="reconstruct a radiance grid from a transforms.json dataset")
    p.add_argument("dataset", type=Path)
    _common(p, "64")
    p.add_argument("--samples-per-ray", type=int, default=None)
    p.add_argument("--batch-rays", type=int, default=4096)
    p.add_argument("--background", default="1,1,1")
    p.add_argument("--jitter", action="store_true", help="stratified sample jitter during training")

    p = sub.add_parser("render", help="render a saved grid")
    p.add_argument("grid", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory for PNGs")
    p.add_argument("--dataset", type=Path, default=None, help="take camera poses from this dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--views", type=int, default=4, help="orbit views when no dataset is given")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--mode", choices=("relu", "none"), default=None, help="default: read from config.txt")
    p.add_argument("--samples-per-ray", type=int, default=None)
    p.add_argument("--background", default="1,1,1")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="score a saved grid against images, a dataset split or a mesh")
    p.add_argument("grid", type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--dataset", type=Path)
    src.add_argument("--mesh", type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=("relu", "none"), default=None, help="default: read from config.txt")
    p.add_argument("--samples-per-ray", type=int, default=None)
    p.add_argument("--background", default="1,1,1")
    p.add_argument("--iou-samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("make-scene", help="write a built-in test asset")
    p.add_argument("kind", choices=("desk", "shapes", "sphere", "cube"))
    p.add_argument("out", type=Path, help="dataset folder (desk) or output file")
    p.add_argument("--size", type=int, default=None, help="image size (desk: 128, shapes: 512)")
    p.add_argument("--subdivisions", type=int, default=4)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("selfcheck", help="run the embedded oracle suite")
    p.add_argument("--perturb-sh", action="store_true", help=argparse.SUPPRESS)
    return ap


# ---------------------------------------------------------------- run folders

class RunDir:
    """Writes into ``<out>/<run_id>.partial`` and renames on success."""

    def __init__(self, out: Path, run_id: str, force: bool):
        self.final = Path(out) / run_id
        self.partial = Path(out) / f"{run_id}.partial"
        if self.final.exists() and not force:
            raise InvalidArgumentError(f"{self.final} already exists (use --force to overwrite)")
        if self.partial.exists():
            shutil.rmtree(self.partial)
        self.partial.mkdir(parents=True)
        self.force = force

    @property
    def path(self) -> Path:
        return self.partial

    def commit(self) -> Path:
        if self.final.exists():
            shutil.rmtree(self.final)
        self.partial.rename(self.final)
        return self.final


def _train_config(args, dims, **extra):
    from .optim import TrainConfig

    aabb = None
    if args.aabb:
        vals = _floats(args.aabb, 2 * len(dims), "--aabb")
        aabb = (vals[:len(dims)], vals[len(dims):])
    cfg = TrainConfig(dims=dims, mode=args.mode, progressive=not args.no_progressive, stage_iters=args.stage_iters,
                      start_shrink_exponent=args.start_shrink_exponent, lr=args.lr, seed=args.seed,
                      threads=args.threads, aabb=aabb, log_every=args.log_every, **extra)
    cfg.schedule()  # validate before any output is created
    return cfg


def _run_id(args, kind: str, dims) -> str:
    if args.run_id:
        return args.run_id
    prog = "noprog" if args.no_progressive else "prog"
    return f"{kind}-{args.mode}-{prog}-{'x'.join(map(str, dims))}-s{args.seed}"


def _print_csv(header, row):
    print(",".join(header))
    print(",".join(str(v) for v in row))


# --------------------------------------------------------------- subcommands

def cmd_fit_image(args) -> int:
    from .imagefit import RasterImage, check_grid_fits, fit_image, image_mode, psnr, reconstruct
    from .io import MetricsWriter, load_png, save_grid, save_png, write_config
    from .report import plot_image_grid, plot_training_curves

    target = RasterImage(load_png(args.image))
    dims = check_grid_fits(target, parse_dims(args.dims, 2))
    cfg = _train_config(args, dims)
    run = RunDir(args.out, _run_id(args, "image", dims), args.force)
    write_config(run.path / "config.txt", cfg, {"task": "image", "input": str(args.image)})
    t0 = time.perf_counter()
    with MetricsWriter(run.path / "metrics.csv", run.final.name, args.image.stem, cfg.mode) as metrics:
        grid = fit_image(target, dims, cfg, on_row=metrics)
    seconds = time.perf_counter() - t0
    mode = image_mode(cfg)
    recon = reconstruct(grid, mode, target.height, target.width)
    score = psnr(recon, target)
    save_grid(run.path / "grid.rluf", grid)
    save_png(run.path / "reconstruction.png", recon)
    plot_training_curves(metrics.rows, run.path / "curves.png", f"image fit ({cfg.mode})")
    plot_image_grid([("target", target.values), (f"{cfg.mode} {dims[0]}x{dims[1]}: {score:.2f} dB", recon),
                     ("abs error", np.abs(recon - target.values).mean(axis=-1))], run.path / "comparison.png")
    run.commit()
    _print_csv(("grid_dims", "mode", "psnr_db", "seconds"), ("x".join(map(str, dims)), cfg.mode, repr(score),
                                                              f"{seconds:.3f}"))
    return EXIT_OK


def cmd_fit_occupancy(args) -> int:
    from .io import MetricsWriter, load_obj, save_depth_png, save_grid, write_config
    from .mesh import MeshIndex
    from .occupancy import dilated_aabb, fit_occupancy, grid_occupancy, mesh_occupancy, occupancy_mode, \
        render_occupancy_depth, volumetric_iou
    from .render import RenderSettings
    from .report import depth_preview, plot_image_grid, plot_training_curves
    from .scenes import orbit_poses

    index = MeshIndex(load_obj(args.mesh))
    dims = parse_dims(args.dims, 3)
    cfg = _train_config(args, dims, batch_points=args.batch_points)
    run = RunDir(args.out, _run_id(args, "occupancy", dims), args.force)
    write_config(run.path / "config.txt", cfg, {"task": "occupancy", "input": str(args.mesh)})
    t0 = time.perf_counter()
    with MetricsWriter(run.path / "metrics.csv", run.final.name, args.mesh.stem, cfg.mode) as metrics:
        grid = fit_occupancy(index, cfg, on_row=metrics)
    seconds = time.perf_counter() - t0
    mode = occupancy_mode(cfg.mode)
    save_grid(run.path / "grid.rluf", grid)
    iou = volumetric_iou(grid_occupancy(grid, mode), mesh_occupancy(index), dilated_aabb(index.aabb),
                         args.iou_samples, seed=cfg.seed)
    panels = []
    center = grid.aabb.mean(axis=0)
    radius = 2.2 * float(np.linalg.norm(grid.aabb[1] - grid.aabb[0])) / 2
    for i, pose in enumerate(orbit_poses(3, radius=radius, size=128, center=center, target=center)):
        depth, tn, tf = render_occupancy_depth(grid, mode, pose, RenderSettings(2 * max(dims)))
        save_depth_png(run.path / f"depth_{i}.png", depth, tn, tf)
        panels.append((f"depth view {i}", depth_preview(depth)))
    plot_training_curves(metrics.rows, run.path / "curves.png", f"occupancy fit ({cfg.mode})")
    plot_image_grid(panels, run.path / "depth.png", f"IoU {iou:.4f}")
    run.commit()
    _print_csv(("grid_dims", "mode", "iou", "seconds"), ("x".join(map(str, dims)), cfg.mode, repr(iou),
                                                         f"{seconds:.3f}"))
    return EXIT_OK


def cmd_fit_radiance(args) -> int:
    from .io import MetricsWriter, load_nerf_dataset, save_grid, save_png, write_config
    from .radiance import fetch_mode, fit_radiance, render_views
    from .imagefit import psnr
    from .report import plot_image_grid, plot_training_curves

    background = _floats(args.background, 3, "--background")
    dims = parse_dims(args.dims, 3)
    aabb_override = None
    if args.aabb:
        vals = _floats(args.aabb, 6, "--aabb")
        aabb_override = (vals[:3], vals[3:])
    train = load_nerf_dataset(args.dataset, "train", aabb_override)
    splits = {}
    for split in ("val", "test"):
        if (args.dataset / f"transforms_{split}.json").exists():
            splits[split] = load_nerf_dataset(args.dataset, split, aabb_override)
    cfg = _train_config(args, dims, samples_per_ray=args.samples_per_ray, batch_rays=args.batch_rays,
                        background=background, stratified_jitter=args.jitter)
    cfg = cfg.replace(aabb=tuple(map(tuple, train.aabb)))
    run = RunDir(args.out, _run_id(args, "radiance", dims), args.force)
    write_config(run.path / "config.txt", cfg, {"task": "radiance", "input": str(args.dataset)})
    images = train.load_images(background)
    val = splits.get("val")
    val_images = val.load_images(background) if val else []

    def checkpoint(stage, grid):
        save_grid(run.path / "grid.rluf", grid)

    t0 = time.perf_counter()
    with MetricsWriter(run.path / "metrics.csv", run.final.name, args.dataset.name, cfg.mode) as metrics:
        grid = fit_radiance(images, train.poses, cfg, train.aabb, val_images, val.poses if val else [],
                            on_row=metrics, on_stage=checkpoint)
    seconds = time.perf_counter() - t0
    save_grid(run.path / "grid.rluf", grid)
    mode = fetch_mode(cfg)
    test = splits.get("test")
    score = float("nan")
    if test:
        targets = test.load_images(background)
        renders = render_views(grid, mode, test.poses, cfg)
        (run.path / "test").mkdir()
        for i, img in enumerate(renders):
            save_png(run.path / "test" / f"r_{i}.png", img)
        score = float(np.mean([psnr(r, t) for r, t in zip(renders, targets)]))
        panels = []
        for i in range(min(3, len(renders))):
            panels += [(f"view {i} target", targets[i]), (f"view {i} render", renders[i])]
        plot_image_grid(panels, run.path / "test_views.png", f"held-out PSNR {score:.2f} dB", cols=2)
    plot_training_curves(metrics.rows, run.path / "curves.png", f"radiance fit ({cfg.mode})")
    run.commit()
    _print_csv(("grid_dims", "mode", "test_psnr_db", "seconds"), ("x".join(map(str, dims)), cfg.mode, repr(score),
                                                                  f"{seconds:.3f}"))
    return EXIT_OK


def _saved_mode(grid_path: Path, override):
    if override:
        return override
    cfg_path = grid_path.parent / "config.txt"
    if cfg_path.exists():
        from .io import read_config

        return read_config(cfg_path)[0].mode
    return "relu"


def _samples(args, grid) -> int:
    return args.samples_per_ray or 2 * max(grid.dims)


def cmd_render(args) -> int:
    from .imagefit import reconstruct
    from .io import load_grid, load_nerf_dataset, save_depth_png, save_png
    from .occupancy import occupancy_mode, render_occupancy_depth
    from .render import RenderSettings, render_image
    from .scenes import orbit_poses

    grid = load_grid(args.grid)
    mode = _saved_mode(args.grid, args.mode)
    if args.out.exists() and any(args.out.iterdir()) and not args.force:
        raise InvalidArgumentError(f"{args.out} is not empty (use --force to overwrite)")
    args.out.mkdir(parents=True, exist_ok=True)
    if grid.ndim == 2:
        fm = FetchMode.RELU_CLAMP01 if mode == "relu" else FetchMode.NONE
        h = args.size
        w = int(round(h * (grid.aabb[1, 1] - grid.aabb[0, 1]) / (grid.aabb[1, 0] - grid.aabb[0, 0])))
        from .field import FieldGrid

        # pixel coordinates scale with the stored extent
        scaled = FieldGrid(grid.values, np.array([[0.0, 0.0], [float(h), float(w)]]))
        save_png(args.out / "image.png", reconstruct(scaled, fm, h, w))
        print(args.out / "image.png")
        return EXIT_OK
    if args.dataset:
        poses = load_nerf_dataset(args.dataset, args.split, grid.aabb).poses
    else:
        center = grid.aabb.mean(axis=0)
        radius = 1.6 * float(np.linalg.norm(grid.aabb[1] - grid.aabb[0]))
        poses = orbit_poses(args.views, radius=radius, size=args.size, center=center, target=center)
    background = _floats(args.background, 3, "--background")
    settings = RenderSettings(_samples(args, grid), background)
    for i, pose in enumerate(poses):
        if grid.channels == 1:
            depth, tn, tf = render_occupancy_depth(grid, occupancy_mode(mode), pose, settings)
            save_depth_png(args.out / f"depth_{i}.png", depth, tn, tf)
        else:
            fm = FetchMode.RELU if mode == "relu" else FetchMode.NONE
            save_png(args.out / f"r_{i}.png", render_image(grid, pose, settings, fm, threads=args.threads))
    print(f"wrote {len(poses)} view(s) to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .imagefit import RasterImage, psnr, reconstruct
    from .io import load_grid, load_nerf_dataset, load_obj, load_png
    from .mesh import MeshIndex
    from .occupancy import dilated_aabb, grid_occupancy, mesh_occupancy, occupancy_mode, volumetric_iou
    from .render import RenderSettings, render_image

    grid = load_grid(args.grid)
    mode = _saved_mode(args.grid, args.mode)
    dims = "x".join(map(str, grid.dims))
    if args.image:
        target = RasterImage(load_png(args.image))
        fm = FetchMode.RELU_CLAMP01 if mode == "relu" else FetchMode.NONE
        score = psnr(reconstruct(grid, fm, target.height, target.width), target)
        _print_csv(("grid_dims", "mode", "psnr_db"), (dims, mode, repr(score)))
    elif args.mesh:
        index = MeshIndex(load_obj(args.mesh))
        iou = volumetric_iou(grid_occupancy(grid, occupancy_mode(mode)), mesh_occupancy(index),
                             dilated_aabb(index.aabb), args.iou_samples, seed=args.seed)
        _print_csv(("grid_dims", "mode", "iou"), (dims, mode, repr(iou)))
    else:
        background = _floats(args.background, 3, "--background")
        manifest = load_nerf_dataset(args.dataset, args.split, grid.aabb)
        settings = RenderSettings(_samples(args, grid), background)
        fm = FetchMode.RELU if mode == "relu" else FetchMode.NONE
        targets = manifest.load_images(background)
        scores = [psnr(render_image(grid, p, settings, fm, threads=args.threads), t)
                  for p, t in zip(manifest.poses, targets)]
        _print_csv(("grid_dims", "mode", "split", "views", "psnr_db"),
                   (dims, mode, args.split, len(scores), repr(float(np.mean(scores)))))
    return EXIT_OK


def cmd_make_scene(args) -> int:
    from .io import save_grid, save_nerf_dataset, save_obj, save_png
    from .mesh import TriangleMesh
    from .render import RenderSettings, render_image
    from .scenes import cube_mesh, desk_scene, icosphere, shapes_image

    if args.out.exists() and not args.force:
        raise InvalidArgumentError(f"{args.out} already exists (use --force to overwrite)")
    if args.kind == "desk":
        scene = desk_scene(size=args.size or 128)
        settings = RenderSettings(2 * max(scene.grid.dims))
        for split, poses in (("train", scene.train), ("val", scene.val), ("test", scene.test)):
            images = [render_image(scene.grid, p, settings) for p in poses]
            save_nerf_dataset(args.out, split, images, poses)
        save_grid(args.out / "ground_truth.rluf", scene.grid)
    elif args.kind == "shapes":
        save_png(args.out, shapes_image(args.size or 512))
    elif args.kind == "sphere":
        save_obj(args.out, TriangleMesh(*icosphere(args.subdivisions)))
    else:
        save_obj(args.out, TriangleMesh(*cube_mesh()))
    print(args.out)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import format_report, run_selfcheck

    results = run_selfcheck(perturb_sh=args.perturb_sh)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "fit-image": cmd_fit_image,
    "fit-occupancy": cmd_fit_occupancy,
    "fit-radiance": cmd_fit_radiance,
    "render": cmd_render,
    "eval": cmd_eval,
    "make-scene": cmd_make_scene,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # numerical or other runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
