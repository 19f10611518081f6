"""End-to-end acceptance criteria, each run at its stated tolerance.

Every test prints one ``CRITERION <n> PASS|FAIL`` line (visible with or
without ``-s``) before asserting.
"""

import math
import os
import time

import numpy as np
import pytest

from conftest import random_radiance_grid, small_pose
from relufields.cli import main as cli_main
from relufields.field import FetchMode, FieldGrid, GradSink, fetch, fetch_backward
from relufields.imagefit import fit_image, image_mode, psnr, reconstruct
from relufields.io import grid_file_size, read_metrics, save_grid, save_png
from relufields.mesh import MeshIndex, TriangleMesh
from relufields.occupancy import fit_occupancy, grid_occupancy, occupancy_mode, sphere_occupancy, volumetric_iou
from relufields.optim import TrainConfig
from relufields.radiance import evaluate_psnr, fetch_mode, fit_radiance
from relufields.render import (RayBatch, RenderSettings, composite_weights, march_rays, ray_aabb, render_backward,
                               render_image)
from relufields.scenes import DESK_AABB, desk_scene, icosphere, shapes_image

THREADS = os.cpu_count() or 1


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, detail

    return emit


# ------------------------------------------------------------ 1. gradients

def fetch_instance(rng):
    """Worst relative error of one random fetch query against central differences,
    or None when the query sits within 1e-3 of the activation kink."""
    ndim = int(rng.integers(2, 4))
    channels = int(rng.integers(1, 4))
    mode = list(FetchMode)[int(rng.integers(0, 4))]
    dims = tuple(int(d) for d in rng.integers(2, 5, ndim))
    g = FieldGrid(rng.uniform(-1, 1, dims + (channels,)), np.array([[0.0] * ndim, [1.0] * ndim]))
    x = rng.uniform(-0.5, np.array(dims) - 0.5, (1, ndim))
    up = rng.normal(size=(1, channels))
    inner = FieldGrid(np.tanh(g.values), g.aabb) if mode is FetchMode.TANH_THEN_RELU else g
    pre = fetch(inner, FetchMode.NONE, x)
    if mode is not FetchMode.NONE and np.abs(pre).min() < 1e-3:
        return None
    if mode is FetchMode.RELU_CLAMP01 and np.abs(pre - 1).min() < 1e-3:
        return None
    sink = GradSink.like(g)
    fetch_backward(g, mode, x, up, sink)
    flat = g.values.reshape(-1)
    grad = sink.values.reshape(-1)
    h = 1e-4
    worst = 0.0
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        a = float((fetch(g, mode, x) * up).sum())
        flat[i] = o - h
        b = float((fetch(g, mode, x) * up).sum())
        flat[i] = o
        fd = (a - b) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-6))
    return worst


def render_instance(seed):
    rng = np.random.default_rng(1000 + seed)
    g = random_radiance_grid(rng)
    pose = small_pose(8)
    st = RenderSettings(16)
    up = rng.normal(size=(8, 8, 3))
    sink = GradSink.like(g)
    render_backward(g, pose, st, up, sink)
    flat = g.values.reshape(-1)
    grad = sink.values.reshape(-1)
    h = 1e-3
    worst = 0.0
    for i in rng.choice(flat.size, 300, replace=False):
        o = flat[i]
        flat[i] = o + h
        a = float((render_image(g, pose, st) * up).sum())
        flat[i] = o - h
        b = float((render_image(g, pose, st) * up).sum())
        flat[i] = o
        fd = (a - b) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-6))
    return worst


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    fetch_errs = []
    while len(fetch_errs) < 1000:
        e = fetch_instance(rng)
        if e is not None:
            fetch_errs.append(e)
    render_errs = [render_instance(s) for s in range(20)]
    seconds = time.perf_counter() - t0
    ok = max(fetch_errs) <= 1e-5 and max(render_errs) <= 1e-3 and seconds < 120
    report(1, ok, f"fetch {len(fetch_errs)} instances max rel err {max(fetch_errs):.2e} (<=1e-5); "
                  f"render {len(render_errs)} instances max rel err {max(render_errs):.2e} (<=1e-3); "
                  f"{seconds:.1f} s (<120 s)")


# --------------------------------------------------------- 2. conservation

def test_criterion_2_compositing_conservation(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n_rays = 100_000
    # per-ray reference compositor over random density/step profiles
    worst_ref = 0.0
    for _ in range(n_rays // 2):
        n = int(rng.integers(1, 257))
        scale = 10.0 ** rng.uniform(-2, 3)
        w, t_final = composite_weights(rng.exponential(scale, n), rng.uniform(0, 0.05, n))
        worst_ref = max(worst_ref, abs(w.sum() + t_final - 1.0))
    # compiled marcher: black emitters over a white background give rgb = T_final
    v = np.zeros((16, 16, 16, 28))
    v[..., 0] = rng.exponential(5.0, (16, 16, 16)) * (rng.random((16, 16, 16)) < 0.5)
    v[..., 1::9] = -1.0
    grid = FieldGrid(v, DESK_AABB.copy())
    d = rng.normal(size=(n_rays // 2, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = -2.5 * d + rng.uniform(-0.5, 0.5, d.shape)
    tn, tf, hit = ray_aabb(o, d, grid.aabb)
    rays = RayBatch(o, d, tn, tf, hit)
    rgb, _, opacity, _ = march_rays(grid, FetchMode.RELU, rays, RenderSettings(128), threads=THREADS)
    worst_marcher = float(np.abs(opacity + rgb[:, 0] - 1.0)[hit].max())
    seconds = time.perf_counter() - t0
    ok = worst_ref <= 1e-12 and worst_marcher <= 1e-12 and seconds < 10
    report(2, ok, f"{n_rays // 2} reference rays max |sum-1| {worst_ref:.1e}; {int(hit.sum())} marched rays "
                  f"max |sum-1| {worst_marcher:.1e} (<=1e-12); {seconds:.1f} s (<10 s)")


# ------------------------------------------------------- 3. image ablation

IMAGE_ITERS = 400


def test_criterion_3_image_ablation(report):
    t0 = time.perf_counter()
    target = shapes_image(512)
    scores = {}
    for mode in ("relu", "none"):
        cfg = TrainConfig(dims=(64, 64), mode=mode, stage_iters=IMAGE_ITERS, threads=THREADS, log_every=10**9)
        grid = fit_image(target, (64, 64), cfg)
        scores[mode] = psnr(reconstruct(grid, image_mode(cfg), 512, 512), target)
    seconds = time.perf_counter() - t0
    gap = scores["relu"] - scores["none"]
    ok = gap >= 3.0 and seconds < 300
    report(3, ok, f"512^2 image, 64^2 grids: relu {scores['relu']:.2f} dB, plain {scores['none']:.2f} dB, "
                  f"gap {gap:.2f} dB (>=3); {seconds:.1f} s (<300 s)")


# ----------------------------------------------------------- 4. occupancy

OCC_ITERS = 300


def test_criterion_4_occupancy(report):
    t0 = time.perf_counter()
    index = MeshIndex(TriangleMesh(*icosphere(4, 1.0)))
    truth = sphere_occupancy((0.0, 0.0, 0.0), 1.0)
    box = np.array([[-1.1] * 3, [1.1] * 3])
    ious = {}
    for mode in ("relu", "none"):
        cfg = TrainConfig(dims=(64, 64, 64), mode=mode, stage_iters=OCC_ITERS, threads=THREADS, log_every=10**9)
        grid = fit_occupancy(index, cfg)
        ious[mode] = volumetric_iou(grid_occupancy(grid, occupancy_mode(mode)), truth, box, 1_000_000)
    seconds = time.perf_counter() - t0
    ok = ious["relu"] >= 0.95 and ious["none"] < ious["relu"] and seconds < 600
    report(4, ok, f"64^3 sphere IoU relu {ious['relu']:.4f} (>=0.95), plain {ious['none']:.4f} (< relu); "
                  f"{seconds:.1f} s (<600 s)")


# -------------------------------------------------- 5/6. desk radiance scene

DESK_ITERS = 600


@pytest.fixture(scope="module")
def desk():
    scene = desk_scene()
    settings = RenderSettings(2 * max(scene.grid.dims))
    render = lambda poses: [render_image(scene.grid, p, settings, threads=THREADS) for p in poses]  # noqa: E731
    return scene, render(scene.train), render(scene.val), render(scene.test)


def desk_run(desk, progressive):
    scene, train, val, test = desk
    cfg = TrainConfig(dims=(64, 64, 64), stage_iters=DESK_ITERS, progressive=progressive, threads=THREADS,
                      log_every=10**9)
    t0 = time.perf_counter()
    grid = fit_radiance(train, scene.train, cfg, DESK_AABB, val, scene.val)
    seconds = time.perf_counter() - t0
    return evaluate_psnr(grid, fetch_mode(cfg), test, scene.test, cfg), seconds, cfg


@pytest.fixture(scope="module")
def desk_progressive(desk):
    return desk_run(desk, True)


def test_criterion_5_desk_scene(report, desk_progressive):
    score, seconds, cfg = desk_progressive
    ok = score >= 30.0 and seconds < 600
    report(5, ok, f"64^3 refit, 20 views at 128^2: {score:.2f} dB on 5 held-out views (>=30); "
                  f"{seconds:.1f} s on {THREADS} hardware thread(s) (<600 s)")


def test_criterion_6_progressive_ablation(report, desk, desk_progressive):
    prog_score, _, prog_cfg = desk_progressive
    flat_score, seconds, flat_cfg = desk_run(desk, False)
    assert prog_cfg.schedule().total_iterations == flat_cfg.schedule().total_iterations
    gap = prog_score - flat_score
    report(6, gap >= 5.0, f"progressive {prog_score:.2f} dB, --no-progressive {flat_score:.2f} dB, "
                          f"gap {gap:.2f} dB (>=5) at {flat_cfg.schedule().total_iterations} iterations each")


# --------------------------------------------------------- 7. determinism

def test_criterion_7_determinism(report, tmp_path):
    save_png(tmp_path / "shapes.png", shapes_image(64))
    desk_dir = tmp_path / "desk"
    assert cli_main(["make-scene", "desk", str(desk_dir), "--size", "16"]) == 0
    assert cli_main(["make-scene", "sphere", str(tmp_path / "s.obj"), "--subdivisions", "2"]) == 0
    common = ["--threads", "1", "--stage-iters", "30", "--start-shrink-exponent", "2", "--log-every", "10",
              "--run-id", "r"]
    runs = {
        "image": ["fit-image", str(tmp_path / "shapes.png"), "--dims", "32"],
        "occupancy": ["fit-occupancy", str(tmp_path / "s.obj"), "--dims", "16", "--batch-points", "4096",
                      "--iou-samples", "20000"],
        "radiance": ["fit-radiance", str(desk_dir), "--dims", "16", "--aabb=-1,-1,-1,1,1,1", "--batch-rays", "1024"],
    }
    same = {}
    for name, argv in runs.items():
        tables = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            assert cli_main(argv + common + ["--out", str(out)]) == 0
            rows = read_metrics(out / "r" / "metrics.csv")
            for row in rows:
                row["wall_seconds"] = "*"
            tables.append(rows)
        same[name] = bool(tables[0]) and tables[0] == tables[1]
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items())
    report(7, all(same.values()), f"metrics CSV repeated with --threads 1 (wall_seconds masked): {detail}")


# ------------------------------------------------------------- 8. storage

def test_criterion_8_storage(report, tmp_path):
    dims, channels = (256, 256, 256), 28
    values = np.broadcast_to(np.float64(0.0), dims + (channels,))
    grid = FieldGrid(values, DESK_AABB.copy())
    path = tmp_path / "big.rluf"
    save_grid(path, grid)
    size = path.stat().st_size
    path.unlink()
    payload = 4 * channels * math.prod(dims)
    ok = 0 <= size - payload <= 1024 and size == grid_file_size(dims, channels)
    report(8, ok, f"256^3 x 28 file {size} bytes = payload {payload} + header {size - payload} (<=1024)")
