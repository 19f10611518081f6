"""Embedded oracle suite behind ``relufields selfcheck``.

Each check is small and seeded; together they cover interpolation, both
gradient paths, compositing, SH, the optimizer and every file format.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import FetchMode, FieldGrid, GradSink, fetch, fetch_backward, init_uniform, upsample_trilinear
from .imagefit import psnr
from .mesh import MeshIndex, TriangleMesh
from .occupancy import bce_loss
from .optim import AdamState, TrainConfig, adam_step
from .render import CameraPose, RayBatch, RenderSettings, composite_weights, render_backward, render_image, render_rays_reference
from .scenes import cube_mesh
from .sh import SH_C0, sh_basis


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _random_radiance_grid(rng, n=4):
    v = np.empty((n, n, n, 28))
    v[..., 0] = rng.uniform(0.5, 3.0, (n, n, n))
    v[..., 1:] = rng.uniform(-0.05, 0.05, (n, n, n, 27))
    v[..., 1::9] = rng.uniform(0.3, 0.7, (n, n, n, 3)) / SH_C0
    return FieldGrid(v, np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))


def check_vertex_exactness():
    rng = np.random.default_rng(1)
    g = init_uniform((5, 6, 7), 3, [[0, 0, 0], [1, 1, 1]], (-2, 2), rng=rng)
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in g.dims], indexing="ij"), -1).reshape(-1, 3)
    ok = np.array_equal(fetch(g, FetchMode.NONE, idx.astype(float)), g.values.reshape(-1, 3))
    return ok, "fetch at every vertex returns the stored value exactly"


def check_partition_of_unity():
    g = FieldGrid(np.full((4, 4, 2), 0.37), np.array([[0.0, 0.0], [1.0, 1.0]]))
    x = np.random.default_rng(2).uniform(-1, 4, (10_000, 2))
    err = float(np.abs(fetch(g, FetchMode.NONE, x) - 0.37).max())
    return err == 0.0, f"constant field max deviation {err:.1e}"


def check_relu_nonnegative():
    g = init_uniform((6, 6, 6), 1, [[0, 0, 0], [1, 1, 1]], (-1, 1), seed=3)
    x = np.random.default_rng(3).uniform(0, 5, (10_000, 3))
    lo = float(fetch(g, FetchMode.RELU, x).min())
    return lo >= 0.0, f"min ReLU output {lo:.3g}"


def _fetch_fd(mode, seed):
    rng = np.random.default_rng(seed)
    g = init_uniform((4, 4, 4), 2, [[0, 0, 0], [1, 1, 1]], (-1, 1), rng=rng)
    x = rng.uniform(0, 3, (16, 3))
    up = rng.normal(size=(16, 2))
    sink = GradSink.like(g)
    fetch_backward(g, mode, x, up, sink)
    # compare only at vertices the queries touch, away from the ReLU kink
    pre = fetch(g, FetchMode.NONE if mode is not FetchMode.TANH_THEN_RELU else mode, x)
    if mode is not FetchMode.NONE and np.abs(pre).min() < 1e-3:
        return None
    h = 1e-4
    worst = 0.0
    flat = g.values.reshape(-1)
    for i in np.flatnonzero(sink.values.reshape(-1)):
        o = flat[i]
        flat[i] = o + h
        a = float((fetch(g, mode, x) * up).sum())
        flat[i] = o - h
        b = float((fetch(g, mode, x) * up).sum())
        flat[i] = o
        worst = max(worst, _rel_err(sink.values.reshape(-1)[i], (a - b) / (2 * h)))
    return worst


def check_fetch_gradient():
    errs = [e for s in range(20) for m in FetchMode if (e := _fetch_fd(m, s)) is not None]
    worst = max(errs)
    return worst <= 1e-5, f"{len(errs)} instances, max relative error {worst:.2e}"


def check_upsample_linear():
    idx = np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), -1).astype(float)
    g = FieldGrid((idx @ np.array([0.3, -1.2, 2.0]) + 0.5)[..., None], np.array([[0, 0, 0], [1, 1, 1.0]]))
    up = upsample_trilinear(g)
    didx = np.stack(np.meshgrid(*[np.arange(d) for d in up.dims], indexing="ij"), -1).reshape(-1, 3)
    src = didx * (4.0 / 9.0)
    err = float(np.abs(up.values.reshape(-1) - (src @ np.array([0.3, -1.2, 2.0]) + 0.5)).max())
    return err < 1e-12, f"linear field preserved to {err:.1e}"


def check_adam_first_step():
    g = FieldGrid(np.zeros((3, 3, 1)), np.array([[0, 0], [1, 1.0]]))
    sink = GradSink.like(g)
    sink.values[:] = np.random.default_rng(4).normal(size=sink.values.shape)
    state = AdamState.for_grid(g, lr=0.03)
    adam_step(g, sink, state)
    err = float(np.abs(np.abs(g.values) - 0.03).max())
    return err < 1e-6, f"first step magnitude off by {err:.1e}"


def check_compositing_conservation():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(2000):
        n = int(rng.integers(1, 64))
        w, t_final = composite_weights(rng.exponential(3.0, n), rng.uniform(0, 0.2, n))
        worst = max(worst, abs(w.sum() + t_final - 1.0))
    return worst <= 1e-12, f"max |sum - 1| = {worst:.1e}"


def check_render_reference():
    rng = np.random.default_rng(6)
    g = _random_radiance_grid(rng)
    pose = CameraPose.look_at([2.5, 1.5, 1.0], [0, 0, 0], 8, 8, 8.0)
    st = RenderSettings(16)
    img = render_image(g, pose, st)
    ref = render_rays_reference(g, FetchMode.RELU, RayBatch.from_pose(pose, g.aabb), st)
    err = float(np.abs(img.reshape(-1, 3) - ref).max())
    return err < 1e-12, f"compiled vs reference renderer max diff {err:.1e}"


def check_render_gradient():
    rng = np.random.default_rng(7)
    g = _random_radiance_grid(rng)
    pose = CameraPose.look_at([2.5, 1.5, 1.0], [0, 0, 0], 8, 8, 8.0)
    st = RenderSettings(16)
    up = rng.normal(size=(8, 8, 3))
    sink = GradSink.like(g)
    render_backward(g, pose, st, up, sink)
    flat = g.values.reshape(-1)
    h = 1e-3
    worst = 0.0
    for i in rng.choice(flat.size, 60, replace=False):
        o = flat[i]
        flat[i] = o + h
        a = float((render_image(g, pose, st) * up).sum())
        flat[i] = o - h
        b = float((render_image(g, pose, st) * up).sum())
        flat[i] = o
        worst = max(worst, _rel_err(sink.values.reshape(-1)[i], (a - b) / (2 * h)))
    return worst <= 1e-3, f"60 entries, max relative error {worst:.2e}"


def check_sh_orthonormality(perturb_sh: bool = False):
    rng = np.random.default_rng(8)
    d = rng.normal(size=(1_000_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    c0 = SH_C0 * 1.05 if perturb_sh else None
    y = sh_basis(d, c0=c0)
    gram = 4.0 * math.pi * (y.T @ y) / len(d)
    err = float(np.abs(gram - np.eye(y.shape[1])).max())
    return err <= 5e-3, f"max |<Yi,Yj> - delta_ij| = {err:.2e}"


def check_grid_roundtrip():
    from .io import load_grid, save_grid

    g = init_uniform((5, 4, 3), 2, [[-1, 0, 2], [1, 3, 5]], (-3, 3), seed=9)
    g.values[:] = g.values.astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        save_grid(Path(tmp) / "g.rluf", g)
        back = load_grid(Path(tmp) / "g.rluf")
    ok = np.array_equal(back.values, g.values) and np.array_equal(back.aabb, g.aabb)
    return ok, "save/load reproduces values and AABB bit-for-bit"


def check_config_roundtrip():
    from .io import read_config, write_config

    cfg = TrainConfig(dims=(32, 16, 8), mode="none", progressive=False, lr=0.0125, aabb=((0, 0, 0), (1, 2, 3)),
                      samples_per_ray=77, threads=1)
    with tempfile.TemporaryDirectory() as tmp:
        write_config(Path(tmp) / "c.txt", cfg)
        back, _ = read_config(Path(tmp) / "c.txt")
    return back == cfg, "config survives key = value round trip"


def check_png_roundtrip():
    from .io import load_png, save_png

    img = np.random.default_rng(10).integers(0, 256, (7, 9, 3)) / 255.0
    with tempfile.TemporaryDirectory() as tmp:
        save_png(Path(tmp) / "a.png", img)
        back = load_png(Path(tmp) / "a.png")
    return np.array_equal(back, img), "8-bit PNG round trip is exact"


def check_obj_and_parity():
    from .io import load_obj, save_obj

    v, t = cube_mesh()
    with tempfile.TemporaryDirectory() as tmp:
        save_obj(Path(tmp) / "c.obj", TriangleMesh(v, t))
        mesh = load_obj(Path(tmp) / "c.obj")
    index = MeshIndex(mesh)
    pts = np.random.default_rng(11).uniform(-0.5, 1.5, (20_000, 3))
    truth = np.all((pts > 0) & (pts < 1), axis=1)
    ok = np.array_equal(index.contains(pts).astype(bool), truth)
    return ok, "cube OBJ round trip; ray parity matches the box test on 20000 points"


def check_losses():
    loss, _ = bce_loss(0.5, 1.0)
    p = psnr(np.zeros((4, 4)), np.full((4, 4), 0.1))
    ok = abs(loss - math.log(2)) < 1e-12 and abs(p - 20.0) < 1e-9 and psnr(np.ones(3), np.ones(3)) == math.inf
    return ok, f"BCE(0.5, 1) = {loss:.6f}, PSNR(mse=0.01) = {p:.6f} dB"


CHECKS = [
    ("vertex exactness", check_vertex_exactness),
    ("partition of unity", check_partition_of_unity),
    ("ReLU output non-negative", check_relu_nonnegative),
    ("fetch gradient vs finite differences", check_fetch_gradient),
    ("upsampling preserves linear fields", check_upsample_linear),
    ("Adam first step equals lr", check_adam_first_step),
    ("compositing conservation", check_compositing_conservation),
    ("compiled renderer vs reference", check_render_reference),
    ("render gradient vs finite differences", check_render_gradient),
    ("SH orthonormality", check_sh_orthonormality),
    ("grid file round trip", check_grid_roundtrip),
    ("config file round trip", check_config_roundtrip),
    ("PNG round trip", check_png_roundtrip),
    ("OBJ round trip and inside test", check_obj_and_parity),
    ("BCE and PSNR values", check_losses),
]


def run_selfcheck(perturb_sh: bool = False) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            passed, detail = fn(perturb_sh) if fn is check_sh_orthonormality else fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results


def format_report(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
