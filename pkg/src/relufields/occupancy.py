"""Occupancy fields: fitting a watertight mesh, IoU evaluation, depth renders."""

from __future__ import annotations

import time

import numpy as np

from .errors import InvalidArgumentError, UndefinedMetricError
from .field import FetchMode, FieldGrid, fetch, fetch_backward, init_uniform, world_to_grid
from .mesh import MeshIndex, TriangleMesh
from .optim import FitTask, TrainConfig, run_progressive
from .render import CameraPose, RenderSettings, generate_rays

BCE_EPS = 1e-7
SAMPLE_DILATION = 0.1
THRESHOLD = 0.5


def occupancy_mode(cfg_mode: str) -> FetchMode:
    return FetchMode.TANH_THEN_RELU if cfg_mode == "relu" else FetchMode.NONE


def dilated_aabb(aabb, fraction: float = SAMPLE_DILATION) -> np.ndarray:
    aabb = np.asarray(aabb, dtype=np.float64)
    pad = fraction * (aabb[1] - aabb[0])
    return np.stack([aabb[0] - pad, aabb[1] + pad])


def sample_training_points(index: MeshIndex, count: int, seed: int = 0,
                           rng: np.random.Generator | None = None, dilation: float = SAMPLE_DILATION):
    """Uniform points over the dilated mesh AABB with inside/outside labels."""
    if count <= 0:
        raise InvalidArgumentError("count must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    box = dilated_aabb(index.aabb, dilation)
    pts = rng.uniform(box[0], box[1], size=(count, 3))
    return pts, index.contains(pts)


def bce_loss(p, y, eps: float = BCE_EPS):
    """Mean binary cross entropy and its gradient w.r.t. ``p``.

    ``p`` is clamped to ``[eps, 1 - eps]`` before the log; the gradient is
    the derivative evaluated at that clamped value.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, eps, 1.0 - eps)
    n = max(p.size, 1)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    return float(loss.sum() / n), grad


def predict(grid: FieldGrid, mode: FetchMode, points_world) -> np.ndarray:
    """Occupancy probability in [0, 1] at world points."""
    return np.clip(fetch(grid, mode, world_to_grid(grid, points_world)), 0.0, 1.0)


def grid_occupancy(grid: FieldGrid, mode: FetchMode):
    return lambda pts: predict(grid, mode, pts)[..., 0]


def sphere_occupancy(center, radius: float):
    center = np.asarray(center, dtype=np.float64)
    return lambda pts: (np.linalg.norm(pts - center, axis=-1) < radius).astype(np.float64)


def box_occupancy(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lambda pts: np.all((pts > lo) & (pts < hi), axis=-1).astype(np.float64)


def mesh_occupancy(index: MeshIndex):
    return lambda pts: index.contains(pts).astype(np.float64)


def volumetric_iou(occ_a, occ_b, aabb, mc_samples: int = 1_000_000, seed: int = 0,
                   threshold: float = THRESHOLD, chunk: int = 200_000) -> float:
    """Monte-Carlo |A and B| / |A or B| over a shared box; fields are callables
    mapping ``(N, 3)`` world points to occupancy values."""
    aabb = np.asarray(aabb, dtype=np.float64)
    rng = np.random.default_rng(seed)
    inter = union = 0
    done = 0
    while done < mc_samples:
        n = min(chunk, mc_samples - done)
        pts = rng.uniform(aabb[0], aabb[1], size=(n, 3))
        a = np.asarray(occ_a(pts)) >= threshold
        b = np.asarray(occ_b(pts)) >= threshold
        inter += int(np.count_nonzero(a & b))
        union += int(np.count_nonzero(a | b))
        done += n
    if union == 0:
        raise UndefinedMetricError("both occupancy sets are empty on the evaluation box")
    return inter / union


class OccupancyTask(FitTask):
    def __init__(self, index: MeshIndex, cfg: TrainConfig, on_row=None):
        self.index = index
        self.cfg = cfg
        self.mode = occupancy_mode(cfg.mode)
        self.aabb = index.aabb if cfg.aabb is None else np.asarray(cfg.aabb, dtype=np.float64).reshape(2, 3)
        self.rng = np.random.default_rng(cfg.seed)
        self.on_row = on_row or (lambda row: None)
        self.stage = 0
        self.t0 = time.perf_counter()
        self.losses = []

    def init_grid(self, dims):
        grid = init_uniform(dims, 1, self.aabb, self.cfg.init_range, rng=self.rng)
        self.after_step(grid)
        return grid

    def begin_stage(self, stage, grid):
        self.stage = stage
        self.losses = []

    def loss_and_grad(self, grid, sink, iteration):
        pts, labels = sample_training_points(self.index, self.cfg.batch_points, rng=self.rng)
        x = world_to_grid(grid, pts)
        act = fetch(grid, self.mode, x)[:, 0]
        p = np.minimum(act, 1.0)
        loss, dp = bce_loss(p, labels)
        upstream = (dp * (act < 1.0))[:, None]
        fetch_backward(grid, self.mode, x, upstream, sink)
        self.losses.append(loss)
        if (iteration + 1) % self.cfg.log_every == 0:
            self.on_row(self._row(grid, iteration + 1))
        return loss

    def after_step(self, grid):
        if self.mode is FetchMode.NONE:
            np.clip(grid.values, 0.0, 1.0, out=grid.values)

    def end_stage(self, stage, grid, iteration):
        self.on_row(self._row(grid, iteration))

    def _row(self, grid, iteration):
        return {
            "stage": self.stage,
            "grid_dims": "x".join(map(str, grid.dims)),
            "iteration": iteration,
            "loss": float(np.mean(self.losses[-self.cfg.log_every:])) if self.losses else float("nan"),
            "psnr_db": None,
            "wall_seconds": time.perf_counter() - self.t0,
        }


def fit_occupancy(mesh: TriangleMesh | MeshIndex, cfg: TrainConfig, on_row=None) -> FieldGrid:
    """Fit a one-channel occupancy grid over the mesh's tight AABB.

    Mode ``relu`` predicts ``relu(interp(tanh(G)))``; mode ``none`` is a
    plain grid of occupancy values kept in [0, 1] and interpolated.
    """
    index = mesh if isinstance(mesh, MeshIndex) else MeshIndex(mesh)
    return run_progressive(OccupancyTask(index, cfg, on_row), cfg.schedule(), cfg)


def render_occupancy_depth(grid: FieldGrid, mode: FetchMode, pose: CameraPose, settings: RenderSettings):
    """First-hit depth of the 0.5 iso-level along each pixel ray.

    Returns ``(depth, t_near, t_far)`` images; misses have depth ``inf``.
    """
    if grid.ndim != 3:
        raise InvalidArgumentError("depth rendering needs a 3D grid")
    o, d, tn, tf, hit = generate_rays(pose, grid.aabb)
    n = settings.samples_per_ray
    depth = np.full(len(o), np.inf)
    rows = np.flatnonzero(hit)
    for start in range(0, len(rows), 4096):
        r = rows[start:start + 4096]
        dt = (tf[r] - tn[r]) / n
        t = tn[r, None] + (np.arange(n) + 0.5)[None] * dt[:, None]
        pts = o[r, None, :] + t[..., None] * d[r, None, :]
        occ = predict(grid, mode, pts)[..., 0]
        inside = occ >= THRESHOLD
        first = inside.argmax(axis=1)
        found = inside[np.arange(len(r)), first]
        depth[r[found]] = t[found, first[found]]
    shape = (pose.H, pose.W)
    return depth.reshape(shape), tn.reshape(shape), np.where(hit, tf, np.nan).reshape(shape)

