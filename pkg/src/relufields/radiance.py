"""Radiance-field reconstruction from posed images."""

from __future__ import annotations

import logging
import time

import numpy as np

from .field import FetchMode, FieldGrid, GradSink, init_uniform
from .imagefit import psnr
from .optim import FitTask, TrainConfig, run_progressive
from .render import RADIANCE_CHANNELS, RayBatch, RenderSettings, march_rays, render_image

log = logging.getLogger(__name__)


def fetch_mode(cfg: TrainConfig) -> FetchMode:
    return FetchMode.RELU if cfg.mode == "relu" else FetchMode.NONE


def stage_samples(cfg: TrainConfig, stage_dims) -> int:
    """Samples per ray at a stage, proportional to its resolution."""
    full = cfg.samples_per_ray or 2 * max(cfg.dims)
    return max(2, int(round(full * max(stage_dims) / max(cfg.dims))))


def project_density(grid: FieldGrid) -> None:
    """Plain grids keep physically valid (non-negative) vertex densities."""
    np.maximum(grid.values[..., 0], 0.0, out=grid.values[..., 0])


class RadianceTask(FitTask):
    def __init__(self, images, poses, cfg: TrainConfig, aabb, val_images=(), val_poses=(), on_row=None,
                 on_stage=None):
        self.cfg = cfg
        self.on_stage = on_stage or (lambda stage, grid: None)
        self.aabb = np.asarray(aabb, dtype=np.float64)
        self.mode = fetch_mode(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        parts = [RayBatch.from_pose(p, self.aabb) for p in poses]
        self.rays = RayBatch(*(np.concatenate([getattr(b, k) for b in parts])
                               for k in ("origins", "dirs", "t_near", "t_far", "hit")))
        self.targets = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, 3) for im in images])
        self.val_images = list(val_images)
        self.val_poses = list(val_poses)
        self.on_row = on_row or (lambda row: None)
        self.settings = None
        self.stage = 0
        self.t0 = time.perf_counter()
        self.losses = []

    def init_grid(self, dims):
        grid = init_uniform(dims, RADIANCE_CHANNELS, self.aabb, self.cfg.init_range, rng=self.rng)
        if self.mode is FetchMode.NONE:
            project_density(grid)
        return grid

    def render_settings(self, dims, jitter=None) -> RenderSettings:
        return RenderSettings(
            samples_per_ray=stage_samples(self.cfg, dims),
            background=tuple(self.cfg.background),
            stratified_jitter=self.cfg.stratified_jitter if jitter is None else jitter,
            seed=self.cfg.seed,
        )

    def begin_stage(self, stage, grid):
        self.stage = stage
        self.settings = self.render_settings(grid.dims)
        self.losses = []

    def loss_and_grad(self, grid, sink, iteration):
        n = min(self.cfg.batch_rays, len(self.rays))
        idx = self.rng.integers(0, len(self.rays), n)
        s = self.settings.samples_per_ray
        offsets = self.rng.random((n, s)) if self.settings.stratified_jitter else None
        count = 3 * n
        _, _, _, sse = march_rays(
            grid, self.mode, self.rays.take(idx), self.settings, offsets=offsets,
            targets=self.targets[idx], grad_scale=2.0 / count, sink=sink, threads=self.cfg.threads,
        )
        loss = sse / count
        self.losses.append(loss)
        if (iteration + 1) % self.cfg.log_every == 0:
            self.on_row(self._row(grid, iteration + 1, float(np.mean(self.losses[-self.cfg.log_every:])), None))
        return loss

    def after_step(self, grid):
        if self.mode is FetchMode.NONE:
            project_density(grid)

    def end_stage(self, stage, grid, iteration):
        val = evaluate_psnr(grid, self.mode, self.val_images, self.val_poses, self.cfg) if self.val_poses else None
        loss = float(np.mean(self.losses[-self.cfg.log_every:])) if self.losses else float("nan")
        log.info("stage %d done: loss %.6f val psnr %s", stage, loss, val)
        self.on_row(self._row(grid, iteration, loss, val))
        self.on_stage(stage, grid)

    def _row(self, grid, iteration, loss, val_psnr):
        return {
            "stage": self.stage,
            "grid_dims": "x".join(map(str, grid.dims)),
            "iteration": iteration,
            "loss": loss,
            "psnr_db": val_psnr,
            "wall_seconds": time.perf_counter() - self.t0,
        }


def evaluation_settings(cfg: TrainConfig, dims) -> RenderSettings:
    return RenderSettings(stage_samples(cfg, dims), tuple(cfg.background), False, cfg.seed)


def render_views(grid, mode, poses, cfg: TrainConfig):
    settings = evaluation_settings(cfg, grid.dims)
    return [render_image(grid, p, settings, mode, threads=cfg.threads) for p in poses]


def evaluate_psnr(grid, mode, images, poses, cfg: TrainConfig) -> float:
    """Mean PSNR over held-out views, rendered without jitter."""
    renders = render_views(grid, mode, poses, cfg)
    return float(np.mean([psnr(r, np.asarray(im)) for r, im in zip(renders, images)]))


def fit_radiance(images, poses, cfg: TrainConfig, aabb, val_images=(), val_poses=(), on_row=None,
                 on_stage=None) -> FieldGrid:
    """Fit a 28-channel radiance grid to posed RGB images.

    ``on_row`` receives metric rows; ``on_stage(stage, grid)`` is called after
    each resolution stage (used for partial checkpoints).
    """
    task = RadianceTask(images, poses, cfg, aabb, val_images, val_poses, on_row, on_stage)
    return run_progressive(task, cfg.schedule(), cfg)
