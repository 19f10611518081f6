"""Fitting a raster image into a 2D grid, and PSNR."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .field import FetchMode, FieldGrid, activate, activation_slope, init_uniform, interpolation_matrix, world_to_grid
from .optim import FitTask, TrainConfig, run_progressive


@dataclass
class RasterImage:
    values: np.ndarray  # (height, width, channels)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[..., None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise InvalidArgumentError(f"expected an HxW or HxWx{{1,3}} image, got {v.shape}")
        if v.size == 0 or v.min() < 0.0 or v.max() > 1.0:
            raise InvalidArgumentError("image values must lie in [0, 1]")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for signals in [0, 1]; inf if identical."""
    a = a.values if isinstance(a, RasterImage) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, RasterImage) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def image_mode(cfg: TrainConfig) -> FetchMode:
    return FetchMode.RELU_CLAMP01 if cfg.mode == "relu" else FetchMode.NONE


def image_aabb(height: int, width: int) -> np.ndarray:
    # world units are pixels; axis 0 is the row
    return np.array([[0.0, 0.0], [float(height), float(width)]])


def pixel_centers(height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([rows.ravel() + 0.5, cols.ravel() + 0.5], axis=-1)


def reconstruct(grid: FieldGrid, mode: FetchMode, height: int, width: int) -> np.ndarray:
    """Evaluate a fitted field at every pixel center."""
    m = interpolation_matrix(grid, world_to_grid(grid, pixel_centers(height, width)))
    return activate(m @ grid.flat(), mode).reshape(height, width, grid.channels)


class ImageTask(FitTask):
    def __init__(self, target: RasterImage, cfg: TrainConfig, on_row=None):
        self.target = target
        self.cfg = cfg
        self.mode = image_mode(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.aabb = image_aabb(target.height, target.width)
        self.flat_target = target.values.reshape(-1, target.channels)
        self.on_row = on_row or (lambda row: None)
        self.matrix = None
        self.stage = 0
        self.t0 = time.perf_counter()
        self.last_loss = float("nan")

    def init_grid(self, dims):
        grid = init_uniform(dims, self.target.channels, self.aabb, self.cfg.init_range, rng=self.rng)
        self.after_step(grid)
        return grid

    def begin_stage(self, stage, grid):
        self.stage = stage
        pts = world_to_grid(grid, pixel_centers(self.target.height, self.target.width))
        self.matrix = interpolation_matrix(grid, pts)
        self.matrix_t = self.matrix.T.tocsr()

    def loss_and_grad(self, grid, sink, iteration):
        pre = self.matrix @ grid.flat()
        diff = activate(pre, self.mode) - self.flat_target
        loss = float(np.mean(diff * diff))
        g = (2.0 / diff.size) * diff * activation_slope(pre, self.mode)
        sink.flat()[:] += self.matrix_t @ g
        self.last_loss = loss
        if (iteration + 1) % self.cfg.log_every == 0:
            self.on_row(self._row(grid, iteration + 1, loss))
        return loss

    def after_step(self, grid):
        if self.mode is FetchMode.NONE:
            np.clip(grid.values, 0.0, 1.0, out=grid.values)

    def end_stage(self, stage, grid, iteration):
        self.on_row(self._row(grid, iteration, self.last_loss))

    def _row(self, grid, iteration, loss):
        return {
            "stage": self.stage,
            "grid_dims": "x".join(map(str, grid.dims)),
            "iteration": iteration,
            "loss": loss,
            "psnr_db": 10.0 * np.log10(1.0 / loss) if loss > 0 else float("inf"),
            "wall_seconds": time.perf_counter() - self.t0,
        }


def check_grid_fits(target: RasterImage, dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2:
        raise InvalidArgumentError("image grids are 2D")
    if dims[0] > target.height or dims[1] > target.width:
        raise InvalidArgumentError(f"grid {dims} is larger than the {target.height}x{target.width} image")
    return dims


def fit_image(target, final_dims, cfg: TrainConfig, on_row=None) -> FieldGrid:
    """Fit ``target`` into a 2D grid of ``final_dims`` vertices.

    Mode ``relu`` clips interpolated values to [0, 1] (ReLU then a hard upper
    clip); mode ``none`` is a plain bilinear grid whose vertex values are kept
    inside [0, 1].
    """
    if not isinstance(target, RasterImage):
        target = RasterImage(target)
    final_dims = check_grid_fits(target, final_dims)
    cfg = cfg.replace(dims=final_dims)
    return run_progressive(ImageTask(target, cfg, on_row), cfg.schedule(), cfg)
