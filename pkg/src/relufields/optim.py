"""Adam over grid values and the coarse-to-fine training schedule."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InvalidArgumentError
from .field import FieldGrid, GradSink, upsample_trilinear

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    step_count: int = 0
    lr: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_grid(cls, grid: FieldGrid, lr=0.03, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        shape = grid.values.shape
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, beta1, beta2, eps)


@njit(cache=True)
def _adam_kernel(p, g, m1, m2, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        gi = g[i]
        m = beta1 * m1[i] + (1.0 - beta1) * gi
        v = beta2 * m2[i] + (1.0 - beta2) * gi * gi
        m1[i] = m
        m2[i] = v
        p[i] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def adam_step(grid: FieldGrid, grads: GradSink, state: AdamState) -> None:
    """One bias-corrected Adam update of ``grid`` in place."""
    grads.check_matches(grid)
    if state.m1.shape != grid.values.shape or state.m2.shape != grid.values.shape:
        raise InvalidArgumentError("Adam moment buffers do not match the grid shape")
    if not grid.values.flags.c_contiguous or grid.values.dtype != np.float64:
        grid.values = np.ascontiguousarray(grid.values, dtype=np.float64)
    state.step_count += 1
    t = state.step_count
    _adam_kernel(
        grid.values.reshape(-1),
        np.ascontiguousarray(grads.values).reshape(-1),
        state.m1.reshape(-1),
        state.m2.reshape(-1),
        state.lr, state.beta1, state.beta2, state.eps,
        1.0 - state.beta1 ** t,
        1.0 - state.beta2 ** t,
    )


@dataclass
class ProgressiveSchedule:
    final_dims: tuple
    iters_per_stage: int
    start_shrink_exponent: int = 4

    def __post_init__(self):
        self.final_dims = tuple(int(d) for d in self.final_dims)
        if self.iters_per_stage <= 0:
            raise InvalidArgumentError("iters_per_stage must be positive")
        if self.start_shrink_exponent < 0:
            raise InvalidArgumentError("start_shrink_exponent must be non-negative")
        div = 2 ** self.start_shrink_exponent
        for d in self.final_dims:
            if d % div:
                raise InvalidArgumentError(f"final dims {self.final_dims} not divisible by {div}")
            if d // div < 2:
                raise InvalidArgumentError(
                    f"start resolution {d // div} below 2 for final dims {self.final_dims}"
                )

    def stage_dims(self) -> list[tuple]:
        e = self.start_shrink_exponent
        return [tuple(d // 2 ** (e - s) for d in self.final_dims) for s in range(e + 1)]

    @property
    def num_stages(self) -> int:
        return self.start_shrink_exponent + 1

    @property
    def total_iterations(self) -> int:
        return self.num_stages * self.iters_per_stage


@dataclass
class TrainConfig:
    dims: tuple = (64, 64, 64)
    mode: str = "relu"
    progressive: bool = True
    stage_iters: int = 2000
    start_shrink_exponent: int = 4
    lr: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_range: tuple = (-0.1, 0.1)
    samples_per_ray: int | None = None
    batch_rays: int = 4096
    batch_points: int = 32768
    aabb: tuple | None = None
    background: tuple = (1.0, 1.0, 1.0)
    stratified_jitter: bool = False
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in ("relu", "none"):
            raise InvalidArgumentError(f"mode must be 'relu' or 'none', got {self.mode!r}")
        if self.lr <= 0:
            raise InvalidArgumentError("lr must be positive")
        if self.threads < 1:
            raise InvalidArgumentError("threads must be at least 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def schedule(self) -> ProgressiveSchedule:
        """Schedule implied by the config.

        Without progressive growing the run happens at the final resolution
        for as many iterations as the progressive schedule would take in
        total, which keeps the two settings comparable.
        """
        stages = self.start_shrink_exponent + 1
        if self.progressive:
            return ProgressiveSchedule(self.dims, self.stage_iters, self.start_shrink_exponent)
        return ProgressiveSchedule(self.dims, self.stage_iters * stages, 0)

    def adam(self, grid: FieldGrid) -> AdamState:
        return AdamState.for_grid(grid, self.lr, self.beta1, self.beta2, self.eps)


class FitTask:
    """Hooks a fitting problem exposes to :func:`run_progressive`."""

    def init_grid(self, dims: tuple) -> FieldGrid:
        raise NotImplementedError

    def begin_stage(self, stage: int, grid: FieldGrid) -> None:
        pass

    def loss_and_grad(self, grid: FieldGrid, sink: GradSink, iteration: int) -> float:
        raise NotImplementedError

    def after_step(self, grid: FieldGrid) -> None:
        pass

    def end_stage(self, stage: int, grid: FieldGrid, iteration: int) -> None:
        pass


def run_progressive(task: FitTask, schedule: ProgressiveSchedule, cfg: TrainConfig) -> FieldGrid:
    """Optimize coarse to fine, doubling resolution between stages.

    Each stage runs ``schedule.iters_per_stage`` iterations with fresh Adam
    moments at a constant learning rate.
    """
    stage_dims = schedule.stage_dims()
    grid = task.init_grid(stage_dims[0])
    iteration = 0
    for stage, dims in enumerate(stage_dims):
        if stage > 0:
            grid = upsample_trilinear(grid, 2)
        if grid.dims != dims:
            raise InvalidArgumentError(f"task produced dims {grid.dims}, expected {dims}")
        state = cfg.adam(grid)
        sink = GradSink.like(grid)
        task.begin_stage(stage, grid)
        log.info("stage %d at %s", stage, "x".join(map(str, dims)))
        for _ in range(schedule.iters_per_stage):
            sink.zero()
            task.loss_and_grad(grid, sink, iteration)
            adam_step(grid, sink, state)
            task.after_step(grid)
            iteration += 1
        task.end_stage(stage, grid, iteration)
    return grid
