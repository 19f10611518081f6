"""Pinhole cameras, ray sampling and emission-absorption rendering of radiance grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _raymarch
from .errors import InvalidArgumentError
from .field import FetchMode, FieldGrid, GradSink, fetch, world_to_grid
from .sh import NUM_COEFFS, eval_sh_color

RADIANCE_CHANNELS = 1 + NUM_COEFFS


@dataclass
class CameraPose:
    R: np.ndarray
    T: np.ndarray
    H: int
    W: int
    F: float

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.H, self.W = int(self.H), int(self.W)
        self.F = float(self.F)
        if self.H <= 0 or self.W <= 0 or not self.F > 0:
            raise InvalidArgumentError("H, W and F must be positive")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() >= 1e-6 or np.linalg.det(self.R) <= 0:
            raise InvalidArgumentError("R must be a proper rotation matrix")

    @classmethod
    def look_at(cls, eye, target, H, W, F, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target`` (camera -z forward, +y up)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        R = np.stack([right, true_up, -fwd], axis=1)
        return cls(R, eye, H, W, F)

    def camera_to_world(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.T
        return m


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    hit: bool


@dataclass
class RenderSettings:
    samples_per_ray: int = 256
    background: tuple = (1.0, 1.0, 1.0)
    stratified_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise InvalidArgumentError("samples_per_ray must be at least 2")


def camera_directions(pose: CameraPose, px=None) -> np.ndarray:
    """Unit world-space directions for pixel coordinates ``px`` (``(..., 2)`` as x, y).

    Without ``px`` every pixel is returned in row-major order.
    """
    if px is None:
        ys, xs = np.mgrid[0:pose.H, 0:pose.W]
        px = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    px = np.asarray(px, dtype=np.float64)
    cam = np.stack(
        [
            (px[..., 0] + 0.5 - pose.W / 2) / pose.F,
            -(px[..., 1] + 0.5 - pose.H / 2) / pose.F,
            -np.ones(px.shape[:-1]),
        ],
        axis=-1,
    )
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    return cam @ pose.R.T


def ray_aabb(origins, dirs, aabb):
    """Slab test. Returns ``(t_near, t_far, hit)`` with ``t_near`` clipped at 0."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    lo, hi = np.asarray(aabb, dtype=np.float64)
    parallel = d == 0.0
    safe = np.where(parallel, 1.0, d)
    t1 = (lo - o) / safe
    t2 = (hi - o) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    return t_near, np.where(hit, t_far, t_near), hit


def generate_ray(pose: CameraPose, px, aabb) -> Ray:
    x, y = px
    if not (0 <= x < pose.W and 0 <= y < pose.H):
        raise InvalidArgumentError(f"pixel {px} outside a {pose.W}x{pose.H} image")
    d = camera_directions(pose, np.array([x, y]))
    tn, tf, hit = ray_aabb(pose.T, d, aabb)
    return Ray(pose.T.copy(), d, float(tn), float(tf), bool(hit))


def generate_rays(pose: CameraPose, aabb):
    """All pixel rays of ``pose`` as arrays ``(origins, dirs, t_near, t_far, hit)``."""
    d = camera_directions(pose)
    o = np.broadcast_to(pose.T, d.shape).copy()
    tn, tf, hit = ray_aabb(o, d, aabb)
    return o, d, tn, tf, hit


def sample_ray(ray: Ray, settings: RenderSettings, rng: np.random.Generator | None = None):
    """Stratified depths (bin midpoints, or jittered within bins) and bin widths."""
    if not ray.hit:
        raise InvalidArgumentError("cannot sample a ray that misses the grid")
    n = settings.samples_per_ray
    dt = (ray.t_far - ray.t_near) / n
    if settings.stratified_jitter:
        rng = np.random.default_rng(settings.seed) if rng is None else rng
        off = rng.random(n)
    else:
        off = np.full(n, 0.5)
    t = ray.t_near + (np.arange(n) + off) * dt
    return t, np.full(n, dt)


def composite_ea(sigmas, colors, deltas, background, depths=None, t_far=None):
    """Front-to-back emission-absorption compositing of one ray.

    Returns ``(rgb, depth, opacity)``; depth is the expected termination
    distance with leftover transmittance placed at ``t_far``.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if np.any(sigmas < 0) or np.any(deltas < 0):
        raise InvalidArgumentError("densities and step sizes must be non-negative")
    ex = np.exp(-sigmas * deltas)
    alpha = 1.0 - ex
    trans = np.concatenate([[1.0], np.cumprod(ex)])
    weights = trans[:-1] * alpha
    t_final = trans[-1]
    rgb = weights @ colors + t_final * np.asarray(background, dtype=np.float64)
    depth = None
    if depths is not None:
        depth = float(weights @ np.asarray(depths)) + t_final * (t_far if t_far is not None else 0.0)
    return rgb, depth, 1.0 - t_final


def composite_weights(sigmas, deltas):
    """Per-sample weights ``T_i * alpha_i`` and the final transmittance."""
    ex = np.exp(-np.asarray(sigmas) * np.asarray(deltas))
    trans = np.concatenate([[1.0], np.cumprod(ex)])
    return trans[:-1] * (1.0 - ex), trans[-1]


def _check_radiance(grid: FieldGrid, mode: FetchMode):
    if grid.ndim != 3 or grid.channels != RADIANCE_CHANNELS:
        raise InvalidArgumentError(
            f"radiance grids need 3 axes and {RADIANCE_CHANNELS} channels, got {grid.values.shape}"
        )
    if mode not in (FetchMode.RELU, FetchMode.NONE):
        raise InvalidArgumentError(f"radiance density supports relu or none, not {mode}")
    if mode is FetchMode.NONE and grid.values[..., 0].min() < 0:
        raise InvalidArgumentError("mode none needs non-negative vertex densities")


class RayBatch:
    """Rays prepared for the compiled marcher."""

    def __init__(self, origins, dirs, t_near, t_far, hit):
        self.origins = np.ascontiguousarray(origins, dtype=np.float64)
        self.dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        self.t_near = np.ascontiguousarray(t_near, dtype=np.float64)
        self.t_far = np.ascontiguousarray(t_far, dtype=np.float64)
        self.hit = np.ascontiguousarray(hit, dtype=np.bool_)

    def __len__(self):
        return self.origins.shape[0]

    def take(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.t_near[idx], self.t_far[idx], self.hit[idx])

    @classmethod
    def from_pose(cls, pose: CameraPose, aabb) -> "RayBatch":
        return cls(*generate_rays(pose, aabb))


def jitter_offsets(n_rays: int, settings: RenderSettings, rng: np.random.Generator | None = None):
    if not settings.stratified_jitter:
        return np.empty((0, settings.samples_per_ray))
    rng = np.random.default_rng(settings.seed) if rng is None else rng
    return rng.random((n_rays, settings.samples_per_ray))


def march_rays(grid: FieldGrid, mode: FetchMode, rays: RayBatch, settings: RenderSettings, *,
               offsets=None, upstream=None, targets=None, grad_scale=0.0,
               sink: GradSink | None = None, threads: int = 1):
    """Render ``rays`` and optionally accumulate gradients into ``sink``.

    Returns ``(rgb, depth, opacity, loss)``. With ``targets`` the gradient is
    that of ``grad_scale/2 * sum((rgb - targets)**2)`` and ``loss`` is the
    summed squared error; with ``upstream`` it is that of ``upstream . rgb``.
    """
    _check_radiance(grid, mode)
    n = len(rays)
    if offsets is None:
        offsets = jitter_offsets(n, settings)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    vals = np.ascontiguousarray(grid.flat(), dtype=np.float64)
    dims = np.asarray(grid.dims, dtype=np.int64)
    lo = grid.aabb[0].copy()
    scale = (dims - 1) / (grid.aabb[1] - grid.aabb[0])
    bg = np.asarray(settings.background, dtype=np.float64)
    grad_mode = _raymarch.GRAD_NONE
    empty = np.zeros((0, 3))
    if targets is not None:
        grad_mode = _raymarch.GRAD_MSE
    elif upstream is not None:
        grad_mode = _raymarch.GRAD_UPSTREAM
    if grad_mode != _raymarch.GRAD_NONE and sink is None:
        sink = GradSink.like(grid)
    if sink is not None:
        sink.check_matches(grid)
        if threads == 1:
            sinks = sink.flat()[None]
        else:
            sinks = np.zeros((threads,) + sink.flat().shape)
    else:
        sinks = np.zeros((max(threads, 1), 0, grid.channels))
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    opacity = np.empty(n)
    loss = _raymarch.march(
        vals, dims, lo, scale, mode is FetchMode.RELU,
        rays.origins, rays.dirs, rays.t_near, rays.t_far, rays.hit,
        int(settings.samples_per_ray), offsets, bg, grad_mode,
        empty if upstream is None else np.ascontiguousarray(upstream, dtype=np.float64).reshape(n, 3),
        empty if targets is None else np.ascontiguousarray(targets, dtype=np.float64).reshape(n, 3),
        float(grad_scale), sinks, rgb, depth, opacity,
    )
    if sink is not None and threads > 1:
        flat = sink.flat()
        for part in sinks:
            flat += part
    return rgb, depth, opacity, loss


def render_image(grid: FieldGrid, pose: CameraPose, settings: RenderSettings,
                 mode: FetchMode = FetchMode.RELU, threads: int = 1, with_depth: bool = False):
    """Render an ``H x W x 3`` image (plus depth and opacity maps if asked)."""
    rays = RayBatch.from_pose(pose, grid.aabb)
    rgb, depth, opacity, _ = march_rays(grid, mode, rays, settings, threads=threads)
    image = rgb.reshape(pose.H, pose.W, 3)
    if with_depth:
        return image, depth.reshape(pose.H, pose.W), opacity.reshape(pose.H, pose.W)
    return image


def render_backward(grid: FieldGrid, pose: CameraPose, settings: RenderSettings, upstream,
                    sink: GradSink, mode: FetchMode = FetchMode.RELU, threads: int = 1) -> None:
    """Accumulate d(upstream . render_image) / d(grid values) into ``sink``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (pose.H, pose.W, 3):
        raise InvalidArgumentError(f"upstream must have shape {(pose.H, pose.W, 3)}")
    sink.check_matches(grid)
    rays = RayBatch.from_pose(pose, grid.aabb)
    march_rays(grid, mode, rays, settings, upstream=upstream.reshape(-1, 3), sink=sink, threads=threads)


def photometric_loss(rendered, target):
    """Mean squared error and its gradient w.r.t. ``rendered``."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def render_rays_reference(grid: FieldGrid, mode: FetchMode, rays: RayBatch, settings: RenderSettings,
                          offsets=None):
    """Slow per-ray renderer built from :func:`fetch`, SH evaluation and
    :func:`composite_ea`; used to cross-check the compiled marcher."""
    _check_radiance(grid, mode)
    n_s = settings.samples_per_ray
    out = np.empty((len(rays), 3))
    for r in range(len(rays)):
        if not rays.hit[r]:
            out[r] = settings.background
            continue
        dt = (rays.t_far[r] - rays.t_near[r]) / n_s
        off = offsets[r] if offsets is not None and len(offsets) else np.full(n_s, 0.5)
        t = rays.t_near[r] + (np.arange(n_s) + off) * dt
        pts = rays.origins[r] + t[:, None] * rays.dirs[r]
        feats = fetch(grid, FetchMode.NONE, world_to_grid(grid, pts))
        sigma = feats[:, 0]
        if mode is FetchMode.RELU:
            sigma = np.maximum(sigma, 0.0)
        colors = eval_sh_color(feats[:, 1:], np.broadcast_to(rays.dirs[r], (n_s, 3)))
        out[r] = composite_ea(sigma, colors, np.full(n_s, dt), settings.background)[0]
    return out
