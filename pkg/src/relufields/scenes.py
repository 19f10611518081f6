"""Procedural test content: the three-box desk scene, a flat-shaded raster,
and closed meshes (cube, icosphere)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldGrid, grid_to_world
from .render import RADIANCE_CHANNELS, CameraPose
from .sh import SH_C0

DESK_AABB = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])

# (min corner, max corner, rgb)
DESK_BOXES = (
    ((-0.75, -0.65, -0.8), (-0.15, 0.05, -0.1), (0.85, 0.15, 0.15)),
    ((0.1, -0.7, -0.8), (0.7, -0.1, 0.35), (0.15, 0.75, 0.25)),
    ((-0.45, 0.2, -0.8), (0.55, 0.75, -0.4), (0.2, 0.3, 0.9)),
)


def box_sdf(points, lo, hi) -> np.ndarray:
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    c = (lo + hi) / 2
    h = (hi - lo) / 2
    q = np.abs(points - c) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def desk_grid(res: int = 64, peak_density: float = 40.0) -> FieldGrid:
    """Ground-truth radiance grid for the desk scene.

    Pre-activation density is a clipped, scaled negative signed distance, so
    the ReLU zero crossing sits on the box faces. Colors are constant per box
    via the degree-0 SH coefficient of the nearest box.
    """
    idx = np.stack(np.meshgrid(*[np.arange(res)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.zeros((res ** 3, RADIANCE_CHANNELS))
    probe = FieldGrid(np.zeros((res, res, res, 1)), DESK_AABB)
    pts = grid_to_world(probe, idx)
    cell = probe.cell_size()[0]
    sdfs = np.stack([box_sdf(pts, lo, hi) for lo, hi, _ in DESK_BOXES], axis=-1)
    nearest = sdfs.argmin(axis=-1)
    sdf = sdfs.min(axis=-1)
    values[:, 0] = peak_density * np.clip(-sdf / cell, -1.0, 1.0)
    colors = np.array([rgb for _, _, rgb in DESK_BOXES])[nearest]
    for c in range(3):
        values[:, 1 + 9 * c] = colors[:, c] / SH_C0
    return FieldGrid(values.reshape(res, res, res, RADIANCE_CHANNELS), DESK_AABB.copy())


def orbit_poses(n: int, radius: float = 3.2, size: int = 128, fov_deg: float = 50.0,
                elevation=(10.0, 65.0), phase: float = 0.0, center=(0.0, 0.0, 0.0),
                target=(0.0, 0.0, -0.3)) -> list[CameraPose]:
    """``n`` cameras on a golden-angle spiral around ``center`` over a band
    of elevations, all looking at ``target``."""
    F = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    poses = []
    for i in range(n):
        el = np.radians(elevation[0] + (elevation[1] - elevation[0]) * (i + 0.5) / n)
        az = phase + i * golden
        unit = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        eye = np.asarray(center, dtype=np.float64) + radius * unit
        poses.append(CameraPose.look_at(eye, target, size, size, F))
    return poses


@dataclass
class DeskScene:
    grid: FieldGrid
    train: list
    val: list
    test: list


def desk_scene(res: int = 64, size: int = 128, n_train: int = 20, n_val: int = 2, n_test: int = 5) -> DeskScene:
    return DeskScene(
        desk_grid(res),
        orbit_poses(n_train, size=size, elevation=(15.0, 55.0)),
        orbit_poses(n_val, size=size, phase=1.1, elevation=(20.0, 50.0)),
        orbit_poses(n_test, size=size, phase=0.37, elevation=(20.0, 50.0)),
    )


def shapes_image(size: int = 512) -> np.ndarray:
    """Flat-shaded RGB raster with straight and curved sharp edges.

    Colors are saturated, so every channel is binary (0 or 1) and each edge
    is a jump between the two ends of the valid range.
    """
    ys, xs = (np.mgrid[0:size, 0:size] + 0.5) / size
    img = np.ones((size, size, 3))
    disk = (xs - 0.32) ** 2 + (ys - 0.34) ** 2 < 0.2 ** 2
    img[disk] = (1.0, 0.0, 0.0)
    rect = (np.abs((xs - 0.7) * 0.8 + (ys - 0.68) * 0.6) < 0.17) & (np.abs(-(xs - 0.7) * 0.6 + (ys - 0.68) * 0.8) < 0.12)
    img[rect] = (0.0, 0.0, 1.0)
    tri = (ys > 0.55) & (ys < 0.95) & (xs > 0.08 + 0.5 * (0.95 - ys)) & (xs < 0.48 - 0.5 * (0.95 - ys))
    img[tri] = (0.0, 1.0, 0.0)
    band = np.abs(xs + ys - 1.05) < 0.035
    img[band & ~disk & ~rect & ~tri] = (0.0, 0.0, 0.0)
    ring = np.abs(np.hypot(xs - 0.78, ys - 0.2) - 0.12) < 0.03
    img[ring] = (1.0, 1.0, 0.0)
    return img


def cube_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # outward-facing, counter-clockwise
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return corners, np.array(tris, dtype=np.int64)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
             (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
             (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return v, np.array(faces, dtype=np.int64)
