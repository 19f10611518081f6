"""Closed triangle meshes and a ray-parity inside/outside test."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidArgumentError, NumericalDegeneracyError

BARY_TOL = 1e-9
MAX_RETRIES = 8

AMBIGUOUS = -1


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def aabb(self) -> np.ndarray:
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def validate(self) -> "TriangleMesh":
        """Check indices, non-degenerate faces, watertightness and orientation."""
        t = self.triangles
        if len(t) == 0:
            raise InvalidArgumentError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(self.vertices):
            raise InvalidArgumentError("triangle index out of range")
        extent = np.ptp(self.vertices, axis=0).max()
        if np.any(self.areas() <= 1e-14 * extent * extent):
            raise InvalidArgumentError("mesh has degenerate (zero-area) triangles")
        directed = Counter()
        for a, b, c in t.tolist():
            directed[(a, b)] += 1
            directed[(b, c)] += 1
            directed[(c, a)] += 1
        for (a, b), n in directed.items():
            if n != 1:
                raise InvalidArgumentError(f"edge {a}-{b} is used twice in the same direction")
            if directed.get((b, a), 0) != 1:
                raise InvalidArgumentError(f"edge {a}-{b} is not shared by exactly two triangles")
        return self


@njit(cache=True)
def _hit(p, d, a, e1, e2, scale):
    """0 miss, 1 crossing ahead of p, 2 ambiguous, 3 p on the triangle."""
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    tx, ty, tz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    nx = e1[1] * e2[2] - e1[2] * e2[1]
    ny = e1[2] * e2[0] - e1[0] * e2[2]
    nz = e1[0] * e2[1] - e1[1] * e2[0]
    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
    if abs(det) <= 1e-12 * nn:
        # ray parallel to the plane: only a problem when it lies in it
        if abs(tx * nx + ty * ny + tz * nz) <= 1e-12 * nn * scale:
            return 2
        return 0
    inv = 1.0 / det
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -BARY_TOL or u > 1.0 + BARY_TOL:
        return 0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < -BARY_TOL or u + v > 1.0 + BARY_TOL:
        return 0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if abs(t) <= 1e-12 * scale:
        return 3
    if t < 0.0:
        return 0
    if u < BARY_TOL or v < BARY_TOL or 1.0 - u - v < BARY_TOL:
        return 2
    return 1


@njit(cache=True)
def _parity_binned(points, d, axis_u, axis_v, a, e1, e2, scale, lo_uv, inv_bin, n_bins,
                   bin_start, bin_items, out):
    for i in range(points.shape[0]):
        p = points[i]
        pu = p[0] * axis_u[0] + p[1] * axis_u[1] + p[2] * axis_u[2]
        pv = p[0] * axis_v[0] + p[1] * axis_v[1] + p[2] * axis_v[2]
        bu = int((pu - lo_uv[0]) * inv_bin[0])
        bv = int((pv - lo_uv[1]) * inv_bin[1])
        if bu < 0 or bv < 0 or bu >= n_bins or bv >= n_bins:
            out[i] = 0
            continue
        b = bu * n_bins + bv
        count = 0
        label = 0
        for k in range(bin_start[b], bin_start[b + 1]):
            tri = bin_items[k]
            h = _hit(p, d, a[tri], e1[tri], e2[tri], scale)
            if h == 2:
                label = AMBIGUOUS
                break
            if h == 3:
                count = 0
                break
            count += h
        out[i] = label if label == AMBIGUOUS else count % 2


@njit(cache=True)
def _parity_brute(points, d, a, e1, e2, scale, out):
    for i in range(points.shape[0]):
        count = 0
        label = 0
        for tri in range(a.shape[0]):
            h = _hit(points[i], d, a[tri], e1[tri], e2[tri], scale)
            if h == 2:
                label = AMBIGUOUS
                break
            if h == 3:
                count = 0
                break
            count += h
        out[i] = label if label == AMBIGUOUS else count % 2


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=3)
    return d / np.linalg.norm(d)


class MeshIndex:
    """Inside/outside queries against a watertight mesh.

    A ray is cast from each query point along one fixed pseudorandom
    direction and crossings are counted; triangles are pre-binned on the
    plane orthogonal to that direction so each query only visits triangles
    whose shadow covers it. Queries landing within ``BARY_TOL`` of an edge
    are re-cast along fresh directions.
    """

    def __init__(self, mesh: TriangleMesh, seed: int = 7, validate: bool = True):
        if validate:
            mesh.validate()
        self.mesh = mesh
        self.seed = seed
        v, t = mesh.vertices, mesh.triangles
        self.a = np.ascontiguousarray(v[t[:, 0]])
        self.e1 = np.ascontiguousarray(v[t[:, 1]] - self.a)
        self.e2 = np.ascontiguousarray(v[t[:, 2]] - self.a)
        self.aabb = mesh.aabb
        self.scale = float(np.ptp(v, axis=0).max())
        self.direction = _random_direction(np.random.default_rng(seed))
        self._build_bins()

    def _build_bins(self):
        d = self.direction
        helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(d, helper)
        u /= np.linalg.norm(u)
        self.axis_u, self.axis_v = u, np.cross(d, u)
        tri_pts = self.mesh.vertices[self.mesh.triangles]  # (T, 3, 3)
        pu = tri_pts @ self.axis_u
        pv = tri_pts @ self.axis_v
        n_bins = max(1, int(np.sqrt(len(self.mesh.triangles))))
        pad = 1e-9 * self.scale
        lo = np.array([pu.min(), pv.min()]) - pad
        hi = np.array([pu.max(), pv.max()]) + pad
        inv_bin = n_bins / (hi - lo)
        ulo = np.clip(((pu.min(axis=1) - pad - lo[0]) * inv_bin[0]).astype(np.int64), 0, n_bins - 1)
        uhi = np.clip(((pu.max(axis=1) + pad - lo[0]) * inv_bin[0]).astype(np.int64), 0, n_bins - 1)
        vlo = np.clip(((pv.min(axis=1) - pad - lo[1]) * inv_bin[1]).astype(np.int64), 0, n_bins - 1)
        vhi = np.clip(((pv.max(axis=1) + pad - lo[1]) * inv_bin[1]).astype(np.int64), 0, n_bins - 1)
        buckets = [[] for _ in range(n_bins * n_bins)]
        for tri in range(len(pu)):
            for bu in range(ulo[tri], uhi[tri] + 1):
                for bv in range(vlo[tri], vhi[tri] + 1):
                    buckets[bu * n_bins + bv].append(tri)
        self.bin_start = np.zeros(n_bins * n_bins + 1, dtype=np.int64)
        self.bin_start[1:] = np.cumsum([len(b) for b in buckets])
        self.bin_items = np.array([t for b in buckets for t in b], dtype=np.int64)
        self.lo_uv, self.inv_bin, self.n_bins = lo, inv_bin, n_bins

    def contains(self, points) -> np.ndarray:
        """1 for points strictly inside, 0 otherwise (``int8`` array)."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        out = np.zeros(len(pts), dtype=np.int8)
        lo, hi = self.aabb
        inside_box = np.all((pts > lo) & (pts < hi), axis=1)
        cand = np.flatnonzero(inside_box)
        if len(cand) == 0:
            return out
        labels = np.empty(len(cand), dtype=np.int8)
        _parity_binned(pts[cand], self.direction, self.axis_u, self.axis_v, self.a, self.e1, self.e2,
                       self.scale, self.lo_uv, self.inv_bin, self.n_bins, self.bin_start, self.bin_items,
                       labels)
        pending = np.flatnonzero(labels == AMBIGUOUS)
        rng = np.random.default_rng(self.seed + 1)
        for _ in range(MAX_RETRIES):
            if len(pending) == 0:
                break
            sub = np.empty(len(pending), dtype=np.int8)
            _parity_brute(np.ascontiguousarray(pts[cand[pending]]), _random_direction(rng),
                          self.a, self.e1, self.e2, self.scale, sub)
            labels[pending] = sub
            pending = pending[sub == AMBIGUOUS]
        if len(pending):
            raise NumericalDegeneracyError(
                f"{len(pending)} point(s) stayed ambiguous after {MAX_RETRIES} re-casts, e.g. {pts[cand[pending[0]]]}"
            )
        out[cand] = labels
        return out

    def contains_along(self, points, direction) -> np.ndarray:
        """Parity along an explicit direction; ambiguous points come back as -1."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        d = np.asarray(direction, dtype=np.float64)
        out = np.empty(len(pts), dtype=np.int8)
        _parity_brute(pts, d / np.linalg.norm(d), self.a, self.e1, self.e2, self.scale, out)
        return out


def point_in_mesh(mesh: TriangleMesh | MeshIndex, x) -> int:
    index = mesh if isinstance(mesh, MeshIndex) else MeshIndex(mesh)
    return int(index.contains(np.asarray(x, dtype=np.float64)[None])[0])
