import math

import numpy as np
import pytest

from relufields.errors import InvalidArgumentError, UndefinedMetricError
from relufields.field import FetchMode, FieldGrid
from relufields.mesh import MeshIndex, TriangleMesh, point_in_mesh
from relufields.occupancy import (
    bce_loss,
    box_occupancy,
    dilated_aabb,
    fit_occupancy,
    grid_occupancy,
    mesh_occupancy,
    predict,
    render_occupancy_depth,
    sample_training_points,
    sphere_occupancy,
    volumetric_iou,
)
from relufields.optim import TrainConfig
from relufields.render import CameraPose, RenderSettings
from relufields.scenes import cube_mesh, icosphere


def cube():
    return TriangleMesh(*cube_mesh())


def sphere(*args):
    return TriangleMesh(*icosphere(*args))


UNIT = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


@pytest.fixture(scope="module")
def cube_index():
    return MeshIndex(cube())


@pytest.fixture(scope="module")
def sphere_index():
    return MeshIndex(sphere(4, 0.4, (0.5, 0.5, 0.5)))


# ---------------------------------------------------------------------- mesh

def test_cube_centroid_inside(cube_index):
    assert point_in_mesh(cube_index, [0.5, 0.5, 0.5]) == 1
    assert point_in_mesh(cube(), [0.5, 0.5, 0.5]) == 1


def test_points_outside_aabb_rejected(cube_index):
    pts = np.array([[1.5, 0.5, 0.5], [-0.1, 0.5, 0.5], [0.5, 0.5, 2.0]])
    assert not cube_index.contains(pts).any()


def test_boundary_points_count_as_outside(cube_index):
    pts = np.array([[0.0, 0.5, 0.5], [1.0, 0.2, 0.3], [0.5, 0.5, 1.0]])
    assert not cube_index.contains(pts).any()


def test_icosphere_matches_analytic_sphere(sphere_index):
    pts = np.random.default_rng(0).uniform(0, 1, (10_000, 3))
    got = sphere_index.contains(pts)
    want = np.linalg.norm(pts - 0.5, axis=1) < 0.4
    assert np.mean(got == want) >= 0.999


def test_parity_independent_of_direction():
    index = MeshIndex(sphere(3, 0.4, (0.5, 0.5, 0.5)))
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, (1000, 3))
    ref = index.contains(pts)
    for _ in range(100):
        d = rng.normal(size=3)
        got = index.contains_along(pts, d)
        ok = got != -1
        assert np.array_equal(got[ok], ref[ok])


def test_lattice_points_on_faces_resolved(cube_index):
    # lattice rays hit shared edges exactly; the re-cast path must settle them
    g = np.linspace(0.05, 0.95, 15)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    assert cube_index.contains(pts).all()


def test_mesh_validation():
    c = cube()
    with pytest.raises(InvalidArgumentError):
        MeshIndex(TriangleMesh(c.vertices, c.triangles[:-1]))
    flipped = c.triangles.copy()
    flipped[0] = flipped[0, ::-1]
    with pytest.raises(InvalidArgumentError):
        MeshIndex(TriangleMesh(c.vertices, flipped))
    with pytest.raises(InvalidArgumentError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]])).validate()
    with pytest.raises(InvalidArgumentError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]])).validate()


def test_generated_meshes_oriented_outward():
    assert cube().signed_volume() == pytest.approx(1.0)
    assert sphere(3).signed_volume() > 0


# ------------------------------------------------------------------ sampling

def test_dilated_aabb():
    assert np.allclose(dilated_aabb(UNIT), [[-0.1] * 3, [1.1] * 3])


def test_sample_inside_fraction(cube_index):
    pts, labels = sample_training_points(cube_index, 20_000, seed=1)
    assert pts.shape == (20_000, 3) and labels.dtype == np.int8
    assert pts.min() >= -0.1 and pts.max() <= 1.1
    p = 1 / 1.2 ** 3
    sigma = math.sqrt(p * (1 - p) / 20_000)
    assert abs(labels.mean() - p) < 3 * sigma


def test_sample_count_validated(cube_index):
    with pytest.raises(InvalidArgumentError):
        sample_training_points(cube_index, 0)


def test_sample_seeded(cube_index):
    a = sample_training_points(cube_index, 100, seed=4)
    b = sample_training_points(cube_index, 100, seed=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ----------------------------------------------------------------------- bce

def test_bce_half_is_ln2():
    loss, _ = bce_loss(np.array([0.5]), np.array([1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_bce_certain_prediction_near_zero():
    loss, grad = bce_loss(np.array([1.0]), np.array([1]))
    assert 0 <= loss <= 1.1e-7
    assert np.isfinite(grad).all()


def test_bce_gradient_finite_difference():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.1, 0.9, 50)
    y = rng.integers(0, 2, 50)
    _, grad = bce_loss(p, y)
    h = 1e-6
    for i in range(50):
        e = np.zeros(50)
        e[i] = h
        fd = (bce_loss(p + e, y)[0] - bce_loss(p - e, y)[0]) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-6 * max(1.0, abs(grad[i]))


def test_bce_gradient_sign():
    _, g = bce_loss(np.array([0.3, 0.3]), np.array([1, 0]))
    assert g[0] < 0 < g[1]


# ----------------------------------------------------------------------- iou

def test_iou_identity_and_disjoint():
    s = sphere_occupancy([0.5, 0.5, 0.5], 0.3)
    assert volumetric_iou(s, s, UNIT, 50_000) == 1.0
    a = box_occupancy([0, 0, 0], [0.4, 1, 1])
    b = box_occupancy([0.6, 0, 0], [1, 1, 1])
    assert volumetric_iou(a, b, UNIT, 50_000) == 0.0


def test_iou_nested_boxes():
    outer = box_occupancy([0, 0, 0], [1, 1, 1])
    inner = box_occupancy([0, 0, 0], [0.5, 0.5, 0.5])
    assert volumetric_iou(outer, inner, UNIT, 200_000) == pytest.approx(0.125, abs=0.005)


def test_iou_symmetric():
    a = sphere_occupancy([0.4, 0.5, 0.5], 0.3)
    b = box_occupancy([0.3, 0.3, 0.3], [0.9, 0.8, 0.7])
    assert volumetric_iou(a, b, UNIT, 50_000) == volumetric_iou(b, a, UNIT, 50_000)


def test_iou_undefined_for_empty_union():
    empty = box_occupancy([2, 2, 2], [3, 3, 3])
    with pytest.raises(UndefinedMetricError):
        volumetric_iou(empty, empty, UNIT, 10_000)


# --------------------------------------------------------------------- depth

def test_depth_empty_field_all_misses():
    grid = FieldGrid(np.zeros((4, 4, 4, 1)), UNIT.copy())
    pose = CameraPose.look_at([2.5, 0.5, 0.5], [0.5, 0.5, 0.5], 8, 8, 8.0)
    depth, tn, tf = render_occupancy_depth(grid, FetchMode.NONE, pose, RenderSettings(32))
    assert np.isinf(depth).all()


def test_depth_full_field_hits_first_sample():
    grid = FieldGrid(np.ones((4, 4, 4, 1)), UNIT.copy())
    pose = CameraPose.look_at([2.5, 0.5, 0.5], [0.5, 0.5, 0.5], 8, 8, 8.0)
    depth, tn, tf = render_occupancy_depth(grid, FetchMode.NONE, pose, RenderSettings(64))
    hit = np.isfinite(depth)
    assert hit.any()
    step = (tf - tn) / 64
    assert np.allclose(depth[hit], tn[hit] + 0.5 * step[hit])


def test_depth_of_sphere_within_two_steps():
    n = 32
    c = (np.arange(n) + 0.0) / (n - 1)
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1)
    v = (np.linalg.norm(pts - 0.5, axis=-1) < 0.3).astype(float)[..., None]
    grid = FieldGrid(v, UNIT.copy())
    pose = CameraPose.look_at([2.5, 0.5, 0.5], [0.5, 0.5, 0.5], 1, 1, 1.0)
    depth, tn, tf = render_occupancy_depth(grid, FetchMode.NONE, pose, RenderSettings(128))
    step = (tf - tn) / 128
    assert abs(depth[0, 0] - (2.0 - 0.3)) <= 2 * step[0, 0] + 1.0 / (n - 1)


# ----------------------------------------------------------------------- fit

def test_predictions_in_unit_range():
    rng = np.random.default_rng(0)
    grid = FieldGrid(rng.normal(0, 3, (4, 4, 4, 1)), UNIT.copy())
    pts = rng.uniform(-0.5, 1.5, (1000, 3))
    for mode in (FetchMode.NONE, FetchMode.TANH_THEN_RELU):
        p = predict(grid, mode, pts)
        assert p.min() >= 0 and p.max() <= 1


def test_small_fit_recovers_sphere(sphere_index):
    rows = []
    cfg = TrainConfig(dims=(16, 16, 16), stage_iters=40, start_shrink_exponent=2, threads=1,
                      batch_points=4096, log_every=20)
    grid = fit_occupancy(sphere_index, cfg, on_row=rows.append)
    assert grid.dims == (16, 16, 16)
    iou = volumetric_iou(grid_occupancy(grid, FetchMode.TANH_THEN_RELU), mesh_occupancy(sphere_index),
                         dilated_aabb(sphere_index.aabb), 50_000)
    assert iou > 0.8
    assert all(r["psnr_db"] is None for r in rows)
    assert rows[-1]["loss"] < rows[0]["loss"]


def test_plain_fit_stays_in_unit_range(sphere_index):
    cfg = TrainConfig(dims=(8, 8, 8), stage_iters=20, start_shrink_exponent=1, threads=1,
                      batch_points=2048, mode="none")
    grid = fit_occupancy(sphere_index, cfg)
    assert grid.values.min() >= 0 and grid.values.max() <= 1
