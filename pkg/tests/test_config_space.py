import time

import numpy as np
import pytest

import oracles
from scancov import shapes
from scancov.config_space import (ConfigSpaceError, CuttingPlane, build_inlier_set, compute_cutting_plane,
                                  compute_inlier, is_safe_configuration, normal_covariance, safe_mask)
from scancov.geometry import TriangleMesh
from scancov.mapping import VoxelWorld


def test_cutting_plane_axis_normals():
    N = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]])
    assert np.allclose(normal_covariance(N), np.diag([0.5, 0.5, 0.0]))
    plane = compute_cutting_plane(np.zeros((4, 3)), N)
    assert np.allclose(plane.n_opt, [0, 0, 1])
    assert not plane.degenerate


def test_cutting_plane_degenerate():
    N = np.tile([0.0, 0, 1], (5, 1))
    plane = compute_cutting_plane(np.random.default_rng(0).normal(size=(5, 3)), N)
    assert plane.degenerate
    assert abs(plane.n_opt @ [0, 0, 1]) < 1e-12


def test_cutting_plane_minimises_spread(rng):
    for _ in range(5):
        N = rng.normal(size=(16, 3))
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        C = normal_covariance(N)
        n = compute_cutting_plane(np.zeros((16, 3)), N).n_opt
        q = rng.normal(size=(1000, 3))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        assert n @ C @ n <= np.einsum("ij,jk,ik->i", q, C, q).min() + 1e-12


def test_cutting_plane_iterative_reaches_fixed_point(rng):
    sph = shapes.icosphere(1.0, 2)
    P, N = sph.vertices[:40], sph.vertex_normals[:40]
    plane = compute_cutting_plane(P, N, iterations=10, rng=3)
    assert isinstance(plane, CuttingPlane)
    assert np.isclose(np.linalg.norm(plane.n_opt), 1.0)


def test_inlier_sphere_lines_meet_at_centre():
    sph = shapes.icosphere(2.0, 1)
    V = sph.vertices[:12] + [1.0, -2.0, 0.5]
    plane = CuttingPlane(np.zeros(3), -sph.vertices[:12] / 2.0, V)
    x, deficient = compute_inlier(plane)
    assert np.allclose(x, [1.0, -2.0, 0.5], atol=1e-12)
    assert not deficient


def test_inlier_cube_face_centres():
    P = np.array([[1, .5, .5], [0, .5, .5], [.5, 1, .5], [.5, 0, .5], [.5, .5, 1], [.5, .5, 0]])
    N = -np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    x, deficient = compute_inlier(CuttingPlane(np.zeros(3), N, P.astype(float)))
    assert np.allclose(x, 0.5, atol=1e-12) and not deficient


def test_inlier_parallel_lines_rank_deficient():
    P = np.array([[0.0, 0, 0], [0, 2, 0]])
    N = np.array([[1.0, 0, 0], [1, 0, 0]])
    x, deficient = compute_inlier(CuttingPlane(np.zeros(3), N, P))
    assert deficient
    assert np.allclose(x[1:], [1.0, 0.0])


def test_build_inlier_set_cube(cube):
    inl = build_inlier_set(cube, n_rep=8, seed=0, k=6)
    assert len(inl) >= 1
    assert oracles.inside_polyhedron(inl.inliers, cube.vertices, cube.faces).all()
    assert np.all(np.linalg.norm(inl.inliers - 0.5, axis=1) <= np.sqrt(3) / 2)


def test_build_inlier_set_sphere(test_meshes):
    sph = test_meshes["sphere"]
    inl = build_inlier_set(sph, n_rep=30, seed=1)
    assert len(inl) == 30 and not inl.discarded
    assert np.all(np.linalg.norm(inl.inliers, axis=1) <= 0.2)


def test_build_inlier_set_thin_and_concave(test_meshes):
    for name in ("torus", "l_prism"):
        m = test_meshes[name]
        inl = build_inlier_set(m, n_rep=60, seed=0)
        assert len(inl) > 0
        assert oracles.inside_polyhedron(inl.inliers, m.vertices, m.faces).all(), name


def test_build_inlier_set_rejects_open_mesh():
    tri = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(ConfigSpaceError):
        build_inlier_set(tri)


def test_safe_sphere_examples(test_meshes):
    sph = test_meshes["sphere"]
    inl = build_inlier_set(sph, n_rep=10, seed=0)
    assert is_safe_configuration([3.0, 0, 0], sph, inl)
    assert not is_safe_configuration([0.0, 0, 0], sph, inl)


def test_parity_agrees_with_winding_number(test_meshes):
    rng = np.random.default_rng(21)
    for name, m in test_meshes.items():
        inl = build_inlier_set(m, n_rep=100, seed=0)
        lo, hi = m.bounds
        P = rng.uniform(lo - 0.5, hi + 0.5, (2000, 3))
        safe = safe_mask(P, m, inl)
        assert np.array_equal(safe, ~oracles.inside_polyhedron(P, m.vertices, m.faces)), name


def test_safe_mask_respects_world_clearance(cube):
    inl = build_inlier_set(cube, n_rep=8, seed=0, k=6)
    w = VoxelWorld((-2, -2, -2), (50, 50, 50), 0.1)
    occ = np.zeros(w.dims, bool)
    occ[35, 20, 20] = True  # an obstacle voxel near (1.55, 0.05, 0.05)
    w.set_occupied(occ)
    w.recompute_esdf()
    P = np.array([[1.55, 0.05, 0.25], [-1.0, -1.0, -1.0], [9.0, 0.0, 0.0]])
    assert list(safe_mask(P, cube, inl)) == [True, True, True]
    # too close to the obstacle, clear of it, outside the grid
    assert list(safe_mask(P, cube, inl, w, radius=0.3)) == [False, True, False]


def test_parity_throughput():
    m = shapes.icosphere(1.0, 4)
    assert m.n_faces >= 5000
    inl = build_inlier_set(m, n_rep=100, seed=0)
    P = np.random.default_rng(0).uniform(-1.5, 1.5, (10000, 3))
    safe_mask(P, m, inl)
    t0 = time.perf_counter()
    safe_mask(P, m, inl)
    assert time.perf_counter() - t0 < 0.25
