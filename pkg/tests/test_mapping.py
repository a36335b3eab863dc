import io

import numpy as np
import pytest

import oracles
from scancov.mapping import (FREE, OCC_OTHER, OCC_TARGET, UNKNOWN, StaleESDFError, VoxelWorld, astar,
                             astar_refine)
from scancov.path import VIEWPOINT, CoveragePath, PathNode


def dense_voxels(world, a, b, n=20000):
    t = np.linspace(0, 1, n)[:, None]
    idx = world.index(a + t * (b - a))
    return {tuple(i) for i in idx}


def test_integrate_single_hit():
    w = VoxelWorld((0, 0, 0), (30, 10, 10), 0.1)
    s, h = np.array([0.05, 0.55, 0.55]), np.array([1.05, 0.55, 0.55])
    w.integrate_scan(s, h[None], [True])
    assert w.labels[10, 5, 5] == OCC_TARGET
    free = {tuple(i) for i in np.argwhere(w.labels == FREE)}
    assert free == dense_voxels(w, s, h) - {(10, 5, 5)}
    assert len(free) == 10
    assert w.esdf_stale


def test_integrate_oblique_ray_matches_dense_sampling():
    w = VoxelWorld((0, 0, 0), (20, 20, 20), 0.1)
    s, h = np.array([0.13, 0.21, 0.37]), np.array([1.71, 1.33, 0.92])
    w.integrate_scan(s, h[None], [False])
    hit = tuple(w.index(h))
    assert w.labels[hit] == OCC_OTHER
    free = {tuple(i) for i in np.argwhere(w.labels == FREE)}
    assert free == dense_voxels(w, s, h) - {hit}


def test_integrate_no_hits_and_occupancy_wins():
    w = VoxelWorld((0, 0, 0), (10, 10, 10), 0.1)
    w.integrate_scan([0.5, 0.5, 0.5], np.zeros((0, 3)))
    assert np.all(w.labels == UNKNOWN)
    # a second ray passing through the first hit must not clear it
    w.integrate_scan([0.05, 0.55, 0.55], [[0.55, 0.55, 0.55], [0.95, 0.55, 0.55]], [True, True])
    assert w.labels[5, 5, 5] == OCC_TARGET


def test_integrate_reports_clamped_hits():
    w = VoxelWorld((0, 0, 0), (10, 10, 10), 0.1)
    assert w.integrate_scan([0.5, 0.5, 0.5], [[5.0, 0.5, 0.5]]) == 1


def test_esdf_single_voxel():
    w = VoxelWorld((0, 0, 0), (8, 4, 4), 0.1)
    m = np.zeros(w.dims, bool)
    m[0, 0, 0] = True
    w.set_occupied(m)
    w.recompute_esdf()
    assert w.esdf[3, 0, 0] == pytest.approx(0.3, abs=1e-12)
    assert w.esdf[0, 0, 0] <= 0


def test_esdf_empty_world_is_capped():
    w = VoxelWorld((0, 0, 0), (5, 6, 7), 0.1)
    w.recompute_esdf()
    cap = np.linalg.norm(np.array(w.dims) * 0.1)
    assert np.allclose(w.esdf, cap)


def test_esdf_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(3):
        dims = tuple(int(x) for x in rng.integers(6, 13, 3))
        occ = rng.random(dims) < 0.08
        w = VoxelWorld((0, 0, 0), dims, 0.1)
        w.set_occupied(occ)
        w.recompute_esdf()
        assert np.allclose(w.esdf, oracles.brute_esdf(occ, 0.1), atol=1e-9)


def test_stale_query_raises():
    w = VoxelWorld((0, 0, 0), (4, 4, 4), 0.1)
    with pytest.raises(StaleESDFError):
        w.esdf_query([0.2, 0.2, 0.2])


def test_esdf_query_interpolation_and_gradient():
    w = VoxelWorld((0, 0, 0), (12, 12, 12), 0.1)
    occ = np.zeros(w.dims, bool)
    occ[2, 3, 4] = occ[9, 8, 2] = True
    w.set_occupied(occ)
    w.recompute_esdf()
    # voxel centre returns the stored value
    v, _ = w.esdf_query(w.center([5, 5, 5]))
    assert v == pytest.approx(w.esdf[5, 5, 5], abs=1e-12)
    # midway between two centres is the linear average
    mid = 0.5 * (w.center([5, 5, 5]) + w.center([6, 5, 5]))
    v, _ = w.esdf_query(mid)
    assert v == pytest.approx(0.5 * (w.esdf[5, 5, 5] + w.esdf[6, 5, 5]), abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(30):
        # keep away from cell boundaries of the interpolation lattice
        cell = rng.integers(1, 10, 3)
        frac = rng.uniform(0.2, 0.8, 3)
        p = w.origin + (cell + 0.5 + frac) * 0.1
        _, g = w.esdf_query(p)
        fd = oracles.central_difference(lambda x: w.esdf_query(x)[0], p, h=0.01)
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_astar_detours_through_gap():
    w = VoxelWorld((0, 0, 0), (10, 10, 10), 0.1)
    wall = np.zeros(w.dims, bool)
    wall[5, :, :] = True
    wall[5, 7, 4] = False  # single-voxel gap
    w.set_occupied(wall)
    a, b = w.center([1, 2, 4]), w.center([8, 2, 4])
    path = CoveragePath([PathNode.waypoint(a), PathNode((*b, 0.0, 0.0), VIEWPOINT)])
    out = astar_refine(w, path)
    assert not out.infeasible
    assert out.nodes[-1].pose == path.nodes[-1].pose
    pts = out.positions
    # every node sits in a free voxel; consecutive nodes share no occupied voxel interior
    assert not w.occupied[tuple(w.index(pts).T)].any()
    inner = dense_path(pts, 400)
    frac = (inner - w.origin) / w.resolution % 1.0
    off_corner = np.all(np.abs(frac - 0.5) < 0.49, axis=1)
    assert not w.occupied[tuple(w.index(inner[off_corner]).T)].any()
    assert any(np.allclose(w.index(p), [5, 7, 4]) for p in dense_path(pts))


def dense_path(pts, n=200):
    out = []
    for p, q in zip(pts[:-1], pts[1:]):
        t = np.linspace(0, 1, n)[:, None]
        out.extend(p + t * (q - p))
    return np.array(out)


def test_astar_refine_free_and_trivial():
    w = VoxelWorld((0, 0, 0), (10, 10, 10), 0.1)
    a, b = w.center([1, 1, 1]), w.center([8, 8, 8])
    path = CoveragePath([PathNode.waypoint(a), PathNode.waypoint(b)])
    assert len(astar_refine(w, path).nodes) == 2
    single = CoveragePath([PathNode.waypoint(a)])
    assert len(astar_refine(w, single).nodes) == 1
    assert len(astar(w, a, a)) == 1


def test_astar_refine_flags_blocked():
    w = VoxelWorld((0, 0, 0), (10, 10, 10), 0.1)
    wall = np.zeros(w.dims, bool)
    wall[5] = True
    w.set_occupied(wall)
    path = CoveragePath([PathNode.waypoint(w.center([1, 1, 1])), PathNode.waypoint(w.center([8, 1, 1]))])
    out = astar_refine(w, path)
    assert out.infeasible and len(out.nodes) == 2


def test_dump_restore_roundtrip():
    w = VoxelWorld((-1.0, 0.5, 0.0), (7, 5, 3), 0.2)
    rng = np.random.default_rng(1)
    w.labels[:] = rng.integers(0, 4, w.dims)
    buf = io.StringIO()
    w.dump(buf)
    buf.seek(0)
    w2 = VoxelWorld.restore(buf)
    assert np.array_equal(w.labels, w2.labels)
    assert np.allclose(w.origin, w2.origin) and w.dims == w2.dims and w.resolution == w2.resolution


def test_snapshot_is_independent():
    w = VoxelWorld((0, 0, 0), (4, 4, 4), 0.1)
    w.recompute_esdf()
    s = w.snapshot()
    w.labels[0, 0, 0] = OCC_OTHER
    assert s.labels[0, 0, 0] == UNKNOWN
    with pytest.raises(ValueError):
        s.labels[0, 0, 0] = 1
