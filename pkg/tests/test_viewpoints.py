import numpy as np
import pytest

import oracles
from scancov import shapes
from scancov.config_space import build_inlier_set, safe_mask
from scancov.mapping import VoxelWorld
from scancov.viewpoints import (GenerationReport, SensorModel, Viewpoint, generate_candidates, gravitational_prune,
                                gravitational_pull, look_at, optical_axis, read_viewpoints_csv, visibility,
                                visible_vertices, write_viewpoints_csv)

SENSOR = SensorModel(np.deg2rad(90), np.deg2rad(75), 5.0, np.deg2rad(75))


def test_look_at_and_axis():
    p, y = look_at([0, 0, 0], [1, 1, 0])
    assert p == pytest.approx(0.0) and y == pytest.approx(np.pi / 4)
    assert np.allclose(optical_axis(p, y), [np.sqrt(0.5), np.sqrt(0.5), 0])
    p, _ = look_at([0, 0, 0], [0, 0, -1])
    assert p == pytest.approx(-np.pi / 2)


def test_wall_patch_fully_visible():
    wall = shapes.plane_patch((2, 2), (4, 4))
    vp = Viewpoint([2.0, 0, 0], 0.0, np.pi)
    assert np.array_equal(visible_vertices(vp, wall, SENSOR), np.arange(wall.n_vertices))


def test_occluder_hides_patch():
    wall = shapes.plane_patch((2, 2), (4, 4))
    screen = shapes.plane_patch((4, 4), (2, 2), center=(1.0, 0, 0))
    scene = shapes.merge(wall, screen)
    targets = np.arange(wall.n_vertices)
    assert len(visible_vertices(Viewpoint([2.0, 0, 0], 0.0, np.pi), scene, SENSOR, targets)) == 0


def test_facing_away_sees_nothing():
    wall = shapes.plane_patch((2, 2), (4, 4))
    assert len(visible_vertices(Viewpoint([2.0, 0, 0], 0.0, 0.0), wall, SENSOR)) == 0


def test_visibility_matches_brute_force(test_meshes):
    rng = np.random.default_rng(4)
    for name in ("sphere", "torus"):
        m = test_meshes[name]
        poses = []
        for _ in range(12):
            d = rng.normal(size=3)
            p = 3.0 * d / np.linalg.norm(d)
            aim = rng.normal(scale=0.3, size=3)
            pitch, yaw = look_at(p, aim)
            poses.append([*p, pitch, yaw])
        got = visibility(np.array(poses), m, SENSOR)
        for pose, vis in zip(poses, got):
            ref = oracles.visible_brute(pose, m.vertices, m.faces, m.vertex_normals, SENSOR.hfov, SENSOR.vfov,
                                        SENSOR.max_range, SENSOR.max_incidence, range(m.n_vertices))
            assert np.array_equal(vis, ref), name


def test_candidates_one_per_vertex_on_free_box():
    b = shapes.box((4.0, 0.5, 2.5), cell=0.5)
    inl = build_inlier_set(b, n_rep=40, seed=0)
    unc = np.arange(b.n_vertices)
    rep = GenerationReport()
    cands = generate_candidates(b, unc, 3.0, inl, sensor=SENSOR, report=rep)
    assert rep.n_raw == 2 * b.n_vertices and len(rep.rejected_vertices) == 0
    pos = np.array([vp.position for vp in cands])
    for v in unc:
        # the outward candidate sees its vertex; the inward one is inside or behind it
        out = np.flatnonzero(np.all(np.isclose(pos, b.vertices[v] + 3.0 * b.vertex_normals[v]), axis=1))
        inw = np.flatnonzero(np.all(np.isclose(pos, b.vertices[v] - 3.0 * b.vertex_normals[v]), axis=1))
        assert len(out) == 1 and v in cands[out[0]].covered
        assert all(v not in cands[k].covered for k in inw)


def test_candidates_empty_and_bad_offset(cube):
    inl = build_inlier_set(cube, n_rep=8, seed=0, k=6)
    assert generate_candidates(cube, [], 3.0, inl) == []
    with pytest.raises(ValueError):
        generate_candidates(cube, [0], 0.2, inl, radius=0.3)


def test_candidates_rejected_in_slot():
    b = shapes.box((2.0, 2.0, 2.0), cell=0.5)
    inl = build_inlier_set(b, n_rep=20, seed=0)
    w = VoxelWorld((-5, -6, -6), (100, 120, 120), 0.1)
    x = w.center(np.argwhere(np.ones(w.dims, bool)))[:, 0].reshape(w.dims)
    w.set_occupied(np.abs(x) > 2.0)
    w.recompute_esdf()
    face_x = int(np.flatnonzero(np.all(np.isclose(b.vertices, [1, 0, 0]), axis=1))[0])
    face_y = int(np.flatnonzero(np.all(np.isclose(b.vertices, [0, 1, 0]), axis=1))[0])
    rep = GenerationReport()
    assert generate_candidates(b, [face_x], 3.0, inl, w, SENSOR, radius=0.3, report=rep) == []
    assert list(rep.rejected_vertices) == [face_x]
    # along the open channel the outward candidate survives
    cands = generate_candidates(b, [face_y], 3.0, inl, w, SENSOR, radius=0.3)
    assert len(cands) == 1 and np.allclose(cands[0].position, [0, 4, 0])


def test_pull_examples():
    pose = gravitational_pull([0, 0, 0, 0, 0], 10, [[1, 0, 0, 0, 0]], [5])
    assert np.allclose(pose[:3], [0.5, 0, 0])
    pose = gravitational_pull([0, 0, 0, 0.1, 0.2], 10, [[1, 0, 0, 0.1, 0.2], [-1, 0, 0, 0.1, 0.2]], [5, 5])
    assert np.allclose(pose, [0, 0, 0, 0.1, 0.2])
    # yaw pull takes the short way round
    pose = gravitational_pull([0, 0, 0, 0, np.pi - 0.1], 10, [[0, 0, 0, 0, -np.pi + 0.1]], [5])
    assert abs(abs(pose[4]) - np.pi) < 1e-12


def test_prune_wall_covers_everything():
    wall = shapes.box((4.0, 0.5, 2.5), center=(0, 0, 1.25), cell=0.5)
    inl = build_inlier_set(wall, n_rep=40, seed=0)
    front = np.flatnonzero(wall.vertex_normals[:, 1] < -0.5)
    rng = np.random.default_rng(0)
    cands = []
    for _ in range(20):
        p = np.array([rng.uniform(-1.5, 1.5), rng.uniform(-4.0, -3.0), rng.uniform(0.5, 2.0)])
        pitch, yaw = look_at(p, [p[0], 0.0, 1.25])
        cands.append(Viewpoint(p, pitch, yaw, visibility(np.array([[*p, pitch, yaw]]), wall, SENSOR, front)[0]))
    # the candidates jointly cover the uncovered set by construction
    unc = np.unique(np.concatenate([c.covered for c in cands]))
    assert len(unc) > 0.9 * len(front)

    def regen(res):
        return generate_candidates(wall, res, 3.0, inl, sensor=SENSOR, targets=front)

    out = gravitational_prune(cands, 8.0, wall, SENSOR, unc, inl, regenerate=regen)
    assert len(out.residual) == 0
    got = np.unique(np.concatenate([v.covered for v in out.viewpoints]))
    assert np.isin(unc, got).all()
    assert len(out.viewpoints) < len(cands)
    assert safe_mask(np.array([v.position for v in out.viewpoints]), wall, inl).all()


def test_viewpoints_csv_roundtrip(tmp_path):
    vps = [Viewpoint([1.0, 2.0, 3.0], 0.1, -0.5, [1, 2, 3]), Viewpoint([0.0, 0.0, 1.5], -0.3, 2.0, [7])]
    p = str(tmp_path / "v.csv")
    write_viewpoints_csv(vps, p)
    back = read_viewpoints_csv(p)
    assert [n for _, n in back] == [3, 1]
    assert np.allclose(back[0][0].pose, vps[0].pose, rtol=1e-5)
