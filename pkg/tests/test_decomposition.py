import io

import numpy as np
import pytest

import oracles
from scancov import shapes
from scancov.decomposition import (ViewpointGroup, assign_subspaces, extract_skeleton, group_viewpoints,
                                   refine_groups, visibility_graph)
from scancov.viewpoints import Viewpoint


def vps_at(points):
    return [Viewpoint(p, 0.0, 0.0, [i]) for i, p in enumerate(np.asarray(points, float))]


def test_skeleton_line():
    pts = np.column_stack([np.linspace(0, 10, 41), np.zeros(41), np.zeros(41)])
    sk = extract_skeleton(pts, cluster_eps=0.2)
    assert sk.n_branches == 1
    # singleton clusters; the MST of collinear points is the chain in order
    assert len(sk.nodes) == 41
    assert np.allclose(sk.nodes[:, 1:], 0)
    assert sorted(sk.branches[0]) == list(range(41))
    xs = sk.nodes[sk.branches[0], 0]
    assert np.all(np.diff(xs) > 0) or np.all(np.diff(xs) < 0)


def test_skeleton_single_inlier():
    sk = extract_skeleton(np.array([[1.0, 2.0, 3.0]]), 0.5)
    assert len(sk.nodes) == 1 and len(sk.edges) == 0 and sk.n_branches == 1


def test_skeleton_clusters_merge():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [5, 0, 0], [5.1, 0, 0]], float)
    sk = extract_skeleton(pts, 0.3)
    assert np.allclose(sk.nodes, [[0.05, 0, 0], [5.05, 0, 0]])
    assert sk.edges.tolist() == [[0, 1]]


def test_skeleton_t_shape():
    arm = np.linspace(0.5, 5, 10)
    pts = np.concatenate([np.column_stack([arm, np.zeros(10), np.zeros(10)]),
                          np.column_stack([-arm, np.zeros(10), np.zeros(10)]),
                          np.column_stack([np.zeros(10), arm, np.zeros(10)]),
                          [[0.0, 0, 0]]])
    sk = extract_skeleton(pts, 0.1)
    deg = sk.degree()
    assert sk.n_branches == 3
    assert (deg == 3).sum() == 1 and (deg == 1).sum() == 3
    junction = int(np.argmax(deg))
    assert np.allclose(sk.nodes[junction], 0)
    assert all(junction in (b[0], b[-1]) for b in sk.branches)
    buf = io.StringIO()
    sk.dump(buf)
    assert buf.getvalue().count("\ne ") + buf.getvalue().startswith("e ") == len(sk.edges)


def test_assign_tie_goes_to_lower_branch():
    pts = np.array([[-2, 0, 0], [0, 0, 0], [2, 0, 0], [0, 3, 0]], float)
    sk = extract_skeleton(pts, 0.1)
    # equidistant from the two horizontal branches
    vp = vps_at([[0.0, -1.0, 0.0]])
    D = np.array([[np.inf]])
    out = assign_subspaces(vp, sk)
    assert len(out) == 1
    from scancov.decomposition import branch_distances
    D = branch_distances(vp[0].position, sk)[0]
    tied = np.flatnonzero(np.isclose(D, D.min()))
    assert len(tied) >= 2 and list(out) == [int(tied.min())]


def test_assign_l_shape_matches_distance_oracle():
    arm = np.linspace(0, 6, 13)
    inl = np.concatenate([np.column_stack([arm, np.zeros(13), np.full(13, 1.0)]),
                          np.column_stack([np.zeros(12), arm[1:], np.full(12, 1.0)])])
    sk = extract_skeleton(inl, 0.1)
    assert sk.n_branches == 2
    rng = np.random.default_rng(0)
    along_x = np.column_stack([rng.uniform(2, 6, 10), rng.choice([-2, 2], 10), np.full(10, 1.0)])
    along_y = np.column_stack([rng.choice([-2, 2], 10), rng.uniform(2, 6, 10), np.full(10, 1.0)])
    vps = vps_at(np.concatenate([along_x, along_y]))
    out = assign_subspaces(vps, sk)
    assert len(out) == 2
    sets = sorted(sorted(int(v.covered[0]) for v in g) for g in out.values())
    assert sets == [list(range(10)), list(range(10, 20))]


def test_single_branch_single_group():
    sk = extract_skeleton(np.array([[0, 0, 0], [1, 0, 0]], float), 2.0)
    vps = vps_at(np.random.default_rng(1).normal(size=(6, 3)))
    assert list(assign_subspaces(vps, sk)) == [0]


def test_refine_compact_group(cube):
    far = cube.transformed(np.eye(3), [100, 100, 100])
    pos = np.random.default_rng(2).uniform(-1, 1, (5, 3))
    groups = refine_groups(vps_at(pos), 8.0, far)
    assert len(groups) == 1 and groups[0].radius <= 2.0


def test_refine_two_far_clusters(cube):
    rng = np.random.default_rng(3)
    far = cube.transformed(np.eye(3), [100, 100, 100])
    pos = np.concatenate([rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (5, 3)) + [30, 0, 0]])
    groups = refine_groups(vps_at(pos), 8.0, far)
    assert len(groups) == 2
    assert sorted(sorted(int(v.covered[0]) for v in g.members) for g in groups) == [[0, 1, 2, 3, 4],
                                                                                  [5, 6, 7, 8, 9]]


def test_refine_cut_by_wall():
    wall = shapes.box((0.2, 6.0, 6.0))
    pos = np.array([[-1.0, -0.5, 0], [-1.0, 0.5, 0], [-1.5, 0, 0.5], [1.0, -0.5, 0], [1.0, 0.5, 0], [1.5, 0, 0.5]])
    groups = refine_groups(vps_at(pos), 8.0, wall)
    assert len(groups) >= 2
    for g in groups:
        P = g.positions
        for i in range(len(P)):
            for j in range(i + 1, len(P)):
                assert oracles.brute_crossings(P[i], P[j], wall.vertices, wall.faces) == 0


def test_groups_respect_radius_and_visibility(test_meshes):
    m = test_meshes["l_prism"]
    rng = np.random.default_rng(5)
    lo, hi = m.bounds
    pos = rng.uniform(lo - 3, hi + 3, (80, 3))
    pos = pos[~oracles.inside_polyhedron(pos, m.vertices, m.faces)]
    vps = vps_at(pos)
    sk = extract_skeleton(np.array([[1.0, 0.7, 1.5], [3.5, 0.7, 1.5], [0.7, 3.5, 1.5]]), 0.1)
    groups = group_viewpoints(vps, sk, 3.0, m)
    assert sum(len(g.members) for g in groups) == len(vps)
    ids = sorted(int(v.covered[0]) for g in groups for v in g.members)
    assert ids == list(range(len(vps)))
    for g in groups:
        assert g.radius <= 3.0 + 1e-12
        vis = visibility_graph(g.positions, m)
        assert vis.all()


def test_refine_prev_centroids_seed(cube):
    far = cube.transformed(np.eye(3), [100, 100, 100])
    pos = np.concatenate([np.column_stack([np.linspace(0, 4, 9), np.zeros(9), np.zeros(9)]),
                          np.column_stack([np.linspace(6, 10, 9), np.zeros(9), np.zeros(9)])])
    a = refine_groups(vps_at(pos), 3.0, far, prev_centroids=np.array([[2.0, 0, 0], [8.0, 0, 0]]))
    assert [len(g.members) for g in a] == [9, 9]
    with pytest.raises(ValueError):
        refine_groups([], 1.0, far)


def test_group_of():
    g = ViewpointGroup.of(vps_at([[0, 0, 0], [2, 0, 0]]))
    assert np.allclose(g.centroid, [1, 0, 0]) and g.radius == 1.0
