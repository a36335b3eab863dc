import numpy as np
import pytest

import oracles
from scancov import shapes
from scancov.decomposition import ViewpointGroup
from scancov.mapping import VoxelWorld
from scancov.routing import (AtspInstance, PlannerConfig, PlannerMemory, find_reused_viewpoints, held_karp,
                             match_sequence, plan_global, solve_atsp, tour_cost, two_level_tour, two_opt_only)
from scancov.viewpoints import SensorModel, Viewpoint


def random_atsp(rng, n):
    C = rng.uniform(0, 10, (n, n))
    np.fill_diagonal(C, 0)
    return C


def test_atsp_trivial_cases():
    assert solve_atsp(AtspInstance(np.zeros((1, 1)))) == ([0], 0.0)
    assert solve_atsp(AtspInstance(np.zeros((0, 0)))) == ([], 0.0)
    x = np.array([0.0, 1.0, 2.0])
    C = np.abs(x[:, None] - x[None])
    tour, cost = solve_atsp(AtspInstance(C, 0))
    assert tour == [0, 1, 2] and cost == 2.0


def test_atsp_rejects_bad_costs():
    with pytest.raises(ValueError):
        AtspInstance(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        AtspInstance(-np.ones((2, 2)))


def test_held_karp_matches_enumeration():
    rng = np.random.default_rng(0)
    for n in range(2, 8):
        C = random_atsp(rng, n)
        tour, cost = held_karp(C, 0)
        assert sorted(tour) == list(range(n)) and tour[0] == 0
        assert cost == pytest.approx(tour_cost(C, tour), abs=1e-12)
        assert cost == pytest.approx(oracles.brute_tour(C), abs=1e-9)
        assert cost == pytest.approx(oracles.held_karp(C), abs=1e-9)


def test_heuristic_near_optimal_nine_nodes():
    rng = np.random.default_rng(9)
    worst = 1.0
    for _ in range(100):
        C = random_atsp(rng, 9)
        tour, cost = solve_atsp(AtspInstance(C, 0))
        assert sorted(tour) == list(range(9)) and tour[0] == 0
        assert cost == pytest.approx(tour_cost(C, tour), abs=1e-9)
        worst = max(worst, cost / oracles.held_karp(C))
    assert worst <= 1.05


def test_atsp_deterministic_and_start():
    rng = np.random.default_rng(1)
    C = random_atsp(rng, 14)
    a = solve_atsp(AtspInstance(C, 3), seed=2)
    assert a == solve_atsp(AtspInstance(C, 3), seed=2)
    assert a[0][0] == 3
    t, c = two_opt_only(AtspInstance(C, 3))
    assert t[0] == 3 and sorted(t) == list(range(14)) and c >= a[1] - 1e-9


def test_closed_tour():
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    P = np.column_stack([np.cos(ang), np.sin(ang)])
    C = np.linalg.norm(P[:, None] - P[None], axis=-1)
    tour, cost = solve_atsp(AtspInstance(C, 0, open_tour=False))
    assert sorted(tour) == list(range(8))
    assert cost == pytest.approx(8 * 2 * np.sin(np.pi / 8), abs=1e-9)


def test_two_level_tour_visits_all():
    rng = np.random.default_rng(3)
    clusters = [rng.normal(0, 1, (6, 3)), rng.normal(10, 1, (4, 3))]
    seq, total = two_level_tour(clusters, [-3, 0, 0])
    assert sorted(seq) == sorted([(0, k) for k in range(6)] + [(1, k) for k in range(4)])
    # clusters are visited contiguously, nearest first
    assert [g for g, _ in seq] == [0] * 6 + [1] * 4
    pts = np.array([[-3.0, 0, 0]] + [clusters[g][k] for g, k in seq])
    assert total == pytest.approx(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


SENSOR = SensorModel(np.deg2rad(90), np.deg2rad(75), 6.0, np.deg2rad(75))


def test_reuse_identical_and_first_cycle(cube):
    mem = PlannerMemory()
    assert find_reused_viewpoints(mem, cube, None, SENSOR, None) == []
    big = shapes.box((2, 2, 2), cell=0.5)
    mem.viewpoints = [Viewpoint([3.0, 0, 0], 0, np.pi), Viewpoint([0, 3.0, 0], 0, -np.pi / 2)]
    mem.mesh, mem.edge_length_avg = big, big.edge_length_avg
    assert len(find_reused_viewpoints(mem, big, big, SENSOR, None)) == 2


def test_reuse_rejects_displaced_region():
    big = shapes.box((2, 2, 2), cell=0.5)
    V = big.vertices.copy()
    moved = V[:, 0] > 0.99
    V[moved, 0] += 2.0  # the +x face regrows 2 m outward
    grown = big.with_vertices(V)
    mem = PlannerMemory([Viewpoint([4.5, 0, 0], 0, np.pi), Viewpoint([0, -3.5, 0], 0, np.pi / 2)], big,
                        big.edge_length_avg)
    sigma = max(big.edge_length_avg, grown.edge_length_avg)
    assert 0.3 < sigma < 1.0
    kept = find_reused_viewpoints(mem, grown, big, SENSOR, None)
    assert [tuple(v.position) for v in kept] == [(0.0, -3.5, 0.0)]


def test_match_sequence():
    def grp(c):
        return ViewpointGroup.of([Viewpoint(np.asarray(c) + d, 0, 0) for d in ([0, 0, 0], [0.5, 0, 0])])

    g = [grp([0, 0, 0]), grp([5, 0, 0]), grp([10, 0, 0])]
    mem = PlannerMemory(sequence=[g[1].positions, g[2].positions, g[0].positions])
    matched, pool = match_sequence(mem, g, 2)
    assert matched == [g[1], g[2]] and pool == [g[0]]
    assert match_sequence(PlannerMemory(), g, 2) == ([], g)
    # a historical group split in two: the nearer fragment is matched
    hist = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0], [1.5, 0, 0]])
    near, far = grp([0.2, 0, 0]), grp([1.2, 0, 0.8])
    matched, pool = match_sequence(PlannerMemory(sequence=[hist]), [far, near], 1)
    assert matched == [near] and pool == [far]


def test_plan_global_empty_uncovered(cube):
    gp = plan_global(cube, [], [3, 0, 0, 0, 0])
    assert gp.path.complete and len(gp.path.nodes) == 1 and gp.viewpoints == []


def check_plan(gp, pose):
    assert np.allclose(gp.path.nodes[0].pose, pose)
    ids = [n.vp_id for n in gp.path.nodes if n.is_viewpoint]
    assert sorted(ids) == list(range(len(gp.viewpoints)))


def test_plan_global_wall_visits_each_once_near_optimal():
    wall = shapes.box((4.0, 0.5, 2.5), center=(0, 0, 1.25), cell=0.5)
    front = np.flatnonzero(wall.vertex_normals[:, 1] < -0.5)
    pose = np.array([0.0, -4.0, 1.2, 0.0, np.pi / 2])
    gp = plan_global(wall, front, pose, config=PlannerConfig(sensor=SENSOR))
    check_plan(gp, pose)
    n = len(gp.viewpoints)
    assert 1 <= n <= 8
    P = np.array([pose[:3]] + [vp.position for vp in gp.viewpoints])
    C = np.linalg.norm(P[:, None] - P[None], axis=-1)
    assert gp.tour_cost <= 1.15 * oracles.held_karp(C) + 1e-9
    covered = np.unique(np.concatenate([vp.covered for vp in gp.viewpoints]))
    assert len(np.setdiff1d(front, covered)) == len(gp.residual) + len(np.setdiff1d(gp.unreachable, covered))


def test_plan_global_cube_with_world(cube):
    big = shapes.box((2, 2, 2), center=(0, 0, 1.0), cell=0.5)
    w = VoxelWorld((-5, -5, 0), (100, 100, 60), 0.1)
    w.set_occupied(big.contains(w.center(np.argwhere(np.ones(w.dims, bool)))).reshape(w.dims))
    pose = np.array([-4.0, 0, 1.2, 0, 0])
    mem = PlannerMemory()
    gp = plan_global(big, np.arange(big.n_vertices), pose, mem, w, PlannerConfig(drone_radius=0.3))
    check_plan(gp, pose)
    assert not gp.path.infeasible
    assert np.all(w.esdf_query(gp.path.positions)[0] > 0.3)
    # a second cycle on the same mesh reuses every viewpoint
    gp2 = plan_global(big, np.arange(big.n_vertices), pose, mem, w, PlannerConfig(drone_radius=0.3))
    assert gp2.reused == len(gp2.viewpoints) == len(gp.viewpoints)
