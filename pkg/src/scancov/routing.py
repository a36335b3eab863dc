"""Two-level ATSP routing over viewpoint groups with plan-to-plan consistency."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import mapping
from .config_space import build_inlier_set, safe_mask
from .decomposition import ViewpointGroup, extract_skeleton, group_viewpoints
from .geometry import chamfer_directed, chamfer_undirected
from .path import VIEWPOINT, CoveragePath, PathNode
from .viewpoints import (GenerationReport, SensorModel, Viewpoint, generate_candidates,
                         gravitational_prune, visibility)

log = logging.getLogger(__name__)


# -- ATSP -------------------------------------------------------------------

@dataclass
class AtspInstance:
    cost: np.ndarray
    start: int = 0
    open_tour: bool = True

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float)
        n = self.cost.shape[0]
        if self.cost.shape != (n, n):
            raise ValueError("cost matrix must be square")
        if np.any(self.cost < 0):
            raise ValueError("costs must be non-negative")


def tour_cost(C, tour, open_tour=True):
    tour = list(tour)
    c = sum(C[a, b] for a, b in zip(tour[:-1], tour[1:]))
    if not open_tour and len(tour) > 1:
        c += C[tour[-1], tour[0]]
    return float(c)


def _nearest_neighbor(C, start):
    n = len(C)
    seen = np.zeros(n, bool)
    seen[start] = True
    tour = [start]
    for _ in range(n - 1):
        row = np.where(seen, np.inf, C[tour[-1]])
        nxt = int(np.argmin(row))
        tour.append(nxt)
        seen[nxt] = True
    return tour


@njit(cache=True)
def _best_two_opt(C, t):
    """Best segment reversal on an open path: (delta, i, j)."""
    n = len(t)
    fwd = np.zeros(n)
    bwd = np.zeros(n)
    for k in range(1, n):
        fwd[k] = fwd[k - 1] + C[t[k - 1], t[k]]
        bwd[k] = bwd[k - 1] + C[t[k], t[k - 1]]
    best, bi, bj = -1e-12, -1, -1
    for i in range(1, n - 1):
        for j in range(i + 1, n):
            d = C[t[i - 1], t[j]] - C[t[i - 1], t[i]]
            if j < n - 1:
                d += C[t[i], t[j + 1]] - C[t[j], t[j + 1]]
            d += (bwd[j] - bwd[i]) - (fwd[j] - fwd[i])
            if d < best:
                best, bi, bj = d, i, j
    return best, bi, bj


@njit(cache=True)
def _best_or_opt(C, t):
    """Best relocation of a 1..3 node chain, optionally reversed:
    (delta, i, L, p, rev) with the chain t[i:i+L] reinserted after t[p]."""
    n = len(t)
    best, bi, bL, bp, brev = -1e-12, -1, 0, -1, False
    for L in range(1, 4):
        for i in range(1, n - L + 1):
            prev = t[i - 1]
            s0 = t[i]
            sl = t[i + L - 1]
            has_after = i + L < n
            gain = C[prev, s0]
            if has_after:
                after = t[i + L]
                gain += C[sl, after] - C[prev, after]
            inner_f = 0.0
            inner_r = 0.0
            for k in range(i, i + L - 1):
                inner_f += C[t[k], t[k + 1]]
                inner_r += C[t[k + 1], t[k]]
            for p in range(n):
                if p >= i and p < i + L:
                    continue
                a = t[p]
                if p == i - 1:
                    nb = i + L
                else:
                    nb = p + 1
                has_b = nb < n
                for r in range(2):
                    if r == 1 and L == 1:
                        continue
                    if r == 0 and p == i - 1:
                        continue
                    first = s0 if r == 0 else sl
                    last = sl if r == 0 else s0
                    add = C[a, first] + (inner_f if r == 0 else inner_r) - inner_f
                    if has_b:
                        b = t[nb]
                        add += C[last, b] - C[a, b]
                    d = add - gain
                    if d < best:
                        best, bi, bL, bp, brev = d, i, L, p, r == 1
    return best, bi, bL, bp, brev


@njit(cache=True)
def _local_search_nb(C, t, use_or):
    t = t.copy()
    n = len(t)
    while True:
        d, i, j = _best_two_opt(C, t)
        if i >= 0:
            t[i:j + 1] = t[i:j + 1][::-1].copy()
            continue
        if not use_or:
            return t
        d, i, L, p, rev = _best_or_opt(C, t)
        if i < 0:
            return t
        seg = t[i:i + L].copy()
        if rev:
            seg = seg[::-1].copy()
        rest = np.empty(n - L, t.dtype)
        rest[:i] = t[:i]
        rest[i:] = t[i + L:]
        q = p if p < i else p - L  # position of t[p] within rest
        out = np.empty(n, t.dtype)
        out[:q + 1] = rest[:q + 1]
        out[q + 1:q + 1 + L] = seg
        out[q + 1 + L:] = rest[q + 1:]
        t = out


def _local_search(C, t, use_or=True):
    return _local_search_nb(np.ascontiguousarray(C, dtype=np.float64), np.asarray(t, dtype=np.int64), use_or)


def _double_bridge(t, rng):
    n = len(t)
    if n < 5:
        return t.copy()
    a, b, c = np.sort(rng.choice(np.arange(1, n), size=3, replace=False))
    return np.concatenate([t[:a], t[c:], t[b:c], t[a:b]])


def solve_atsp(inst, kicks=None, seed=0):
    """Open (or closed) ATSP tour from ``inst.start``.

    Nearest-neighbour construction, then 2-opt and Or-opt to a local
    optimum, then a fixed number of seeded double-bridge kicks keeping the
    best local optimum. Deterministic for a given instance.
    """
    C = inst.cost
    n = len(C)
    if n == 0:
        return [], 0.0
    if not inst.open_tour:
        # closing edge folded in: duplicate start as a sink
        C2 = np.zeros((n + 1, n + 1))
        C2[:n, :n] = C
        C2[:n, n] = C[:, inst.start]
        C2[n, :] = np.inf
        C2[inst.start, n] = np.inf
        C2[np.isinf(C2)] = 1e12
        t, _ = solve_atsp(AtspInstance(C2, inst.start), kicks, seed)
        t = [x for x in t if x != n]
        return t, tour_cost(C, t, open_tour=False)
    if n <= 2:
        t = [inst.start] + [i for i in range(n) if i != inst.start]
        return t, tour_cost(C, t)
    t = _local_search(C, _nearest_neighbor(C, inst.start))
    best, best_c = t, tour_cost(C, t)
    if kicks is None:
        kicks = min(max(60, 2 * n), 80)
    rng = np.random.default_rng(seed)
    cur, cur_c = best, best_c
    for _ in range(kicks):
        cand = _local_search(C, _double_bridge(cur, rng))
        c = tour_cost(C, cand)
        if c < cur_c - 1e-12:
            cur, cur_c = cand, c
            if c < best_c - 1e-12:
                best, best_c = cand, c
    return [int(x) for x in best], best_c


def two_opt_only(inst):
    """Nearest neighbour + 2-opt to a local optimum, no kicks."""
    t = _local_search(inst.cost, _nearest_neighbor(inst.cost, inst.start), use_or=False)
    return [int(x) for x in t], tour_cost(inst.cost, t)


def held_karp(C, start=0):
    """Exact open-path ATSP by subset dynamic programming (n <= ~15)."""
    C = np.asarray(C, dtype=float)
    n = len(C)
    if n == 1:
        return [start], 0.0
    full = 1 << n
    dp = np.full((full, n), np.inf)
    par = np.full((full, n), -1, dtype=np.int64)
    dp[1 << start, start] = 0.0
    bits = 1 << np.arange(n)
    for mask in range(full):
        if not mask & (1 << start):
            continue
        row = dp[mask]
        if not np.isfinite(row).any():
            continue
        cand = row[:, None] + C
        j = np.argmin(cand, axis=0)
        val = cand[j, np.arange(n)]
        for k in np.flatnonzero((mask & bits) == 0):
            m2 = mask | (1 << k)
            if val[k] < dp[m2, k]:
                dp[m2, k] = val[k]
                par[m2, k] = j[k]
    last = int(np.argmin(dp[full - 1]))
    cost = float(dp[full - 1, last])
    tour = []
    mask, cur = full - 1, last
    while cur >= 0:
        tour.append(cur)
        p = par[mask, cur]
        mask ^= 1 << cur
        cur = p
    return tour[::-1], cost


def two_level_tour(clusters, start, seed=0):
    """Open tour over clustered points: an ATSP over cluster centroids, then
    one ATSP per cluster entered at its member nearest the previous exit.

    ``clusters`` is a list of (n_i, 3) arrays. Returns the visiting order as
    ``(cluster, member)`` pairs and the Euclidean length from ``start``.
    """
    start = np.asarray(start, dtype=float)
    cen = np.array([start] + [np.mean(c, axis=0) for c in clusters])
    C = np.linalg.norm(cen[:, None] - cen[None], axis=-1)
    order, _ = solve_atsp(AtspInstance(C, 0), seed=seed)
    seq, total, last = [], 0.0, start
    for g in order[1:]:
        pts = np.asarray(clusters[g - 1], dtype=float)
        entry = int(np.argmin(np.linalg.norm(pts - last, axis=1)))
        tour, _ = solve_atsp(AtspInstance(np.linalg.norm(pts[:, None] - pts[None], axis=-1), entry), seed=seed)
        for k in tour:
            total += float(np.linalg.norm(pts[k] - last))
            last = pts[k]
            seq.append((g - 1, int(k)))
    return seq, total


# -- planner state ----------------------------------------------------------

@dataclass
class PlannerConfig:
    offset_d: float = 3.0
    radius_r: float = 4.0
    R_g: float = 8.0
    m_match: int = 2
    n_rep: int = 100
    k_neighbors: int = 16
    drone_radius: float = 0.3
    sensor: SensorModel = field(default_factory=SensorModel)
    prune_iters: int = 5
    cluster_eps: float = None
    consistency: bool = True
    seed: int = 0


@dataclass
class PlannerMemory:
    viewpoints: list = field(default_factory=list)
    mesh: object = None
    edge_length_avg: float = 0.0
    centroids: np.ndarray = None
    sequence: list = field(default_factory=list)  # member positions per group, tour order
    cycle: int = 0

    def clear(self):
        self.viewpoints = []
        self.mesh = None
        self.edge_length_avg = 0.0
        self.centroids = None
        self.sequence = []

    @property
    def empty(self):
        return not self.viewpoints


def find_reused_viewpoints(memory, mesh_cur, mesh_last, sensor, targets_cur, inliers=None,
                           world=None, radius=0.0, targets_last=None):
    """Previous viewpoints whose observations barely changed between meshes.

    An observation is the set of target-vertex positions a viewpoint sees;
    a viewpoint is reused when the undirected Chamfer distance between its
    last and current observations is below the larger mean edge length.
    """
    if memory is None or memory.empty or mesh_last is None:
        return []
    sigma = max(memory.edge_length_avg or mesh_last.edge_length_avg, mesh_cur.edge_length_avg)
    poses = np.array([vp.pose for vp in memory.viewpoints])
    tl = np.arange(mesh_last.n_vertices) if targets_last is None else targets_last
    tc = np.arange(mesh_cur.n_vertices) if targets_cur is None else targets_cur
    obs_last = visibility(poses, mesh_last, sensor, tl)
    obs_cur = visibility(poses, mesh_cur, sensor, tc)
    keep = []
    for i, (ol, oc) in enumerate(zip(obs_last, obs_cur)):
        if len(ol) == 0 or len(oc) == 0:
            continue
        cd = chamfer_undirected(mesh_last.vertices[ol], mesh_cur.vertices[oc])
        if cd < sigma:
            keep.append(i)
    if not keep:
        return []
    if inliers is not None:
        ok = safe_mask(poses[keep, :3], mesh_cur, inliers, world, radius)
        keep = [k for k, o in zip(keep, ok) if o]
    return [memory.viewpoints[k] for k in keep]


def match_sequence(memory, groups, m):
    """Align the first ``m`` historical groups with current groups by
    directed Chamfer distance. Returns (matched groups in order, remaining)."""
    pool = list(groups)
    if memory is None or not memory.sequence:
        return [], pool
    matched = []
    for hist in memory.sequence[:m]:
        if not pool or len(hist) == 0:
            break
        d = [chamfer_directed(hist, g.positions) for g in pool]
        k = int(np.argmin(d))
        matched.append(pool.pop(k))
    return matched, pool


# -- global planning --------------------------------------------------------

@dataclass
class GlobalPlan:
    path: CoveragePath
    viewpoints: list
    groups: list
    reused: int = 0
    residual: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    unreachable: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    timings: dict = field(default_factory=dict)
    tour_cost: float = 0.0


def _pair_cost(world, a, b, trav):
    if world is None:
        return float(np.linalg.norm(a - b))
    if world.segment_free(a, b, trav=trav):
        return float(np.linalg.norm(a - b))
    tr = trav.copy()
    pts = mapping.astar(world, a, b, trav=tr)
    if pts is None:
        return float(np.linalg.norm(a - b))
    pts = np.concatenate([a[None], pts[1:-1], b[None]])
    return mapping.path_length(pts)


def _clamp_into(world, p):
    if world is None:
        return p
    return np.clip(p, world.origin + 1e-6, world.upper - 1e-6)


def plan_global(mesh, uncovered, drone_pose, memory=None, world=None, config=None,
                inliers=None, targets=None):
    """Consistency-aware global coverage planning on the current mesh.

    ``uncovered`` are vertex indices still to observe; ``targets`` are the
    vertices a viewpoint's coverage is counted against (defaults to
    ``uncovered``). Returns a :class:`GlobalPlan`; its path starts at the
    drone pose and visits each chosen viewpoint once.
    """
    cfg = config or PlannerConfig()
    mem = memory if memory is not None else PlannerMemory()
    drone_pose = np.asarray(drone_pose, dtype=float)
    uncovered = np.asarray(sorted(set(np.asarray(uncovered, np.int64).tolist())), dtype=np.int64)
    start = PathNode(tuple(float(x) for x in drone_pose), "waypoint")
    timings = {}
    if len(uncovered) == 0:
        path = CoveragePath([start], mem.cycle, complete=True)
        mem.cycle += 1
        return GlobalPlan(path, [], [], timings=timings)
    if world is not None:
        world.ensure_esdf()
    t0 = time.perf_counter()
    if inliers is None:
        inliers = build_inlier_set(mesh, cfg.n_rep, cfg.seed, cfg.k_neighbors)
    timings["inliers"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    reused = []
    if cfg.consistency and not mem.empty:
        reused = find_reused_viewpoints(mem, mesh, mem.mesh, cfg.sensor, uncovered, inliers, world,
                                        cfg.drone_radius)
        # recompute coverage against what is still uncovered
        cov = visibility(np.array([vp.pose for vp in reused]).reshape(-1, 5), mesh, cfg.sensor, uncovered) if reused else []
        reused = [Viewpoint(vp.position, vp.pitch, vp.yaw, c) for vp, c in zip(reused, cov) if len(c)]
    timings["reuse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    covered_by_reuse = np.unique(np.concatenate([vp.covered for vp in reused])) if reused else np.zeros(0, np.int64)
    todo = np.setdiff1d(uncovered, covered_by_reuse)
    report = GenerationReport()
    new_vps, residual, unreachable = [], np.zeros(0, np.int64), np.zeros(0, np.int64)
    if len(todo):
        cands = generate_candidates(mesh, todo, cfg.offset_d, inliers, world, cfg.sensor,
                                    cfg.drone_radius, targets=todo, report=report)

        def regen(res):
            fresh = generate_candidates(mesh, res, cfg.offset_d, inliers, world, cfg.sensor,
                                        cfg.drone_radius, targets=res)
            # original candidates still see vertices whose own offsets are unsafe
            for c in cands:
                hit = np.intersect1d(c.covered, res)
                if len(hit):
                    fresh.append(Viewpoint(c.position, c.pitch, c.yaw, hit))
            return fresh
        reach = np.unique(np.concatenate([c.covered for c in cands])) if cands else np.zeros(0, np.int64)
        unreachable = np.setdiff1d(todo, reach)
        if cands:
            pr = gravitational_prune(cands, cfg.radius_r, mesh, cfg.sensor, reach, inliers, world,
                                     cfg.drone_radius, regenerate=regen, max_iter=cfg.prune_iters)
            new_vps, residual = pr.viewpoints, pr.residual
    timings["viewpoints"] = time.perf_counter() - t0
    vps = reused + new_vps
    for i, vp in enumerate(vps):
        vp.vp_id = i
    if not vps:
        path = CoveragePath([start], mem.cycle, complete=False, infeasible=True,
                            notes={"reason": "no safe viewpoints"})
        mem.cycle += 1
        return GlobalPlan(path, [], [], residual=residual, unreachable=unreachable, timings=timings)

    t0 = time.perf_counter()
    eps = cfg.cluster_eps or 2.0 * mesh.edge_length_avg
    skel = extract_skeleton(inliers, eps)
    prev_c = mem.centroids if cfg.consistency else None
    groups = group_viewpoints(vps, skel, cfg.R_g, mesh, prev_c)
    timings["grouping"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    matched, pool = match_sequence(mem if cfg.consistency else None, groups, cfg.m_match)
    order = _group_sequence(matched, pool, drone_pose[:3], world, cfg)
    timings["group_atsp"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    nodes, total = _intra_group(order, drone_pose[:3], cfg)
    timings["intra_atsp"] = time.perf_counter() - t0

    path = CoveragePath([start] + nodes, mem.cycle)
    t0 = time.perf_counter()
    if world is not None:
        path = mapping.astar_refine(world, path, clearance=cfg.drone_radius)
    timings["astar"] = time.perf_counter() - t0

    mem.viewpoints = vps
    mem.mesh = mesh
    mem.edge_length_avg = mesh.edge_length_avg
    mem.centroids = np.array([g.centroid for g in order])
    mem.sequence = [g.positions for g in order]
    mem.cycle += 1
    return GlobalPlan(path, vps, order, len(reused), residual, unreachable, timings, total)


def _group_sequence(matched, pool, start, world, cfg):
    """Order groups: matched prefix pinned first, the rest by open ATSP."""
    if not pool:
        return list(matched)
    head = matched[-1].centroid if matched else start
    pts = np.array([head] + [g.centroid for g in pool])
    trav = world.traversable(cfg.drone_radius) if world is not None else None
    n = len(pts)
    C = np.zeros((n, n))
    P = [_clamp_into(world, p) for p in pts]
    for i in range(n):
        for j in range(i + 1, n):
            C[i, j] = C[j, i] = _pair_cost(world, P[i], P[j], trav)
    # leaving the head toward a group costs the distance to its nearest member
    for j, g in enumerate(pool, 1):
        C[0, j] = min(C[0, j], float(np.linalg.norm(g.positions - head, axis=1).min()))
    tour, _ = solve_atsp(AtspInstance(C, 0), seed=cfg.seed)
    return list(matched) + [pool[k - 1] for k in tour[1:]]


def _intra_group(groups, start, cfg):
    """Per-group open tours chained exit-to-entry; returns path nodes.

    The entry of a group is its member nearest to the previous group's exit,
    so tours are solved in sequence.
    """
    nodes = []
    total = 0.0
    last = np.asarray(start, dtype=float)
    for gi, g in enumerate(groups):
        pos = g.positions
        entry = int(np.argmin(np.linalg.norm(pos - last, axis=1)))
        C = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        tour, _ = solve_atsp(AtspInstance(C, entry), seed=cfg.seed)
        for k in tour:
            vp = g.members[k]
            nodes.append(PathNode(tuple(float(x) for x in vp.pose), VIEWPOINT, vp.vp_id, gi))
            total += float(np.linalg.norm(vp.position - last))
            last = vp.position
    return nodes, total
