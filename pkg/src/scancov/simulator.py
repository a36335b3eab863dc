"""Closed-loop coverage missions: sensing, predictors, the global/local
planning loop and mission metrics."""
import csv
import io
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csr_matrix

from . import mapping
from .config_space import build_inlier_set
from .geometry import farthest_point_sample
from .path import VIEWPOINT, WAYPOINT, CoveragePath, PathNode, wrap_angle
from .routing import PlannerConfig, PlannerMemory, plan_global
from .scenarios import GroundTruth, builtin_scenario
from .trajectory import Minco, PenaltyWeights, optimize_local
from .viewpoints import visibility

log = logging.getLogger(__name__)

CSV_HEADER = ["run", "variant", "seed", "flight_time_s", "path_len_m", "completeness_pct", "success",
              "fail_cause", "mean_local_ms", "p99_local_ms", "mean_global_ms", "min_clearance_m"]
VARIANTS = ("full", "no-cagp", "no-async", "no-vcto")


def fmt(x):
    """Six significant digits, '.' decimal."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.6g}"


# -- predictors --------------------------------------------------------------

class PredictorStub:
    """Stand-in for a learned surface predictor.

    ``oracle_gt`` returns the ground-truth mesh with every observable vertex
    as a target. ``observed_only`` restricts targets to LiDAR-observed
    vertices and their unobserved mesh neighbours (the frontier).
    ``noisy`` perturbs unobserved vertices along their normals by a smooth
    random field of scale ``sigma``, resampled each cycle and fading out
    over ``reveal_lag`` seconds once a vertex is observed.
    """

    KINDS = ("oracle_gt", "observed_only", "noisy")

    def __init__(self, kind, gt_mesh, observable, sigma=0.25, reveal_lag=3.0, smooth=3, seed=0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown predictor {kind!r}")
        self.kind = kind
        self.gt = gt_mesh
        self.observable = np.asarray(observable, bool)
        self.sigma = float(sigma)
        self.reveal_lag = float(reveal_lag)
        self.smooth = int(smooth)
        self.seed = seed
        indptr, idx = gt_mesh.vertex_adjacency
        n = gt_mesh.n_vertices
        A = csr_matrix((np.ones(len(idx)), idx, indptr), shape=(n, n))
        deg = np.asarray(A.sum(axis=1)).ravel()
        self._avg = csr_matrix(A.multiply(1.0 / np.maximum(deg, 1)[:, None]))
        self._adj = A

    def predict(self, t, observed, first_seen, cycle):
        """Return ``(mesh, targets)`` for a planning cycle."""
        all_t = np.flatnonzero(self.observable)
        if self.kind == "oracle_gt":
            return self.gt, all_t
        if self.kind == "observed_only":
            obs = observed & self.observable
            frontier = (self._adj @ obs.astype(float)) > 0
            return self.gt, np.flatnonzero(self.observable & (obs | frontier))
        rng = np.random.default_rng([self.seed, cycle])
        z = rng.normal(size=self.gt.n_vertices)
        for _ in range(self.smooth):
            z = self._avg @ z
        z *= self.sigma / max(float(np.std(z)), 1e-12)
        age = np.where(np.isfinite(first_seen), t - first_seen, -1.0)
        fade = np.where(age < 0, 1.0, np.exp(-np.maximum(age, 0.0) / max(self.reveal_lag, 1e-9)))
        V = self.gt.vertices + (z * fade)[:, None] * self.gt.vertex_normals
        return self.gt.with_vertices(V), all_t


# -- shared buffers ----------------------------------------------------------

class PathBuffer:
    """Latest global path; writes replace the whole snapshot under a lock."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snap = None

    def publish(self, path):
        snap = (path, path.cycle, path.checksum())
        with self._lock:
            self._snap = snap

    def read(self):
        with self._lock:
            return self._snap

    @staticmethod
    def consistent(snap):
        return snap is None or snap[0].checksum() == snap[2]


# -- sensing -----------------------------------------------------------------

def fibonacci_directions(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


@dataclass
class SensorState:
    covered: np.ndarray
    observed: np.ndarray
    first_seen: np.ndarray


def lidar_scan(gt, position, rng_range, directions):
    """Cast rays against the scene and the ground plane.

    Returns ``(hits, target_flags, free_ends, target_faces)``.
    """
    p = np.asarray(position, dtype=float)
    ends = p + rng_range * directions
    origins = np.repeat(p[None], len(directions), axis=0)
    _, tmin, face = gt.merged.bvh.segments(origins, ends)
    dz = directions[:, 2] * rng_range
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dz < 0, -p[2] / dz, np.inf)
    hit = np.isfinite(tmin) & (tmin <= tg)
    ground = ~hit & (tg <= 1.0)
    # nudge hit points past the surface so they land in the occupied voxel
    eps = 1e-3 / rng_range
    hits = p + (tmin[hit] + eps)[:, None] * (ends[hit] - p)
    flags = face[hit] < gt.n_target_faces
    free = np.concatenate([p + tg[ground][:, None] * (ends[ground] - p), ends[~hit & ~ground]])
    return hits, flags, free, face[hit][flags]


def step_sensors(state, scenario, world, gt, sensors, t, lidar=True, camera=True, directions=None):
    """One sensing pass at drone ``state`` (5-vector pose).

    Updates ``world`` (LiDAR) and ``sensors`` (observed and covered vertex
    records); returns the indices newly covered by the camera.
    """
    pose = np.asarray(state, dtype=float)
    if lidar:
        dirs = fibonacci_directions(scenario.lidar_rays) if directions is None else directions
        hits, flags, free, tfaces = lidar_scan(gt, pose[:3], scenario.lidar_range, dirs)
        world.integrate_scan(pose[:3], hits, flags, free)
        if len(tfaces):
            vs = np.unique(gt.target.faces[tfaces].ravel())
            new = vs[~sensors.observed[vs]]
            sensors.observed[new] = True
            sensors.first_seen[new] = t
    new_cov = np.zeros(0, np.int64)
    if camera:
        todo = np.flatnonzero(gt.observable & ~sensors.covered)
        if len(todo):
            vis = visibility(pose[None], gt.merged, scenario.camera, todo)[0]
            new_cov = vis[vis < gt.target.n_vertices]
            sensors.covered[new_cov] = True
    return new_cov


# -- completeness ------------------------------------------------------------

class CompletenessGrid:
    """Surface voxels of a mesh at ``voxel`` size, each sample owned by the
    nearest corner of its triangle."""

    def __init__(self, mesh, voxel=0.05, exclude_faces=None):
        self.voxel = voxel
        keep = np.ones(mesh.n_faces, bool) if exclude_faces is None else ~np.asarray(exclude_faces, bool)
        pts, owner = [], []
        V = mesh.vertices
        for f in mesh.faces[keep]:
            a, b, c = V[f]
            L = max(np.linalg.norm(b - a), np.linalg.norm(c - a), np.linalg.norm(c - b))
            n = max(int(np.ceil(2 * L / voxel)), 1)
            i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
            m = i + j <= n
            u, w = i[m] / n, j[m] / n
            bary = np.stack([1 - u - w, u, w], axis=1)
            pts.append(a + np.outer(u, b - a) + np.outer(w, c - a))
            owner.append(f[np.argmax(bary, axis=1)])
        pts = np.concatenate(pts)
        self.owner = np.concatenate(owner)
        keys = np.floor(pts / voxel).astype(np.int64)
        _, self.cell, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        self.cell = self.cell.ravel()
        self.n_cells = len(counts)

    def percent(self, covered):
        covered = np.asarray(covered, bool)
        if self.n_cells == 0:
            return 0.0
        hit = np.unique(self.cell[covered[self.owner]])
        return 100.0 * len(hit) / self.n_cells


def compute_completeness(covered, gt_mesh, voxel=0.05, exclude_faces=None):
    """Percent of ground-truth surface voxels recalled by covered vertices.

    ``covered`` is a boolean vertex mask or an index array.
    """
    cov = np.asarray(covered)
    if cov.dtype != bool:
        mask = np.zeros(gt_mesh.n_vertices, bool)
        mask[cov.astype(np.int64)] = True
        cov = mask
    return CompletenessGrid(gt_mesh, voxel, exclude_faces).percent(cov)


# -- mission -----------------------------------------------------------------

@dataclass
class MissionConfig:
    variant: str = "full"
    mode: str = "deterministic"
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    dt: float = 0.05
    global_period: float = 1.0
    lidar_period: float = 0.2
    camera_period: float = 0.1
    horizon: float = 10.0
    global_load: float = 0.0
    speed: float = 1.0
    t_max: float = None

    def __post_init__(self):
        if self.variant not in ("full", "no-cagp", "no-vcto"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode not in ("deterministic", "serial", "async"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class MetricsRecord:
    flight_time: float = 0.0
    path_length: float = 0.0
    completeness: float = 0.0
    success: bool = False
    fail_cause: str = ""
    local_ms: list = field(default_factory=list)
    global_ms: list = field(default_factory=list)
    min_clearance: float = float("inf")
    revisits: int = 0
    global_cycles: int = 0
    local_replans: int = 0
    completeness_trace: list = field(default_factory=list)
    wall_s: float = 0.0

    def row(self, run, variant, seed, timing=True):
        lm = np.array(self.local_ms) if timing and self.local_ms else None
        gm = np.array(self.global_ms) if timing and self.global_ms else None
        return [fmt(run), variant, fmt(seed), fmt(self.flight_time), fmt(self.path_length),
                fmt(self.completeness), fmt(self.success), self.fail_cause,
                fmt(float(lm.mean()) if lm is not None else float("nan")),
                fmt(float(np.percentile(lm, 99)) if lm is not None else float("nan")),
                fmt(float(gm.mean()) if gm is not None else float("nan")),
                fmt(self.min_clearance)]


def write_metrics_csv(rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r)


class Mission:
    """State of one closed-loop run. The drivers ``run_deterministic``,
    ``run_serial`` and ``run_async`` schedule its planning and physics steps."""

    def __init__(self, scenario, predictor, config, seed=0):
        self.sc = scenario
        self.cfg = config
        self.seed = seed
        self.gt = GroundTruth(scenario)
        self.world = scenario.make_world()
        self.pred = predictor
        nv = scenario.target.n_vertices
        self.sensors = SensorState(np.zeros(nv, bool), np.zeros(nv, bool), np.full(nv, np.inf))
        res = scenario.resolution
        self.clearance = scenario.drone_radius + 0.5 * res
        self.pcfg = replace(config.planner, drone_radius=self.clearance, sensor=scenario.camera,
                            consistency=config.variant != "no-cagp", seed=seed)
        self.wts = replace(config.weights, v_max=scenario.v_max, omega_max=scenario.omega_max,
                           clearance=self.clearance)
        self.memory = PlannerMemory()
        self.t = 0.0
        self.state = np.zeros((4, 5))
        self.state[0] = scenario.start
        self.traj = None
        self.traj_t0 = 0.0
        self.traj_nodes = []  # (junction time, path index) for the current trajectory
        self.traj_reaches_end = False
        self.path = None
        self.progress = 0
        self.nothing_left = False
        self.cycle = 0
        self.buffer = PathBuffer()
        self.seen_cycle = -1
        self.metrics = MetricsRecord()
        self.trace = []
        self.coverage_log = []
        self.t_max = config.t_max if config.t_max is not None else scenario.t_max
        self.pending_spawns = sorted(scenario.spawn_events, key=lambda e: e.t)
        self.directions = fibonacci_directions(scenario.lidar_rays)
        self._scan_count = 0
        self._inliers = (None, None)
        self.grid = CompletenessGrid(scenario.target, 0.05, self.gt.ground_face)
        self.done = False
        self._last_pos = self.state[0, :3].copy()
        self._lock = threading.Lock()
        self._init_regions()

    # -- helpers ----------------------------------------------------------
    def _init_regions(self, k=6):
        obs = np.flatnonzero(self.gt.observable)
        P = self.sc.target.vertices[obs]
        k = min(k, len(P))
        centers = P[farthest_point_sample(P, k, start_index=0)]
        self.region = np.argmin(np.linalg.norm(self.sc.target.vertices[:, None] - centers[None], axis=-1), axis=1)
        self._region_seq = []

    def pose(self):
        return self.state[0].copy()

    def _sense(self, lidar, camera, pose=None):
        p = self.state[0] if pose is None else pose
        dirs = self.directions
        if lidar:
            # rotate the pattern a little each scan to fill gaps over time
            a = 2.399963 * self._scan_count
            c, s = np.cos(a), np.sin(a)
            dirs = dirs @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])
            self._scan_count += 1
        # the distance field is refreshed lazily, when a planner needs it
        new = step_sensors(p, self.sc, self.world, self.gt, self.sensors, self.t, lidar, camera, dirs)
        if len(new):
            self.coverage_log.append((self.t, len(new)))
            if len(new) >= 3:
                r = int(np.bincount(self.region[new]).argmax())
                if not self._region_seq or self._region_seq[-1] != r:
                    self._region_seq.append(r)
        return new

    def _spawn(self):
        while self.pending_spawns and self.pending_spawns[0].t <= self.t + 1e-9:
            ev = self.pending_spawns.pop(0)
            self.gt.add_obstacle(ev.mesh)
            log.info("t=%.2f obstacle spawned", self.t)

    def _inlier_set(self, mesh):
        if self._inliers[0] is mesh:
            return self._inliers[1]
        inl = build_inlier_set(mesh, self.pcfg.n_rep, self.seed, self.pcfg.k_neighbors)
        self._inliers = (mesh, inl)
        return inl

    # -- global planning --------------------------------------------------
    def global_inputs(self):
        with self._lock:
            self.world.ensure_esdf()
            return (self.world.snapshot(), self.pose(), self.sensors.covered.copy(),
                    self.sensors.observed.copy(), self.sensors.first_seen.copy(), self.t)

    def global_plan(self, world, pose, covered, observed, first_seen, t):
        mesh, targets = self.pred.predict(t, observed, first_seen, self.cycle)
        uncovered = targets[~covered[targets]]
        if self.cfg.variant == "no-cagp":
            self.memory.clear()
        self.memory.cycle = self.cycle
        gp = plan_global(mesh, uncovered, pose, self.memory, world, self.pcfg, self._inlier_set(mesh))
        self.cycle += 1
        return gp

    def publish_global(self, gp):
        self.buffer.publish(gp.path)
        self.nothing_left = len(gp.viewpoints) == 0
        self.metrics.global_cycles += 1

    # -- local planning ---------------------------------------------------
    def _remaining_viewpoints(self):
        if self.path is None:
            return []
        return [n.pose for n in self.path.nodes[self.progress + 1:] if n.is_viewpoint]

    def _slice(self):
        """Nodes after the current progress within the horizon, with their path indices."""
        nodes = self.path.nodes
        out, idx = [], []
        prev = self.state[0, :3]
        dist = 0.0
        for k in range(self.progress + 1, len(nodes)):
            nd = nodes[k]
            seg = float(np.linalg.norm(nd.position - prev))
            if dist + seg > self.cfg.horizon and out:
                break
            if dist + seg > self.cfg.horizon:
                s = (self.cfg.horizon - dist) / seg
                p = prev + s * (nd.position - prev)
                out.append(PathNode.waypoint(p, nd.pose[3], nd.pose[4]))
                idx.append(-1)
                break
            out.append(nd)
            idx.append(k)
            dist += seg
            prev = nd.position
        return out, idx

    def adopt_path(self, path):
        """Take a newly published path unless it keeps the remaining
        viewpoint order of the current one."""
        new_vps = [n.pose for n in path.nodes[1:] if n.is_viewpoint]
        if self.path is not None and self.traj is not None and new_vps == self._remaining_viewpoints():
            return False
        self.path = path
        self.progress = 0
        return True

    def local_plan(self):
        """Optimise a trajectory over the current slice; returns True if a
        new trajectory was published."""
        if self.path is None:
            return False
        nodes, idx = self._slice()
        if not nodes:
            self.traj = None
            self.traj_nodes = []
            return False
        start = PathNode(tuple(float(x) for x in self.state[0]), WAYPOINT)
        sl = CoveragePath([start] + nodes, self.path.cycle)
        world = self.world
        ref = mapping.astar_refine(world, sl, clearance=self.clearance)
        ids = {id(n): k for n, k in zip(nodes, idx)}
        res = optimize_local(ref, world, self.wts, self.state, soft_viewpoints=self.cfg.variant == "no-vcto")
        self.metrics.local_replans += 1
        if res.infeasible:
            log.info("t=%.2f local trajectory infeasible, holding", self.t)
            self._hold()
            return True
        self.traj = res.traj
        self.traj_t0 = self.t
        jt = res.traj.junction_times
        self.traj_nodes = [(jt[k], ids.get(id(n), -1), n) for k, n in enumerate(res.nodes[1:], 1)]
        self.traj_reaches_end = idx[-1] == len(self.path.nodes) - 1
        return True

    def _hold(self):
        """Brake to rest over one second along the current velocity."""
        start = self.state.copy()
        end = np.zeros((4, 5))
        end[0] = start[0]
        end[0, :3] += 0.5 * start[1, :3]
        m = Minco(start, end)
        self.traj = m.construct(np.zeros((0, 5)), np.array([1.0]))
        self.traj_t0 = self.t
        self.traj_nodes = []
        self.traj_reaches_end = False

    def needs_replan(self):
        if self.path is None:
            return False
        if self.traj is None:
            return self.progress < len(self.path.nodes) - 1
        t_rel = self.t - self.traj_t0
        remaining = self.traj.duration - t_rel
        if not self.traj_reaches_end and remaining < 1.0:
            return True
        # predicted collision on the next few seconds of the current map
        ts = np.linspace(t_rel, min(self.traj.duration, t_rel + 3.0), 16)
        pts = self.traj.evaluate(ts)[:, :3]
        if self.world.esdf_stale:
            return self._occupied_near(pts, 0.75 * self.clearance)
        phi, _ = self.world.esdf_query(pts)
        return bool(np.min(phi) < 0.75 * self.clearance)

    def _occupied_near(self, pts, dist):
        """Any occupied voxel centre within ``dist`` of the points (label lookup,
        usable while the distance field is stale)."""
        w = self.world
        r = int(np.ceil(dist / w.resolution))
        off = np.stack(np.meshgrid(*[np.arange(-r, r + 1)] * 3, indexing="ij"), -1).reshape(-1, 3)
        idx = w.index(pts)[:, None, :] + off[None]
        idx = np.clip(idx, 0, np.array(w.dims) - 1).reshape(-1, 3)
        occ = w.occupied[idx[:, 0], idx[:, 1], idx[:, 2]].reshape(len(pts), -1)
        d = np.linalg.norm(w.center(idx).reshape(len(pts), -1, 3) - pts[:, None], axis=-1)
        return bool(np.any(occ & (d < dist)))

    # -- physics ----------------------------------------------------------
    def advance(self, dt, substeps=5):
        t0 = self.t
        for s in range(1, substeps + 1):
            self.t = t0 + dt * s / substeps
            if self.traj is not None:
                tr = self.t - self.traj_t0
                prev_tr = tr - dt / substeps
                te = min(tr, self.traj.duration)
                for d in range(4):
                    self.state[d] = self.traj.evaluate(te, d)
                if tr >= self.traj.duration:
                    self.state[1:] = 0.0
                for jt, k, node in self.traj_nodes:
                    if prev_tr < jt <= tr + 1e-12:
                        if k >= 0:
                            self.progress = max(self.progress, k)
                        if node.is_viewpoint:
                            # the camera fires at the viewpoint junction
                            q = self.traj.evaluate(jt)
                            self._sense(False, True, q)
            p = self.state[0, :3]
            self.metrics.path_length += float(np.linalg.norm(p - self._last_pos))
            self._last_pos = p.copy()
            c = self.gt.clearance(p)
            self.metrics.min_clearance = min(self.metrics.min_clearance, c)
            if c < self.sc.drone_radius:
                self.metrics.fail_cause = "collision"
                self.done = True
                return
        if self.traj is not None and self.t - self.traj_t0 >= self.traj.duration and self.traj_reaches_end:
            self.progress = len(self.path.nodes) - 1

    def record(self):
        p = self.state[0]
        v = self.state[1]
        self.trace.append((self.t, p[0], p[1], p[2], p[3], wrap_angle(p[4]), v[0], v[1], v[2]))
        if len(self.trace) % 20 == 1:
            self.metrics.completeness_trace.append((self.t, self.grid.percent(self.sensors.covered)))

    def path_done(self):
        if self.path is None:
            return False
        at_end = self.progress >= len(self.path.nodes) - 1
        settled = self.traj is None or self.t - self.traj_t0 >= self.traj.duration
        return at_end and settled

    def check_end(self):
        if self.done:
            return True
        if self.nothing_left and self.path_done():
            self.metrics.success = True
            self.done = True
        elif self.t >= self.t_max - 1e-9:
            self.metrics.fail_cause = "timeout"
            self.done = True
        return self.done

    def finish(self):
        m = self.metrics
        m.flight_time = round(self.t, 9)
        m.completeness = self.grid.percent(self.sensors.covered)
        m.completeness_trace.append((self.t, m.completeness))
        seq = self._region_seq
        seen, rev = set(), 0
        for a, b in zip(seq[:-1], seq[1:]):
            seen.add(a)
            if b in seen:
                rev += 1
        m.revisits = rev
        if not m.success and not m.fail_cause:
            m.fail_cause = "timeout"
        return m

    def write_trace(self, fh):
        for r in self.trace:
            rec = dict(zip(("t", "x", "y", "z", "pitch", "yaw", "vx", "vy", "vz"),
                           (float(fmt(float(x))) for x in r)))
            fh.write(json.dumps(rec) + "\n")


def _every(period, dt):
    return max(int(round(period / dt)), 1)


def run_deterministic(mission):
    """Both planning loops interleaved on one thread with a fixed schedule:
    sense, global (every global period), local, then physics, per tick."""
    cfg = mission.cfg
    g_every = _every(cfg.global_period, cfg.dt)
    l_every = _every(cfg.lidar_period, cfg.dt)
    c_every = _every(cfg.camera_period, cfg.dt)
    k = 0
    while True:
        mission._spawn()
        mission._sense(k % l_every == 0, k % c_every == 0)
        if k % g_every == 0:
            gp = mission.global_plan(*mission.global_inputs())
            mission.publish_global(gp)
        snap = mission.buffer.read()
        replanned = False
        if snap is not None and snap[1] != mission.seen_cycle:
            mission.seen_cycle = snap[1]
            if mission.adopt_path(snap[0]):
                mission.local_plan()
                replanned = True
        if not replanned and mission.needs_replan():
            mission.local_plan()
        mission.record()
        if mission.check_end():
            break
        mission.advance(cfg.dt)
        k += 1
        if mission.done:
            break
    return mission.finish()


def run_serial(mission):
    """Sense, then a blocking global cycle, then local planning, paced to
    wall-clock time like the async driver. Local replans happen only after
    a global cycle. Latency is wall-clock from the snapshot taken at the
    start of the cycle, or from the earlier tick at which a replan was
    found necessary and had to wait for that cycle."""
    cfg = mission.cfg
    g_every = _every(cfg.global_period, cfg.dt)
    l_every = _every(cfg.lidar_period, cfg.dt)
    c_every = _every(cfg.camera_period, cfg.dt)
    tick_wall = cfg.dt / max(cfg.speed, 1e-9)
    wall0 = time.perf_counter()
    pending = None
    k = 0
    while True:
        delay = wall0 + k * tick_wall - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        mission._spawn()
        mission._sense(k % l_every == 0, k % c_every == 0)
        if k % g_every == 0:
            t_snap = time.perf_counter()
            inputs = mission.global_inputs()
            gp = mission.global_plan(*inputs)
            if cfg.global_load > 0:
                time.sleep(cfg.global_load)
            mission.metrics.global_ms.append(1e3 * (time.perf_counter() - t_snap))
            mission.publish_global(gp)
            snap = mission.buffer.read()
            mission.seen_cycle = snap[1]
            mission.adopt_path(snap[0])
            if mission.local_plan() or mission.traj is not None:
                t0 = t_snap if pending is None else pending
                mission.metrics.local_ms.append(1e3 * (time.perf_counter() - t0))
            pending = None
        elif pending is None and mission.needs_replan():
            pending = time.perf_counter()
        mission.record()
        if mission.check_end():
            break
        mission.advance(cfg.dt)
        k += 1
        if mission.done:
            break
    return mission.finish()


def run_async(mission):
    """Global planner on its own thread at the global rate; sensing, local
    planning and physics on the calling thread at the local rate, paced to
    wall-clock time scaled by ``speed``."""
    cfg = mission.cfg
    l_every = _every(cfg.lidar_period, cfg.dt)
    c_every = _every(cfg.camera_period, cfg.dt)
    stop = threading.Event()
    tick_wall = cfg.dt / max(cfg.speed, 1e-9)
    first = threading.Event()
    errors = []

    def global_loop():
        next_t = 0.0
        try:
            while not stop.is_set():
                with mission._lock:
                    now = mission.t
                if now + 1e-9 < next_t:
                    time.sleep(min(0.005, tick_wall))
                    continue
                w0 = time.perf_counter()
                gp = mission.global_plan(*mission.global_inputs())
                if cfg.global_load > 0:
                    time.sleep(cfg.global_load)
                mission.metrics.global_ms.append(1e3 * (time.perf_counter() - w0))
                with mission._lock:
                    mission.publish_global(gp)
                first.set()
                next_t = now + cfg.global_period
        except Exception as e:  # surfaced on the main thread
            errors.append(e)
            first.set()

    th = threading.Thread(target=global_loop, name="global-planner", daemon=True)
    th.start()
    first.wait()
    wall0 = time.perf_counter()
    k = 0
    try:
        while not errors:
            target = wall0 + k * tick_wall
            delay = target - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            with mission._lock:
                mission._spawn()
                mission._sense(k % l_every == 0, k % c_every == 0)
            t_pub = time.perf_counter()
            snap = mission.buffer.read()
            replanned = False
            if snap is not None and snap[1] != mission.seen_cycle:
                mission.seen_cycle = snap[1]
                if mission.adopt_path(snap[0]):
                    replanned = mission.local_plan()
            if not replanned and mission.needs_replan():
                replanned = mission.local_plan()
            if replanned:
                mission.metrics.local_ms.append(1e3 * (time.perf_counter() - t_pub))
            with mission._lock:
                mission.record()
                if mission.check_end():
                    break
                mission.advance(cfg.dt)
            k += 1
            if mission.done:
                break
    finally:
        stop.set()
        th.join()
    if errors:
        raise errors[0]
    return mission.finish()


def make_predictor(kind, scenario, seed=0):
    gt = GroundTruth(scenario)
    ev = scenario.evolving
    return PredictorStub(kind, scenario.target, gt.observable, ev.get("sigma", 0.25),
                         ev.get("reveal_lag", 3.0), ev.get("smooth", 3), seed)


def run_mission(scenario, predictor="oracle_gt", config=None, seed=None, trace_fh=None):
    """Run one mission; returns ``(MetricsRecord, Mission)``."""
    cfg = config or MissionConfig()
    seed = scenario.seed if seed is None else seed
    pred = make_predictor(predictor, scenario, seed) if isinstance(predictor, str) else predictor
    w0 = time.perf_counter()
    m = Mission(scenario, pred, cfg, seed)
    if cfg.mode == "deterministic":
        rec = run_deterministic(m)
    elif cfg.mode == "serial":
        rec = run_serial(m)
    else:
        rec = run_async(m)
    rec.wall_s = time.perf_counter() - w0
    if trace_fh is not None:
        m.write_trace(trace_fh)
    return rec, m


# -- ablations ---------------------------------------------------------------

@dataclass
class AblationConfig:
    scenario: str = "cube"
    predictor: str = "noisy"
    variants: tuple = VARIANTS
    seeds: tuple = tuple(range(10))
    global_load: float = 0.3
    t_max: float = 1500.0
    timing_mode: str = "async"
    async_window: float = 20.0


def variant_config(variant, cfg):
    """MissionConfig for an ablation variant. Flight-time runs use the
    deterministic schedule; ``no-async`` runs serial with the global load."""
    if variant == "no-async":
        return MissionConfig("full", "serial", global_load=cfg.global_load, t_max=cfg.t_max)
    return MissionConfig(variant, "deterministic", t_max=cfg.t_max)


def run_ablation_suite(cfg=None, out=None):
    """Run every variant over every seed; returns (rows, records) and writes
    the metrics CSV to ``out`` (path or file object) if given."""
    cfg = cfg or AblationConfig()
    scenario = builtin_scenario(cfg.scenario) if isinstance(cfg.scenario, str) else cfg.scenario
    rows, recs = [], []
    run = 0
    for variant in cfg.variants:
        for seed in cfg.seeds:
            mc = variant_config(variant, cfg)
            rec, _ = run_mission(scenario, cfg.predictor, mc, seed)
            rows.append(rec.row(run, variant, seed, timing=mc.mode != "deterministic"))
            recs.append((variant, seed, rec))
            run += 1
    if out is not None:
        if isinstance(out, (str, bytes)):
            with open(out, "w") as fh:
                write_metrics_csv(rows, fh)
        else:
            write_metrics_csv(rows, out)
    return rows, recs


def latency_comparison(scenario, seeds=(0,), global_load=0.3, window=15.0, predictor="oracle_gt"):
    """Mean local response latency (ms) for async and serial runs over a
    short mission window with an artificial global load."""
    # compile the jitted kernels up front so no sample pays for it
    w = mapping.VoxelWorld((-1, -1, -1), (4, 4, 4), 0.5)
    w.recompute_esdf()
    optimize_local(CoveragePath([PathNode.waypoint([0, 0, 0]), PathNode.waypoint([0.5, 0, 0])]), w, max_iter=2)
    out = {}
    for mode in ("async", "serial"):
        lat = []
        for seed in seeds:
            mc = MissionConfig("full", mode, global_load=global_load, t_max=window)
            rec, _ = run_mission(scenario, predictor, mc, seed)
            lat.extend(rec.local_ms)
        out[mode] = float(np.mean(lat)) if lat else float("nan")
    return out


def summarize(recs):
    """Mean/std per variant of flight time, completeness, success and latency."""
    by = {}
    for variant, _, r in recs:
        by.setdefault(variant, []).append(r)
    lines = io.StringIO()
    lines.write(f"{'variant':<10} {'flight_s':>12} {'std':>8} {'compl_%':>9} {'success':>8} {'local_ms':>9}\n")
    for v, rs in by.items():
        ft = np.array([r.flight_time for r in rs])
        cp = np.array([r.completeness for r in rs])
        sc = np.mean([r.success for r in rs])
        lm = [x for r in rs for x in r.local_ms]
        lines.write(f"{v:<10} {fmt(ft.mean()):>12} {fmt(ft.std()):>8} {fmt(cp.mean()):>9} {fmt(sc):>8} "
                    f"{fmt(float(np.mean(lm)) if lm else float('nan')):>9}\n")
    return lines.getvalue()
