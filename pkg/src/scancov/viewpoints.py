"""Camera viewpoints: visibility, candidate sampling and gravitational pruning."""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config_space import safe_mask
from .path import wrap_angle

log = logging.getLogger(__name__)

PITCH_MIN = np.deg2rad(-100.0)
PITCH_MAX = np.deg2rad(45.0)


@dataclass(frozen=True)
class SensorModel:
    hfov: float = np.deg2rad(90.0)
    vfov: float = np.deg2rad(75.0)
    max_range: float = 6.0
    max_incidence: float = np.deg2rad(75.0)

    def __post_init__(self):
        if not (0 < self.hfov < np.pi and 0 < self.vfov < np.pi):
            raise ValueError("field of view must lie in (0, pi)")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass
class Viewpoint:
    position: np.ndarray
    pitch: float
    yaw: float
    covered: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    vp_id: int = -1

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.pitch = float(np.clip(self.pitch, PITCH_MIN, PITCH_MAX))
        self.yaw = wrap_angle(self.yaw)
        self.covered = np.asarray(self.covered, dtype=np.int64)

    @property
    def vc(self):
        return len(self.covered)

    @property
    def pose(self):
        return np.array([*self.position, self.pitch, self.yaw])

    @classmethod
    def from_pose(cls, pose, covered=(), vp_id=-1):
        return cls(pose[:3], pose[3], pose[4], np.asarray(covered, np.int64), vp_id)


def optical_axis(pitch, yaw):
    pitch = np.asarray(pitch, dtype=float)
    yaw = np.asarray(yaw, dtype=float)
    return np.stack([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)], axis=-1)


def look_at(position, target):
    """Pitch and yaw pointing the optical axis from ``position`` to ``target``,
    with pitch clamped to the gimbal range."""
    d = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    yaw = np.arctan2(d[..., 1], d[..., 0])
    pitch = np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1]))
    return np.clip(pitch, PITCH_MIN, PITCH_MAX), yaw


def _frustum_filter(poses, points, normals, sensor):
    """Boolean (m, n) mask of frustum, range and incidence tests."""
    P = poses[:, None, :3]
    r = points[None] - P
    dist = np.linalg.norm(r, axis=-1)
    pitch, yaw = poses[:, 3], poses[:, 4]
    f = optical_axis(pitch, yaw)
    right = np.stack([np.sin(yaw), -np.cos(yaw), np.zeros_like(yaw)], axis=-1)
    up = np.cross(right, f)
    xf = np.einsum("mnk,mk->mn", r, f)
    xr = np.einsum("mnk,mk->mn", r, right)
    xu = np.einsum("mnk,mk->mn", r, up)
    th, tv = np.tan(sensor.hfov / 2), np.tan(sensor.vfov / 2)
    ok = (xf > 0) & (np.abs(xr) <= th * xf) & (np.abs(xu) <= tv * xf)
    ok &= (dist <= sensor.max_range) & (dist > 0)
    # incidence between surface normal and the direction back to the camera
    cosang = -np.einsum("mnk,nk->mn", r, normals) / np.maximum(dist, 1e-300)
    ok &= cosang >= np.cos(sensor.max_incidence)
    return ok


def visibility(poses, mesh, sensor, targets=None, chunk=256):
    """Visible target vertices for each pose.

    ``poses`` is (m, 5). Returns a list of sorted vertex-index arrays.
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    targets = np.arange(mesh.n_vertices) if targets is None else np.asarray(targets, dtype=np.int64)
    out = []
    if len(targets) == 0:
        return [np.zeros(0, np.int64) for _ in range(len(poses))]
    pts = mesh.vertices[targets]
    nrm = mesh.vertex_normals[targets]
    for s in range(0, len(poses), chunk):
        block = poses[s:s + chunk]
        mask = _frustum_filter(block, pts, nrm, sensor)
        pi, vi = np.nonzero(mask)
        if len(pi):
            counts = mesh.segment_crossings(block[pi, :3], pts[vi])
            keep = counts == 0
            pi, vi = pi[keep], vi[keep]
        for j in range(len(block)):
            out.append(np.sort(targets[vi[pi == j]]))
    return out


def visible_vertices(vp, mesh, sensor, targets=None):
    pose = vp.pose if isinstance(vp, Viewpoint) else np.asarray(vp, dtype=float)
    return visibility(pose[None], mesh, sensor, targets)[0]


@dataclass
class GenerationReport:
    n_raw: int = 0
    n_safe: int = 0
    rejected_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def generate_candidates(mesh, uncovered, offset_d, inliers, world=None, sensor=SensorModel(),
                        radius=0.0, targets=None, report=None):
    """Two candidates per uncovered vertex at ``v +- offset_d * normal``,
    aimed back at the vertex; unsafe ones are dropped."""
    uncovered = np.asarray(sorted(set(np.asarray(uncovered, dtype=np.int64).tolist())), dtype=np.int64)
    if offset_d <= radius:
        raise ValueError("offset_d must exceed the drone radius")
    if len(uncovered) == 0:
        return []
    targets = uncovered if targets is None else np.asarray(targets, dtype=np.int64)
    v = mesh.vertices[uncovered]
    n = mesh.vertex_normals[uncovered]
    pos = np.concatenate([v + offset_d * n, v - offset_d * n])
    src = np.concatenate([uncovered, uncovered])
    aim = np.concatenate([v, v])
    safe = safe_mask(pos, mesh, inliers, world, radius)
    pos, src, aim = pos[safe], src[safe], aim[safe]
    pitch, yaw = look_at(pos, aim)
    poses = np.column_stack([pos, pitch, yaw])
    cov = visibility(poses, mesh, sensor, targets)
    cands = [Viewpoint(p[:3], p[3], p[4], c) for p, c in zip(poses, cov) if len(c)]
    if report is not None:
        report.n_raw = 2 * len(uncovered)
        report.n_safe = int(safe.sum())
        report.rejected_vertices = np.setdiff1d(uncovered, src)
    if not cands:
        log.info("generate_candidates: no safe candidate for %d uncovered vertices", len(uncovered))
    return cands


def _angdiff(a, b):
    """Shortest signed arc a - b."""
    return (np.asarray(a) - b + np.pi) % (2 * np.pi) - np.pi


def gravitational_pull(vp_pose, vc_i, nbr_poses, nbr_vc):
    """One coverage-weighted pull of a viewpoint toward weaker neighbours."""
    pose = np.array(vp_pose, dtype=float)
    nbr_poses = np.atleast_2d(nbr_poses)
    if len(nbr_poses) == 0:
        return pose
    w = np.asarray(nbr_vc, dtype=float) / float(vc_i)
    pose[:3] = pose[:3] + (w[:, None] * (nbr_poses[:, :3] - pose[:3])).sum(axis=0)
    pose[3] = pose[3] + (w * (nbr_poses[:, 3] - pose[3])).sum()
    pose[4] = pose[4] + (w * _angdiff(nbr_poses[:, 4], pose[4])).sum()
    pose[3] = float(np.clip(pose[3], PITCH_MIN, PITCH_MAX))
    pose[4] = wrap_angle(pose[4])
    return pose


@dataclass
class PruneResult:
    viewpoints: list
    residual: np.ndarray
    n_candidates: int
    iterations: int


def gravitational_prune(candidates, radius_r, mesh, sensor, uncovered, inliers=None, world=None,
                        radius=0.0, regenerate=None, max_iter=5):
    """Merge low-coverage candidates into stronger neighbours.

    Candidates are swept by descending coverage; each survivor is pulled
    toward its weaker neighbours within ``radius_r`` and those neighbours are
    dropped. A pull that lands on an unsafe pose is reverted. While coverage
    of ``uncovered`` is incomplete, ``regenerate(residual)`` supplies new
    candidates for another sweep, up to ``max_iter`` sweeps; the last sweep
    keeps unpulled candidates greedily so residual vertices still get a view.
    """
    uncovered = np.asarray(sorted(set(np.asarray(uncovered, np.int64).tolist())), dtype=np.int64)
    kept = []
    pool = list(candidates)
    n_total = len(pool)
    residual = uncovered
    it = 0
    while it < max_iter and len(pool):
        it += 1
        # the last permitted sweep keeps candidates in place so it can only add coverage
        last = it == max_iter and it > 1
        kept.extend(_sweep(pool, radius_r, mesh, sensor, residual, inliers, world, radius, pull=not last))
        covered = np.unique(np.concatenate([vp.covered for vp in kept])) if kept else np.zeros(0, np.int64)
        residual = np.setdiff1d(uncovered, covered)
        if len(residual) == 0 or regenerate is None:
            break
        pool = regenerate(residual)
        n_total += len(pool)
    if len(residual):
        log.info("gravitational_prune: %d vertices left uncovered after %d sweeps", len(residual), it)
    return PruneResult(kept, residual, n_total, it)


def _sweep(pool, radius_r, mesh, sensor, targets, inliers, world, radius, pull=True):
    vc = np.array([vp.vc for vp in pool], dtype=float)
    order = np.argsort(-vc, kind="stable")
    pos = np.array([vp.position for vp in pool])
    tree = cKDTree(pos)
    alive = np.ones(len(pool), bool)
    claimed = np.zeros(0, np.int64)
    out = []
    for i in order:
        if not alive[i]:
            continue
        alive[i] = False
        nbr = np.array([j for j in tree.query_ball_point(pos[i], radius_r) if alive[j] and vc[j] < vc[i]],
                       dtype=np.int64)
        vp = pool[i]
        if not pull:
            # greedy: keep only candidates that still add coverage
            fresh = np.setdiff1d(vp.covered, claimed)
            if len(fresh):
                out.append(vp)
                claimed = np.union1d(claimed, fresh)
            continue
        if len(nbr):
            nbr_poses = np.array([pool[j].pose for j in nbr])
            new = gravitational_pull(vp.pose, vc[i], nbr_poses, vc[nbr])
            ok = True
            if inliers is not None:
                ok = bool(safe_mask(new[None, :3], mesh, inliers, world, radius)[0])
            if ok:
                cov = visibility(new[None], mesh, sensor, targets)[0]
                vp = Viewpoint(new[:3], new[3], new[4], cov)
            alive[nbr] = False
        if vp.vc:
            out.append(vp)
    return out


def write_viewpoints_csv(viewpoints, path):
    with open(path, "w") as fh:
        for vp in viewpoints:
            x, y, z = vp.position
            fh.write(f"{x:.6g},{y:.6g},{z:.6g},{vp.pitch:.6g},{vp.yaw:.6g},{vp.vc}\n")


def read_viewpoints_csv(path):
    out = []
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    for row in data:
        vp = Viewpoint(row[:3], row[3], row[4])
        out.append((vp, int(row[5])))
    return out
