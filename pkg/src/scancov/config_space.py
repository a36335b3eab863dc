"""Interior anchor points and intersection-parity safety checks on a closed mesh."""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import farthest_point_sample

log = logging.getLogger(__name__)

DEFAULT_NEIGHBORS = 16


class ConfigSpaceError(RuntimeError):
    pass


@dataclass
class CuttingPlane:
    n_opt: np.ndarray
    neighbor_normals: np.ndarray
    neighbor_points: np.ndarray
    degenerate: bool = False


@dataclass
class InlierSet:
    inliers: np.ndarray
    representative_map: dict
    discarded: list = field(default_factory=list)

    def __post_init__(self):
        self.index = cKDTree(self.inliers) if len(self.inliers) else None

    def __len__(self):
        return len(self.inliers)


def _orthogonal(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    v = np.cross(n, a)
    return v / np.linalg.norm(v)


def _orient(n):
    # deterministic sign: positive z, then y, then x
    for k in (2, 1, 0):
        if abs(n[k]) > 1e-12:
            return n if n[k] > 0 else -n
    return n


def normal_covariance(normals):
    N = np.asarray(normals, dtype=float)
    d = N - N.mean(axis=0)
    return d.T @ d / len(N)


def compute_cutting_plane(points, normals, iterations=0, rng=None, band=None):
    """Orientation minimising the spread of neighbour normals along it.

    With ``iterations == 0`` this is the smallest-eigenvalue eigenvector of
    the normal covariance. With ``iterations > 0`` the neighbourhood is
    re-selected each round as the points within ``band`` of the current
    plane through the neighbour centroid, starting from a random direction.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    N = np.asarray(normals, dtype=float).reshape(-1, 3)
    if iterations <= 0:
        return _plane_from(P, N)
    rng = np.random.default_rng(rng)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    anchor = P.mean(axis=0)
    if band is None:
        band = 0.5 * np.ptp(P, axis=0).max() + 1e-12
    plane = None
    for _ in range(iterations):
        sel = np.abs((P - anchor) @ n) <= band
        if sel.sum() < 3:
            sel[:] = True
        plane = _plane_from(P[sel], N[sel])
        if abs(abs(plane.n_opt @ n) - 1.0) < 1e-12:
            break
        n = plane.n_opt
    return plane


def _plane_from(P, N):
    C = normal_covariance(N)
    w, V = np.linalg.eigh(C)
    if w[-1] <= 1e-14:
        m = N.mean(axis=0)
        m /= np.linalg.norm(m)
        return CuttingPlane(_orient(_orthogonal(m)), N, P, degenerate=True)
    n = V[:, 0]
    n = _orient(n / np.linalg.norm(n))
    return CuttingPlane(n, N, P)


def compute_inlier(plane):
    """Least-squares closest point to the lines ``p_v + s n_v``.

    Returns ``(point, rank_deficient)``. A rank-deficient system (parallel
    lines) is solved in the minimum-norm sense about the neighbour centroid.
    """
    P, N = plane.neighbor_points, plane.neighbor_normals
    Nn = N / np.linalg.norm(N, axis=1, keepdims=True)
    proj = np.eye(3)[None] - Nn[:, :, None] * Nn[:, None, :]
    A = proj.sum(axis=0)
    centroid = P.mean(axis=0)
    b = np.einsum("kij,kj->i", proj, P - centroid)
    x, _, rank, _ = np.linalg.lstsq(A, b, rcond=1e-10)
    return centroid + x, bool(rank < 3)


def build_inlier_set(mesh, n_rep=100, seed=0, k=DEFAULT_NEIGHBORS, iterations=0):
    """Interior anchor points for a watertight mesh.

    Representatives are chosen by farthest-point sampling over the
    vertices; each yields one inlier from its ``k`` nearest vertices.
    Candidates that fail the far-point parity check are repaired by a
    half-thickness step along the inward normal, and dropped if that fails
    too.
    """
    if not mesh.is_watertight:
        raise ConfigSpaceError("inlier construction requires a watertight mesh")
    V, Nv = mesh.vertices, mesh.vertex_normals
    n_rep = min(n_rep, mesh.n_vertices)
    k = min(k, mesh.n_vertices)
    reps = farthest_point_sample(V, n_rep, seed=seed)
    _, nbr = mesh.vertex_tree.query(V[reps], k=k)
    nbr = np.asarray(nbr).reshape(len(reps), k)
    cands = np.empty((len(reps), 3))
    for i, r in enumerate(reps):
        plane = compute_cutting_plane(V[nbr[i]], Nv[nbr[i]], iterations=iterations, rng=seed + i)
        cands[i], _ = compute_inlier(plane)
    ok = strictly_inside(mesh, cands)
    bad = np.flatnonzero(~ok)
    if len(bad):
        cands[bad] = _inward_step(mesh, reps[bad])
        ok[bad] = np.isfinite(cands[bad]).all(axis=1) & strictly_inside(mesh, cands[bad])
    discarded = [int(reps[i]) for i in np.flatnonzero(~ok)]
    if discarded:
        log.debug("build_inlier_set: discarded %d representatives", len(discarded))
    keep = np.flatnonzero(ok)
    if len(keep) == 0:
        raise ConfigSpaceError("no inlier survived interior verification")
    rep_map = {int(reps[i]): j for j, i in enumerate(keep)}
    return InlierSet(cands[keep], rep_map, discarded)


def strictly_inside(mesh, points):
    """Inside by parity toward three unrelated far references.

    Points on the surface get inconsistent parities and are rejected.
    """
    lo, hi = mesh.bounds
    span = hi - lo + 1.0
    refs = [hi + span * np.array([3.1415926, 2.7182818, 1.4142135]),
            lo - span * np.array([2.2360679, 1.7320508, 3.3166247]),
            np.array([lo[0] - 2.6457513 * span[0], hi[1] + 1.9 * span[1], lo[2] - 2.4494897 * span[2]])]
    ok = np.ones(len(points), bool)
    for far in refs:
        ok &= mesh.contains(points, far=far)
    return ok


def _inward_step(mesh, verts):
    """Vertex moved inward by min(0.5 * mean edge, half the local thickness)."""
    V, Nv = mesh.vertices, mesh.vertex_normals
    p = V[verts]
    n = Nv[verts]
    reach = 4.0 * np.ptp(V, axis=0).max() + 1.0
    start = p - 1e-7 * n
    _, tmin, _ = mesh.bvh.segments(start, start - reach * n)
    depth = np.where(np.isfinite(tmin), tmin * reach, np.inf)
    step = np.minimum(0.5 * mesh.edge_length_avg, 0.5 * depth)
    return p - step[:, None] * n


def parity_outside(points, mesh, inliers):
    """Parity classification against the nearest inlier.

    Returns ``(outside, boundary)`` boolean arrays. ``boundary`` marks points
    whose parity disagrees between the two nearest inliers, which happens
    when a point sits on the surface.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    kq = min(2, len(inliers))
    _, idx = inliers.index.query(pts, k=kq)
    idx = np.asarray(idx).reshape(len(pts), kq)
    c0 = mesh.segment_crossings(pts, inliers.inliers[idx[:, 0]])
    outside = c0 % 2 == 1
    boundary = np.zeros(len(pts), bool)
    if kq == 2:
        c1 = mesh.segment_crossings(pts, inliers.inliers[idx[:, 1]])
        boundary = (c1 % 2) != (c0 % 2)
    # a point coinciding with an inlier has an empty segment
    same = np.all(pts == inliers.inliers[idx[:, 0]], axis=1)
    outside[same] = False
    return outside, boundary


def safe_mask(points, mesh, inliers, world=None, radius=0.0):
    """Vectorised safety: outside the mesh and, with a world, ESDF > radius."""
    outside, boundary = parity_outside(points, mesh, inliers)
    safe = outside & ~boundary
    if world is not None:
        pts = np.atleast_2d(points)
        inside = world.inside(pts)
        safe &= inside
        if safe.any():
            d, _ = world.esdf_query(pts[safe])
            tmp = safe.copy()
            tmp[safe] = d > radius
            safe = tmp
    return safe


def is_safe_configuration(p, mesh, inliers, world=None, radius=0.0):
    return bool(safe_mask(np.asarray(p, dtype=float)[None], mesh, inliers, world, radius)[0])
