"""Mesh and point-set primitives shared by every planner stage."""
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from ._bvh import BVH, T_EPS


class MeshFormatError(ValueError):
    pass


class TriangleMesh:
    """Indexed triangle mesh. Treat instances as immutable.

    Derived quantities (normals, BVH, KD-tree, edge statistics) are computed
    lazily and cached, so a mesh can be shared read-only between planners.
    """

    def __init__(self, vertices, faces, normal_skip=None):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise IndexError("face index out of range")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex coordinates")
        v.flags.writeable = False
        f.flags.writeable = False
        self.vertices = v
        self.faces = f
        # faces flagged here (e.g. resting on the ground) do not bend vertex normals
        self.normal_skip = None if normal_skip is None else np.asarray(normal_skip, bool).copy()

    def __repr__(self):
        return f"TriangleMesh({len(self.vertices)} vertices, {len(self.faces)} faces)"

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @cached_property
    def face_cross(self):
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self):
        n = self.face_cross.copy()
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    @cached_property
    def face_centroids(self):
        return self.vertices[self.faces].mean(axis=1)

    @cached_property
    def vertex_normals(self):
        """Area-weighted average of incident face normals, unit length.

        Faces in ``normal_skip`` are ignored unless they are all a vertex has.
        """
        cross = self.face_cross
        if self.normal_skip is not None:
            cross = np.where(self.normal_skip[:, None], 1e-9 * cross, cross)
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], cross)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        out = np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)
        out.flags.writeable = False
        return out

    @cached_property
    def _edge_info(self):
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    @property
    def edges(self):
        """Unique undirected edges as sorted index pairs."""
        return self._edge_info[0]

    @cached_property
    def edge_length_avg(self):
        e = self.edges
        if len(e) == 0:
            return 0.0
        d = self.vertices[e[:, 0]] - self.vertices[e[:, 1]]
        return float(np.linalg.norm(d, axis=1).mean())

    @cached_property
    def is_watertight(self):
        counts = self._edge_info[1]
        return bool(len(counts) > 0 and np.all(counts == 2))

    @cached_property
    def vertex_adjacency(self):
        """CSR-style neighbour lists: ``(indptr, indices)``."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        indptr = np.searchsorted(both[:, 0], np.arange(self.n_vertices + 1))
        return indptr, both[:, 1]

    @cached_property
    def bvh(self):
        v = self.vertices
        return BVH(v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]])

    @cached_property
    def vertex_tree(self):
        return cKDTree(self.vertices)

    @cached_property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, rotation=None, translation=None):
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=float)
        return TriangleMesh(v, self.faces, self.normal_skip)

    def with_vertices(self, vertices):
        return TriangleMesh(vertices, self.faces, self.normal_skip)

    def segment_crossings(self, origins, targets):
        """Vectorised crossing counts for many segments."""
        counts, _, _ = self.bvh.segments(origins, targets)
        return counts

    def contains(self, points, far=None):
        """Even-odd point-in-mesh test against a far exterior reference."""
        points = np.atleast_2d(points)
        lo, hi = self.bounds
        if far is None:
            # irrational-ish offsets keep the reference off any mesh symmetry plane
            far = hi + (hi - lo + 1.0) * np.array([3.1415926, 2.7182818, 1.4142135])
        counts = self.segment_crossings(points, np.broadcast_to(far, points.shape))
        return counts % 2 == 1


def load_mesh(path):
    """Read an ASCII OBJ file holding only ``v`` and triangular ``f`` records."""
    vertices, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise MeshFormatError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in rest[:3]])
                except ValueError as exc:
                    raise MeshFormatError(f"line {lineno}: {exc}") from None
            elif tag == "f":
                if len(rest) != 3:
                    raise MeshFormatError(f"line {lineno}: only triangle faces are supported")
                try:
                    idx = [int(tok.split("/")[0]) for tok in rest]
                except ValueError as exc:
                    raise MeshFormatError(f"line {lineno}: {exc}") from None
                faces.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
            else:
                raise MeshFormatError(f"line {lineno}: unsupported record {tag!r}")
    if not vertices:
        raise MeshFormatError(f"{path}: no vertices")
    return TriangleMesh(vertices, faces)


def save_mesh(mesh, path):
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_points_csv(path):
    pts = np.loadtxt(path, delimiter=",", ndmin=2)
    return pts.reshape(-1, 3)


def write_points_csv(points, path):
    with open(path, "w") as fh:
        for p in np.asarray(points, dtype=float).reshape(-1, 3):
            fh.write(",".join(repr(float(x)) for x in p) + "\n")


def _as_points(x):
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise ValueError("point set is empty")
    return x


def _nearest_sq(src, query):
    """Squared distance from each query point to its nearest point in ``src``."""
    _, idx = cKDTree(src).query(query)
    diff = query - src[idx]
    return np.einsum("ij,ij->i", diff, diff)


def chamfer_directed(X, Y):
    """Mean over ``y`` in Y of the squared distance to the nearest ``x`` in X."""
    X, Y = _as_points(X), _as_points(Y)
    return float(_nearest_sq(X, Y).mean())


def chamfer_undirected(X, Y):
    X, Y = _as_points(X), _as_points(Y)
    return float(_nearest_sq(Y, X).mean() + _nearest_sq(X, Y).mean())


def farthest_point_sample(points, k, seed=0, start_index=None):
    """Greedy max-min subsampling. Returns the chosen indices in pick order.

    The first index is ``start_index`` when given, otherwise drawn from
    ``seed``.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    if k > n:
        raise ValueError(f"cannot sample {k} points from {n}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    first = int(np.random.default_rng(seed).integers(n)) if start_index is None else int(start_index)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    dist = np.einsum("ij,ij->i", P - P[first], P - P[first])
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        d = P - P[nxt]
        np.minimum(dist, np.einsum("ij,ij->i", d, d), out=dist)
    return chosen


def ray_mesh_intersections(origin, target, mesh):
    """Crossings of the segment ``origin -> target`` with ``mesh``.

    Returns ``(count, hits)`` where ``hits`` is a list of ``(t, face)``
    sorted by ``t`` in (0, 1). Touching the surface at either endpoint does
    not count as a crossing.
    """
    origin = np.asarray(origin, dtype=float)
    target = np.asarray(target, dtype=float)
    if np.array_equal(origin, target):
        raise ValueError("degenerate segment: origin equals target")
    ts, fs = mesh.bvh.hits(origin, target)
    return len(ts), list(zip(ts.tolist(), fs.tolist()))


def flip_to_outward(mesh):
    """Re-orient faces so their normals point out of the enclosed volume.

    Each face is probed with a short offset off its centroid: a point just
    in front of an outward face lies outside, i.e. has even crossing parity
    toward a far exterior reference.
    """
    if mesh.n_faces == 0:
        return mesh
    eps = 1e-4 * max(mesh.edge_length_avg, 1e-9)
    probes = mesh.face_centroids + eps * mesh.face_normals
    inward = mesh.contains(probes)
    faces = mesh.faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return TriangleMesh(mesh.vertices, faces)


__all__ = [
    "MeshFormatError", "TriangleMesh", "load_mesh", "save_mesh", "read_points_csv",
    "write_points_csv", "chamfer_directed", "chamfer_undirected",
    "farthest_point_sample", "ray_mesh_intersections", "flip_to_outward", "T_EPS",
]
