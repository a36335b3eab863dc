"""Procedural watertight meshes used by the scenario corpus and the tests."""
import numpy as np

from .geometry import TriangleMesh


def cells_mesh(occupied, cell=1.0, origin=(0.0, 0.0, 0.0)):
    """Boundary surface of a union of axis-aligned cells.

    ``occupied`` is a boolean (nx, ny, nz) array. Faces are emitted between
    filled and empty cells with outward winding. Cells touching only along
    an edge produce non-manifold edges, so callers should avoid them.
    """
    occ = np.pad(np.asarray(occupied, dtype=bool), 1)
    shape = np.array(occ.shape)
    corner_id = -np.ones(shape + 1, dtype=np.int64)
    verts, faces = [], []

    def vid(i, j, k):
        if corner_id[i, j, k] < 0:
            corner_id[i, j, k] = len(verts)
            verts.append((i - 1, j - 1, k - 1))
        return corner_id[i, j, k]

    # quad corners (in +axis face winding) for each axis
    quads = {
        0: [(0, 0, 0), (0, 1, 0), (0, 1, 1), (0, 0, 1)],
        1: [(0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 0, 0)],
        2: [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)],
    }
    for axis in range(3):
        step = np.zeros(3, dtype=int)
        step[axis] = 1
        a = occ
        hi = np.roll(a, -1, axis=axis)
        # boundary between cell c and c+step
        for sign, mask in ((+1, a & ~hi), (-1, ~a & hi)):
            idx = np.argwhere(mask)
            for c in idx:
                base = c + step  # face lies on the plane at c[axis] + 1
                corners = [vid(*(base + np.array(q))) for q in quads[axis]]
                if sign < 0:
                    corners = corners[::-1]
                faces.append((corners[0], corners[1], corners[2]))
                faces.append((corners[0], corners[2], corners[3]))
    v = np.array(verts, dtype=float) * cell + np.asarray(origin, dtype=float)
    return TriangleMesh(v, faces)


def box(size, center=(0.0, 0.0, 0.0), cell=None):
    """Axis-aligned box, optionally subdivided into cells of edge ``cell``."""
    size = np.asarray(size, dtype=float)
    if cell is None:
        counts = np.ones(3, dtype=int)
    else:
        counts = np.maximum(1, np.round(size / cell).astype(int))
    mesh = cells_mesh(np.ones(counts, dtype=bool), 1.0)
    v = mesh.vertices / counts * size + np.asarray(center) - size / 2
    return TriangleMesh(v, mesh.faces)


def unit_cube():
    """The 8-vertex, 12-face cube spanning [0, 1]^3."""
    return box((1, 1, 1), center=(0.5, 0.5, 0.5))


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    t = (1.0 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriangleMesh(v, faces)


def torus(major=2.0, minor=0.6, n_major=32, n_minor=12, center=(0.0, 0.0, 0.0)):
    """Torus around the z axis."""
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    U, W = np.meshgrid(u, w, indexing="ij")
    x = (major + minor * np.cos(W)) * np.cos(U)
    y = (major + minor * np.cos(W)) * np.sin(U)
    z = minor * np.sin(W)
    v = np.stack([x, y, z], axis=-1).reshape(-1, 3) + np.asarray(center, dtype=float)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, faces)


def l_prism(arm=4.0, width=1.5, height=3.0, cell=0.5, origin=(0.0, 0.0, 0.0)):
    """L-shaped extrusion: two ``arm`` x ``width`` slabs meeting at a corner."""
    n_arm = int(round(arm / cell))
    n_w = int(round(width / cell))
    n_h = int(round(height / cell))
    occ = np.zeros((n_arm, n_arm, n_h), dtype=bool)
    occ[:, :n_w, :] = True
    occ[:n_w, :, :] = True
    return cells_mesh(occ, cell, origin)


def merge(*meshes):
    """Disjoint union of meshes (no welding)."""
    verts, faces, skip, off = [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        skip.append(np.zeros(m.n_faces, bool) if m.normal_skip is None else m.normal_skip)
        off += m.n_vertices
    skip = np.concatenate(skip)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), skip if skip.any() else None)


def plane_patch(size=(2.0, 2.0), n=(4, 4), center=(0.0, 0.0, 0.0), normal_axis=0):
    """Open rectangular grid patch facing +``normal_axis``. Not watertight."""
    nu, nv = n
    a = np.linspace(-size[0] / 2, size[0] / 2, nu + 1)
    b = np.linspace(-size[1] / 2, size[1] / 2, nv + 1)
    A, B = np.meshgrid(a, b, indexing="ij")
    zeros = np.zeros_like(A)
    axes = [(1, 2), (2, 0), (0, 1)][normal_axis]
    pts = np.zeros(A.shape + (3,))
    pts[..., axes[0]] = A
    pts[..., axes[1]] = B
    pts[..., normal_axis] = zeros
    v = pts.reshape(-1, 3) + np.asarray(center, dtype=float)
    faces = []
    for i in range(nu):
        for j in range(nv):
            p = i * (nv + 1) + j
            q = (i + 1) * (nv + 1) + j
            faces += [(p, q, q + 1), (p, q + 1, p + 1)]
    return TriangleMesh(v, faces)
