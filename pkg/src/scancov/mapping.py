"""Labelled occupancy grid, Euclidean signed distance field and A* refinement."""
import logging

import numba as nb
import numpy as np
from scipy import ndimage

from .path import CoveragePath, PathNode

log = logging.getLogger(__name__)

UNKNOWN, FREE, OCC_TARGET, OCC_OTHER = 0, 1, 2, 3


class StaleESDFError(RuntimeError):
    pass


class VoxelWorld:
    """Axis-aligned voxel grid. Voxel ``(i, j, k)`` is centred at
    ``origin + (index + 0.5) * resolution``.
    """

    def __init__(self, origin, dims, resolution=0.1):
        self.origin = np.asarray(origin, dtype=float)
        self.dims = tuple(int(d) for d in dims)
        self.resolution = float(resolution)
        self.labels = np.zeros(self.dims, dtype=np.uint8)
        self.esdf = None
        self.esdf_stale = True
        self.version = 0

    @classmethod
    def from_bounds(cls, lo, hi, resolution=0.1):
        lo = np.asarray(lo, dtype=float)
        dims = np.ceil((np.asarray(hi, dtype=float) - lo) / resolution - 1e-9).astype(int)
        return cls(lo, np.maximum(dims, 1), resolution)

    def copy(self):
        w = VoxelWorld.__new__(VoxelWorld)
        w.origin = self.origin.copy()
        w.dims = self.dims
        w.resolution = self.resolution
        w.labels = self.labels.copy()
        w.esdf = None if self.esdf is None else self.esdf.copy()
        w.esdf_stale = self.esdf_stale
        w.version = self.version
        return w

    def snapshot(self):
        """Read-only copy handed to planner threads."""
        w = self.copy()
        w.labels.flags.writeable = False
        if w.esdf is not None:
            w.esdf.flags.writeable = False
        return w

    @property
    def upper(self):
        return self.origin + np.array(self.dims) * self.resolution

    @property
    def occupied(self):
        return self.labels >= OCC_TARGET

    def center(self, idx):
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def index(self, p):
        """Voxel index containing ``p`` (clamped into the grid)."""
        idx = np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(np.int64)
        return np.clip(idx, 0, np.array(self.dims) - 1)

    def inside(self, p):
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.origin) & (p < self.upper), axis=-1)

    # -- scan integration -------------------------------------------------
    def integrate_scan(self, sensor, hits, target_flags=None, free_ends=None):
        """Carve free space from ``sensor`` to every endpoint and mark hit voxels.

        ``free_ends`` are endpoints of rays that returned nothing (carved but
        not marked). Returns the number of endpoints clamped into the grid.
        """
        hits = np.asarray(hits, dtype=float).reshape(-1, 3)
        flags = np.zeros(len(hits), bool) if target_flags is None else np.asarray(target_flags, bool)
        ends = hits if free_ends is None else np.concatenate([hits, np.asarray(free_ends, float).reshape(-1, 3)])
        if len(ends) == 0:
            return 0
        occ_label = np.where(flags, OCC_TARGET, OCC_OTHER).astype(np.uint8)
        marks = np.concatenate([occ_label, np.zeros(len(ends) - len(hits), np.uint8)])
        lo = self.origin + 1e-9
        hi = self.upper - 1e-9
        clamped = np.clip(ends, lo, hi)
        n_clamped = int(np.any(clamped != ends, axis=1).sum())
        if n_clamped:
            log.debug("integrate_scan: %d endpoints clamped into the grid", n_clamped)
        s = np.clip(np.asarray(sensor, dtype=float), lo, hi)
        changed = _carve(self.labels, self.origin, self.resolution, s, clamped, marks)
        if changed:
            self.esdf_stale = True
            self.version += 1
        return n_clamped

    def set_occupied(self, mask, label=OCC_OTHER):
        mask = np.asarray(mask, dtype=bool)
        if np.any(self.labels[mask] != label):
            self.labels[mask] = label
            self.esdf_stale = True
            self.version += 1

    def mark_mesh(self, mesh, label=OCC_OTHER):
        """Label every voxel whose centre lies inside the watertight ``mesh``
        or that the surface passes through."""
        lo, hi = mesh.bounds
        i0 = np.floor((lo - self.origin) / self.resolution).astype(int) - 1
        i1 = np.ceil((hi - self.origin) / self.resolution).astype(int) + 1
        i0 = np.clip(i0, 0, np.array(self.dims))
        i1 = np.clip(i1, 0, np.array(self.dims))
        grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(i0, i1)], indexing="ij"), -1)
        idx = grid.reshape(-1, 3)
        if len(idx) == 0:
            return
        inside = mesh.contains(self.center(idx))
        mask = np.zeros(self.dims, bool)
        mask[tuple(idx[inside].T)] = True
        # surface voxels: sample triangles densely
        pts = surface_samples(mesh, self.resolution / 2)
        ok = self.inside(pts)
        sidx = self.index(pts[ok])
        mask[tuple(sidx.T)] = True
        self.set_occupied(mask, label)

    # -- distance field ---------------------------------------------------
    def recompute_esdf(self):
        occ = self.occupied
        cap = float(np.linalg.norm(np.array(self.dims) * self.resolution))
        if not occ.any():
            esdf = np.full(self.dims, cap)
        else:
            outside = ndimage.distance_transform_edt(~occ, sampling=self.resolution)
            if occ.all():
                inside = np.full(self.dims, cap)
            else:
                inside = ndimage.distance_transform_edt(occ, sampling=self.resolution)
            esdf = np.minimum(outside, cap) - np.minimum(inside, cap)
        self.esdf = esdf
        self.esdf_stale = False
        return self

    def ensure_esdf(self):
        if self.esdf_stale or self.esdf is None:
            if not self.labels.flags.writeable:
                raise StaleESDFError("ESDF is stale on a read-only snapshot")
            self.recompute_esdf()
        return self

    def esdf_grid(self):
        """(esdf array, origin, resolution) for compiled lookups."""
        if self.esdf_stale or self.esdf is None:
            raise StaleESDFError("recompute_esdf() before querying")
        return (np.ascontiguousarray(self.esdf, dtype=np.float64), np.asarray(self.origin, dtype=np.float64),
                float(self.resolution))

    def esdf_query(self, points):
        """Trilinear ESDF value and analytic gradient.

        Accepts a single point or an (n, 3) array. Points outside the grid
        are clamped to the boundary centres.
        """
        if self.esdf_stale or self.esdf is None:
            raise StaleESDFError("recompute_esdf() before querying")
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        g = (pts - self.origin) / self.resolution - 0.5
        hi = np.array(self.dims) - 1
        g = np.clip(g, 0.0, hi)
        i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(hi - 1, 0))
        f = g - i0
        i1 = np.minimum(i0 + 1, hi)
        E = self.esdf
        c = np.empty((len(pts), 2, 2, 2))
        for a in range(2):
            ia = i1[:, 0] if a else i0[:, 0]
            for b in range(2):
                ib = i1[:, 1] if b else i0[:, 1]
                for cc in range(2):
                    ic = i1[:, 2] if cc else i0[:, 2]
                    c[:, a, b, cc] = E[ia, ib, ic]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c00 = c[:, 0, 0, 0] * (1 - fx) + c[:, 1, 0, 0] * fx
        c01 = c[:, 0, 0, 1] * (1 - fx) + c[:, 1, 0, 1] * fx
        c10 = c[:, 0, 1, 0] * (1 - fx) + c[:, 1, 1, 0] * fx
        c11 = c[:, 0, 1, 1] * (1 - fx) + c[:, 1, 1, 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        val = c0 * (1 - fz) + c1 * fz
        dz = c1 - c0
        dy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
        dx_ = ((c[:, 1, 0, 0] - c[:, 0, 0, 0]) * (1 - fy) * (1 - fz)
               + (c[:, 1, 1, 0] - c[:, 0, 1, 0]) * fy * (1 - fz)
               + (c[:, 1, 0, 1] - c[:, 0, 0, 1]) * (1 - fy) * fz
               + (c[:, 1, 1, 1] - c[:, 0, 1, 1]) * fy * fz)
        grad = np.stack([dx_, dy, dz], axis=1) / self.resolution
        # clamped axes have zero derivative
        raw = (pts - self.origin) / self.resolution - 0.5
        grad[(raw < 0) | (raw > hi)] = 0.0
        if single:
            return float(val[0]), grad[0]
        return val, grad

    # -- traversability ---------------------------------------------------
    def traversable(self, clearance=0.0):
        """Boolean grid of cells a path may use. Unknown counts as free."""
        ok = self.labels < OCC_TARGET
        if clearance > 0:
            self.ensure_esdf()
            ok &= self.esdf >= clearance
        return ok

    def segment_free(self, a, b, clearance=0.0, trav=None):
        if trav is None:
            trav = self.traversable(clearance)
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        if not (self.inside(a) and self.inside(b)):
            return False
        return bool(_segment_clear(trav, self.origin, self.resolution, a, b))

    # -- text dump --------------------------------------------------------
    def dump(self, fh):
        r = self.resolution
        o = [float(x) for x in self.origin]
        fh.write(f"{float(r)!r} {self.dims[0]} {self.dims[1]} {self.dims[2]} {o[0]!r} {o[1]!r} {o[2]!r}\n")
        flat = self.labels.ravel()
        if flat.size:
            change = np.flatnonzero(np.diff(flat)) + 1
            starts = np.concatenate([[0], change])
            lengths = np.diff(np.concatenate([starts, [flat.size]]))
            for s, n in zip(starts, lengths):
                fh.write(f"{flat[s]} {n}\n")

    @classmethod
    def restore(cls, fh):
        header = fh.readline().split()
        if len(header) != 7:
            raise ValueError("bad grid header")
        r = float(header[0])
        dims = [int(x) for x in header[1:4]]
        origin = [float(x) for x in header[4:7]]
        w = cls(origin, dims, r)
        vals, lens = [], []
        for line in fh:
            if line.strip():
                a, b = line.split()
                vals.append(int(a))
                lens.append(int(b))
        flat = np.repeat(np.array(vals, dtype=np.uint8), lens)
        if flat.size != w.labels.size:
            raise ValueError("label stream length does not match grid dims")
        w.labels = flat.reshape(w.dims)
        return w


def surface_samples(mesh, spacing):
    """Points covering every triangle with roughly ``spacing`` separation."""
    v = mesh.vertices
    out = [v]
    for f in mesh.faces:
        a, b, c = v[f]
        L = max(np.linalg.norm(b - a), np.linalg.norm(c - a), np.linalg.norm(c - b))
        n = int(np.ceil(L / spacing))
        if n <= 1:
            out.append(((a + b + c) / 3)[None])
            continue
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = i + j <= n
        u = i[keep] / n
        w = j[keep] / n
        out.append(a + np.outer(u, b - a) + np.outer(w, c - a))
    return np.concatenate(out)


@nb.njit(cache=True)
def _carve(labels, origin, res, sensor, ends, marks):
    nx, ny, nz = labels.shape
    changed = False
    for r in range(ends.shape[0]):
        e = ends[r]
        d = e - sensor
        ix = int(np.floor((sensor[0] - origin[0]) / res))
        iy = int(np.floor((sensor[1] - origin[1]) / res))
        iz = int(np.floor((sensor[2] - origin[2]) / res))
        ex = int(np.floor((e[0] - origin[0]) / res))
        ey = int(np.floor((e[1] - origin[1]) / res))
        ez = int(np.floor((e[2] - origin[2]) / res))
        idx = np.array([ix, iy, iz])
        end = np.array([ex, ey, ez])
        step = np.zeros(3, np.int64)
        tmax = np.full(3, np.inf)
        tdelta = np.full(3, np.inf)
        for k in range(3):
            if d[k] > 0:
                step[k] = 1
                tmax[k] = ((origin[k] + (idx[k] + 1) * res) - sensor[k]) / d[k]
                tdelta[k] = res / d[k]
            elif d[k] < 0:
                step[k] = -1
                tmax[k] = ((origin[k] + idx[k] * res) - sensor[k]) / d[k]
                tdelta[k] = -res / d[k]
        guard = nx + ny + nz + 3
        while guard > 0:
            guard -= 1
            if idx[0] == end[0] and idx[1] == end[1] and idx[2] == end[2]:
                break
            if 0 <= idx[0] < nx and 0 <= idx[1] < ny and 0 <= idx[2] < nz:
                if labels[idx[0], idx[1], idx[2]] == 0:
                    labels[idx[0], idx[1], idx[2]] = 1
                    changed = True
            k = 0
            if tmax[1] < tmax[k]:
                k = 1
            if tmax[2] < tmax[k]:
                k = 2
            if tmax[k] > 1.0:
                break
            idx[k] += step[k]
            tmax[k] += tdelta[k]
        if 0 <= end[0] < nx and 0 <= end[1] < ny and 0 <= end[2] < nz:
            cur = labels[end[0], end[1], end[2]]
            m = marks[r]
            if m >= 2:
                if cur != m and cur < 2:
                    labels[end[0], end[1], end[2]] = m
                    changed = True
                elif cur == 3 and m == 2:
                    labels[end[0], end[1], end[2]] = m
                    changed = True
            elif cur == 0:
                labels[end[0], end[1], end[2]] = 1
                changed = True
    return changed


@nb.njit(cache=True)
def _segment_clear(trav, origin, res, a, b):
    nx, ny, nz = trav.shape
    d = b - a
    idx = np.empty(3, np.int64)
    end = np.empty(3, np.int64)
    for k in range(3):
        idx[k] = min(max(int(np.floor((a[k] - origin[k]) / res)), 0), trav.shape[k] - 1)
        end[k] = min(max(int(np.floor((b[k] - origin[k]) / res)), 0), trav.shape[k] - 1)
    step = np.zeros(3, np.int64)
    tmax = np.full(3, np.inf)
    tdelta = np.full(3, np.inf)
    for k in range(3):
        if d[k] > 0:
            step[k] = 1
            tmax[k] = ((origin[k] + (idx[k] + 1) * res) - a[k]) / d[k]
            tdelta[k] = res / d[k]
        elif d[k] < 0:
            step[k] = -1
            tmax[k] = ((origin[k] + idx[k] * res) - a[k]) / d[k]
            tdelta[k] = -res / d[k]
    guard = nx + ny + nz + 3
    while guard > 0:
        guard -= 1
        if not trav[idx[0], idx[1], idx[2]]:
            return False
        if idx[0] == end[0] and idx[1] == end[1] and idx[2] == end[2]:
            return True
        k = 0
        if tmax[1] < tmax[k]:
            k = 1
        if tmax[2] < tmax[k]:
            k = 2
        if tmax[k] > 1.0:
            return True
        idx[k] += step[k]
        tmax[k] += tdelta[k]
        if idx[k] < 0 or idx[k] >= trav.shape[k]:
            return True
    return True


@nb.njit(cache=True)
def _heap_less(fa, ia, fb, ib):
    return fa < fb or (fa == fb and ia < ib)


@nb.njit(cache=True)
def _octile(dx, dy, dz):
    """Exact 26-connected step cost between cells in free space (unit cells)."""
    a, b, c = abs(dx), abs(dy), abs(dz)
    lo = min(a, b, c)
    hi = max(a, b, c)
    mid = a + b + c - lo - hi
    return np.sqrt(3.0) * lo + np.sqrt(2.0) * (mid - lo) + (hi - mid)


@nb.njit(cache=True)
def _astar(trav, start, goal, res):
    """26-connected A*. Returns flat voxel indices from start to goal, or empty."""
    nx, ny, nz = trav.shape
    n = nx * ny * nz
    s = (start[0] * ny + start[1]) * nz + start[2]
    g_ = (goal[0] * ny + goal[1]) * nz + goal[2]
    gcost = np.full(n, np.inf)
    parent = np.full(n, -1, np.int64)
    closed = np.zeros(n, np.bool_)
    cap = 1024
    hf = np.empty(cap)
    hi = np.empty(cap, np.int64)
    size = 0
    gcost[s] = 0.0
    hf[0] = res * _octile(start[0] - goal[0], start[1] - goal[1], start[2] - goal[2])
    hi[0] = s
    size = 1
    found = False
    while size > 0:
        # pop
        cur = hi[0]
        size -= 1
        if size > 0:
            lf, li = hf[size], hi[size]
            pos = 0
            while True:
                c = 2 * pos + 1
                if c >= size:
                    break
                if c + 1 < size and _heap_less(hf[c + 1], hi[c + 1], hf[c], hi[c]):
                    c += 1
                if _heap_less(hf[c], hi[c], lf, li):
                    hf[pos], hi[pos] = hf[c], hi[c]
                    pos = c
                else:
                    break
            hf[pos], hi[pos] = lf, li
        if closed[cur]:
            continue
        closed[cur] = True
        if cur == g_:
            found = True
            break
        cx = cur // (ny * nz)
        cy = (cur // nz) % ny
        cz = cur % nz
        for dx in range(-1, 2):
            x = cx + dx
            if x < 0 or x >= nx:
                continue
            for dy in range(-1, 2):
                y = cy + dy
                if y < 0 or y >= ny:
                    continue
                for dz in range(-1, 2):
                    if dx == 0 and dy == 0 and dz == 0:
                        continue
                    z = cz + dz
                    if z < 0 or z >= nz:
                        continue
                    if not trav[x, y, z]:
                        continue
                    nb_ = (x * ny + y) * nz + z
                    if closed[nb_]:
                        continue
                    ng = gcost[cur] + res * np.sqrt(float(dx * dx + dy * dy + dz * dz))
                    if ng < gcost[nb_]:
                        gcost[nb_] = ng
                        parent[nb_] = cur
                        f = ng + res * _octile(x - goal[0], y - goal[1], z - goal[2])
                        if size == cap:
                            cap *= 2
                            hf2 = np.empty(cap)
                            hi2 = np.empty(cap, np.int64)
                            hf2[:size] = hf[:size]
                            hi2[:size] = hi[:size]
                            hf, hi = hf2, hi2
                        pos = size
                        size += 1
                        while pos > 0:
                            p = (pos - 1) // 2
                            if _heap_less(f, nb_, hf[p], hi[p]):
                                hf[pos], hi[pos] = hf[p], hi[p]
                                pos = p
                            else:
                                break
                        hf[pos], hi[pos] = f, nb_
    if not found:
        return np.empty(0, np.int64)
    out = []
    c = g_
    while c != -1:
        out.append(c)
        c = parent[c]
    res_arr = np.empty(len(out), np.int64)
    for i in range(len(out)):
        res_arr[i] = out[len(out) - 1 - i]
    return res_arr


def astar(world, a, b, clearance=0.0, trav=None):
    """Voxel-centre path from ``a`` to ``b`` or ``None``.

    Endpoint cells are always admitted so that a path can leave a pose
    sitting inside the inflation margin.
    """
    if trav is None:
        trav = world.traversable(clearance)
    trav = trav.copy()
    ia, ib = world.index(a), world.index(b)
    trav[tuple(ia)] = True
    trav[tuple(ib)] = True
    flat = _astar(trav, ia, ib, world.resolution)
    if len(flat) == 0:
        return None
    idx = np.stack(np.unravel_index(flat, world.dims), axis=1)
    return world.center(idx)


def shortcut(world, points, trav):
    """Greedy line-of-sight pruning of a dense polyline."""
    if len(points) <= 2:
        return points
    out = [points[0]]
    i = 0
    n = len(points)
    while i < n - 1:
        j = n - 1
        while j > i + 1 and not _segment_clear(trav, world.origin, world.resolution, points[i], points[j]):
            j -= 1
        out.append(points[j])
        i = j
    return np.array(out)


def path_length(points):
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def astar_refine(world, path, clearance=0.0):
    """Replace blocked straight segments of ``path`` by A* detours.

    Viewpoint nodes are kept verbatim; waypoints are inserted between them.
    Segments with no free connection are kept and the path is flagged
    ``infeasible``.
    """
    nodes = list(path.nodes)
    if len(nodes) <= 1:
        return CoveragePath(nodes, path.cycle, path.complete, path.infeasible, dict(path.notes))
    trav = world.traversable(clearance)
    out = [nodes[0]]
    infeasible = False
    for a, b in zip(nodes[:-1], nodes[1:]):
        pa, pb = a.position, b.position
        tr = trav.copy()
        tr[tuple(world.index(pa))] = True
        tr[tuple(world.index(pb))] = True
        if np.array_equal(pa, pb) or world.segment_free(pa, pb, trav=tr):
            out.append(b)
            continue
        pts = astar(world, pa, pb, trav=tr)
        if pts is None:
            infeasible = True
            out.append(b)
            continue
        pts = np.concatenate([pa[None], pts[1:-1], pb[None]]) if len(pts) > 2 else np.stack([pa, pb])
        pts = shortcut(world, pts, tr)
        for k, p in enumerate(pts[1:-1], 1):
            s = k / (len(pts) - 1)
            pitch = (1 - s) * a.pose[3] + s * b.pose[3]
            yaw = a.pose[4] + s * _angdiff(b.pose[4], a.pose[4])
            out.append(PathNode.waypoint(p, pitch, yaw, group=b.group))
        out.append(b)
    return CoveragePath(out, path.cycle, path.complete, path.infeasible or infeasible, dict(path.notes))


def _angdiff(a, b):
    return (a - b + np.pi) % (2 * np.pi) - np.pi
