"""Bounding-volume hierarchy over triangles and numba segment kernels.

Segment/triangle tests use the sheared edge-function formulation
(Woop, Benthin & Wald 2013) plus a top-left fill rule so that a segment
passing exactly through a shared edge or vertex is counted once.
"""
import numpy as np
import numba as nb

LEAF_SIZE = 4
T_EPS = 1e-9


class BVH:
    """Flat median-split BVH. Arrays are laid out for the numba kernels."""

    def __init__(self, v0, v1, v2):
        self.v0 = np.ascontiguousarray(v0, dtype=np.float64)
        self.v1 = np.ascontiguousarray(v1, dtype=np.float64)
        self.v2 = np.ascontiguousarray(v2, dtype=np.float64)
        n = len(self.v0)
        lo = np.minimum(np.minimum(self.v0, self.v1), self.v2)
        hi = np.maximum(np.maximum(self.v0, self.v1), self.v2)
        centroids = (lo + hi) * 0.5

        order = np.arange(n, dtype=np.int64)
        bmin, bmax, left, right, start, count = [], [], [], [], [], []

        def new_node():
            bmin.append(None)
            bmax.append(None)
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            return len(bmin) - 1

        if n == 0:
            root = new_node()
            bmin[root] = np.full(3, np.inf)
            bmax[root] = np.full(3, -np.inf)
        else:
            stack = [(new_node(), 0, n)]
            while stack:
                node, s, e = stack.pop()
                idx = order[s:e]
                bmin[node] = lo[idx].min(axis=0)
                bmax[node] = hi[idx].max(axis=0)
                if e - s <= LEAF_SIZE:
                    start[node], count[node] = s, e - s
                    continue
                c = centroids[idx]
                axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
                # stable sort keeps the build deterministic
                order[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
                mid = (s + e) // 2
                l, r = new_node(), new_node()
                left[node], right[node] = l, r
                stack.append((r, mid, e))
                stack.append((l, s, mid))

        self.order = order
        self.node_min = np.array(bmin, dtype=np.float64).reshape(-1, 3)
        self.node_max = np.array(bmax, dtype=np.float64).reshape(-1, 3)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        # triangles permuted into leaf order
        self._t0 = self.v0[order]
        self._t1 = self.v1[order]
        self._t2 = self.v2[order]

    def segments(self, origins, targets):
        """Crossing counts and nearest hit parameter for each segment.

        Returns ``(counts, t_min, face_min)``; ``t_min`` is ``inf`` and
        ``face_min`` is -1 where a segment hits nothing.
        """
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        t = np.ascontiguousarray(np.atleast_2d(targets), dtype=np.float64)
        if o.shape != t.shape:
            o, t = np.broadcast_arrays(o, t)
            o, t = np.ascontiguousarray(o), np.ascontiguousarray(t)
        counts, tmin, fmin = _segments_kernel(
            o, t, self._t0, self._t1, self._t2, self.node_min, self.node_max,
            self.left, self.right, self.start, self.count)
        fmin = np.where(fmin >= 0, self.order[np.maximum(fmin, 0)], -1)
        return counts, tmin, fmin

    def hits(self, origin, target):
        """All hit parameters of one segment as ``(t, face)`` sorted by t."""
        o = np.asarray(origin, dtype=np.float64)
        t = np.asarray(target, dtype=np.float64)
        ts, fs = _segment_hits_kernel(
            o, t, self._t0, self._t1, self._t2, self.node_min, self.node_max,
            self.left, self.right, self.start, self.count)
        k = np.argsort(ts, kind="stable")
        return ts[k], self.order[fs[k]]


@nb.njit(cache=True, inline="always")
def _top_left(ex, ey):
    return ey > 0.0 or (ey == 0.0 and ex < 0.0)


@nb.njit(cache=True)
def _segment_triangle(o, d, kx, ky, kz, sx, sy, sz, a, b, c):
    """Return hit parameter in (0, 1) of segment o + t d, or -1."""
    ax = a[kx] - o[kx]
    ay = a[ky] - o[ky]
    az = a[kz] - o[kz]
    bx = b[kx] - o[kx]
    by = b[ky] - o[ky]
    bz = b[kz] - o[kz]
    cx = c[kx] - o[kx]
    cy = c[ky] - o[ky]
    cz = c[kz] - o[kz]
    ax = ax - sx * az
    ay = ay - sy * az
    bx = bx - sx * bz
    by = by - sy * bz
    cx = cx - sx * cz
    cy = cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    det = u + v + w
    if det == 0.0:
        return -1.0
    # edge vectors opposite each function: u <-> b->c, v <-> c->a, w <-> a->b
    e_ux, e_uy = cx - bx, cy - by
    e_vx, e_vy = ax - cx, ay - cy
    e_wx, e_wy = bx - ax, by - ay
    if det < 0.0:
        u, v, w, det = -u, -v, -w, -det
        e_ux, e_uy = -e_ux, -e_uy
        e_vx, e_vy = -e_vx, -e_vy
        e_wx, e_wy = -e_wx, -e_wy
    if u < 0.0 or v < 0.0 or w < 0.0:
        return -1.0
    if u == 0.0 and not _top_left(e_ux, e_uy):
        return -1.0
    if v == 0.0 and not _top_left(e_vx, e_vy):
        return -1.0
    if w == 0.0 and not _top_left(e_wx, e_wy):
        return -1.0
    # sign of det was normalised above, undo it for the depth term
    zs = sz * (u * az + v * bz + w * cz)
    t = zs / det
    return t


@nb.njit(cache=True, inline="always")
def _shear(d):
    ad0, ad1, ad2 = abs(d[0]), abs(d[1]), abs(d[2])
    kz = 0
    if ad1 > ad0 and ad1 >= ad2:
        kz = 1
    elif ad2 > ad0 and ad2 > ad1:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    sz = 1.0 / d[kz]
    return kx, ky, kz, sx, sy, sz


@nb.njit(cache=True, inline="always")
def _box_hit(o, inv, bmin, bmax):
    t0 = 0.0
    t1 = 1.0
    for k in range(3):
        if inv[k] == np.inf or inv[k] == -np.inf:
            if o[k] < bmin[k] or o[k] > bmax[k]:
                return False
            continue
        ta = (bmin[k] - o[k]) * inv[k]
        tb = (bmax[k] - o[k]) * inv[k]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1 + 1e-12:
            return False
    return True


@nb.njit(cache=True)
def _segments_kernel(origins, targets, t0, t1, t2, nmin, nmax, left, right,
                     start, count):
    n = origins.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    tmin = np.full(n, np.inf)
    fmin = np.full(n, -1, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    inv = np.empty(3)
    d = np.empty(3)
    for i in range(n):
        o = origins[i]
        for k in range(3):
            d[k] = targets[i, k] - o[k]
        if d[0] == 0.0 and d[1] == 0.0 and d[2] == 0.0:
            continue
        for k in range(3):
            inv[k] = 1.0 / d[k] if d[k] != 0.0 else np.inf
        kx, ky, kz, sx, sy, sz = _shear(d)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _box_hit(o, inv, nmin[node], nmax[node]):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    t = _segment_triangle(o, d, kx, ky, kz, sx, sy, sz,
                                          t0[j], t1[j], t2[j])
                    if t > T_EPS and t < 1.0 - T_EPS:
                        counts[i] += 1
                        if t < tmin[i]:
                            tmin[i] = t
                            fmin[i] = j
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
    return counts, tmin, fmin


@nb.njit(cache=True)
def _segment_hits_kernel(o, target, t0, t1, t2, nmin, nmax, left, right,
                         start, count):
    d = target - o
    ts = np.empty(64)
    fs = np.empty(64, dtype=np.int64)
    m = 0
    if d[0] == 0.0 and d[1] == 0.0 and d[2] == 0.0:
        return ts[:0], fs[:0]
    inv = np.empty(3)
    for k in range(3):
        inv[k] = 1.0 / d[k] if d[k] != 0.0 else np.inf
    kx, ky, kz, sx, sy, sz = _shear(d)
    stack = np.empty(128, dtype=np.int64)
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(o, inv, nmin[node], nmax[node]):
            continue
        if left[node] < 0:
            for j in range(start[node], start[node] + count[node]):
                t = _segment_triangle(o, d, kx, ky, kz, sx, sy, sz,
                                      t0[j], t1[j], t2[j])
                if t > T_EPS and t < 1.0 - T_EPS:
                    if m == ts.shape[0]:
                        ts2 = np.empty(2 * m)
                        fs2 = np.empty(2 * m, dtype=np.int64)
                        ts2[:m] = ts
                        fs2[:m] = fs
                        ts, fs = ts2, fs2
                    ts[m] = t
                    fs[m] = j
                    m += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return ts[:m], fs[:m]
