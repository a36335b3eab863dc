"""Slow, independent reference implementations used to freeze expected values.

Nothing here imports the package's acceleration structures: crossings are
counted triangle by triangle, containment uses the solid-angle winding
number, distances are exhaustive scans.
"""
import itertools

import numpy as np


def segment_triangle_hits(p, q, a, b, c, eps=1e-9):
    """Crossing parameters t in (eps, 1-eps) of segment p->q with triangle abc
    (Moller-Trumbore, one triangle at a time)."""
    d = q - p
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = float(e1 @ h)
    if abs(det) < 1e-15:
        return None
    f = 1.0 / det
    s = p - a
    u = f * float(s @ h)
    if u < -eps or u > 1 + eps:
        return None
    qv = np.cross(s, e1)
    v = f * float(d @ qv)
    if v < -eps or u + v > 1 + eps:
        return None
    t = f * float(e2 @ qv)
    if t <= eps or t >= 1 - eps:
        return None
    return t


def brute_crossings(p, q, vertices, faces):
    p, q = np.asarray(p, float), np.asarray(q, float)
    n = 0
    for f in faces:
        a, b, c = vertices[f]
        if segment_triangle_hits(p, q, a, b, c) is not None:
            n += 1
    return n


def winding_number(points, vertices, faces):
    """Generalised winding number: ~1 inside a closed outward mesh, ~0 outside."""
    P = np.atleast_2d(points)[:, None, :]
    A = vertices[faces[:, 0]][None] - P
    B = vertices[faces[:, 1]][None] - P
    C = vertices[faces[:, 2]][None] - P
    la, lb, lc = (np.linalg.norm(X, axis=-1) for X in (A, B, C))
    num = np.einsum("pfk,pfk->pf", A, np.cross(B, C))
    den = (la * lb * lc + np.einsum("pfk,pfk->pf", A, B) * lc
           + np.einsum("pfk,pfk->pf", B, C) * la + np.einsum("pfk,pfk->pf", C, A) * lb)
    return (2.0 * np.arctan2(num, den)).sum(axis=1) / (4 * np.pi)


def inside_polyhedron(points, vertices, faces, chunk=500):
    out = []
    for s in range(0, len(points), chunk):
        out.append(winding_number(points[s:s + chunk], vertices, faces) > 0.5)
    return np.concatenate(out)


def chamfer_directed(X, Y):
    """(1/|Y|) sum_y min_x |x - y|^2, double loop."""
    tot = 0.0
    for y in Y:
        tot += min(float(((x - y) ** 2).sum()) for x in X)
    return tot / len(Y)


def chamfer_undirected(X, Y):
    return chamfer_directed(Y, X) + chamfer_directed(X, Y)


def held_karp(C, start=0):
    """Open-path optimum by dictionary DP over subsets."""
    n = len(C)
    best = {(1 << start, start): 0.0}
    for size in range(2, n + 1):
        nxt = {}
        for (mask, last), cost in best.items():
            for k in range(n):
                if mask & (1 << k):
                    continue
                key = (mask | (1 << k), k)
                v = cost + C[last][k]
                if v < nxt.get(key, np.inf):
                    nxt[key] = v
        best = nxt
    return min(best.values()) if n > 1 else 0.0


def brute_tour(C, start=0):
    n = len(C)
    rest = [i for i in range(n) if i != start]
    best = np.inf
    for perm in itertools.permutations(rest):
        t = (start,) + perm
        best = min(best, sum(C[a][b] for a, b in zip(t[:-1], t[1:])))
    return best


def brute_esdf(occ, res):
    """Signed distance between voxel centres by exhaustive scan."""
    idx = np.argwhere(np.ones_like(occ, bool))
    o = np.argwhere(occ)
    f = np.argwhere(~occ)
    out = np.zeros(occ.shape)
    for i in idx:
        if occ[tuple(i)]:
            d = np.sqrt(((f - i) ** 2).sum(axis=1)).min() if len(f) else np.inf
            out[tuple(i)] = -res * d
        else:
            d = np.sqrt(((o - i) ** 2).sum(axis=1)).min() if len(o) else np.inf
            out[tuple(i)] = res * d
    return out


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def visible_brute(pose, vertices, faces, normals, hfov, vfov, max_range, max_incidence, targets):
    """Per-vertex frustum, range, incidence and occlusion test."""
    p = np.asarray(pose[:3], float)
    pitch, yaw = pose[3], pose[4]
    fwd = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    up = np.cross(right, fwd)
    out = []
    for v in targets:
        r = vertices[v] - p
        dist = np.linalg.norm(r)
        xf = r @ fwd
        if xf <= 0 or dist > max_range or dist == 0:
            continue
        if abs(r @ right) > np.tan(hfov / 2) * xf or abs(r @ up) > np.tan(vfov / 2) * xf:
            continue
        if -(r @ normals[v]) / dist < np.cos(max_incidence):
            continue
        if brute_crossings(p, vertices[v], vertices, faces) == 0:
            out.append(v)
    return np.array(out, dtype=np.int64)
