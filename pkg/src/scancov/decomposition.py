"""Skeleton-based splitting of a viewpoint set into compact, inter-visible groups."""
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .geometry import farthest_point_sample


@dataclass
class Skeleton:
    nodes: np.ndarray
    edges: np.ndarray
    branches: list = field(default_factory=list)  # each a list of node indices along a chain
    node_branch: np.ndarray = None

    @property
    def n_branches(self):
        return len(self.branches)

    def degree(self):
        deg = np.zeros(len(self.nodes), dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def dump(self, fh):
        for i, p in enumerate(self.nodes):
            fh.write(f"n {i} {p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {self.node_branch[i]}\n")
        for a, b in self.edges:
            fh.write(f"e {a} {b}\n")


@dataclass
class ViewpointGroup:
    members: list
    centroid: np.ndarray
    radius: float

    @classmethod
    def of(cls, members):
        pos = np.array([vp.position for vp in members])
        c = pos.mean(axis=0)
        r = float(np.linalg.norm(pos - c, axis=1).max()) if len(pos) else 0.0
        return cls(list(members), c, r)

    @property
    def positions(self):
        return np.array([vp.position for vp in self.members])


def extract_skeleton(inliers, cluster_eps, corner_angle=np.deg2rad(45.0)):
    """Cluster inliers (single linkage at ``cluster_eps``), join the cluster
    centroids by a Euclidean minimum spanning tree, and split it into chains
    at junctions and at bends sharper than ``corner_angle``."""
    pts = np.asarray(getattr(inliers, "inliers", inliers), dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("skeleton needs at least one inlier")
    pairs = cKDTree(pts).query_pairs(cluster_eps, output_type="ndarray")
    n = len(pts)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    n_cl, lab = connected_components(g, directed=False)
    # order clusters by their first member for determinism
    first = np.full(n_cl, n)
    for i, l in enumerate(lab):
        first[l] = min(first[l], i)
    remap = np.argsort(np.argsort(first))
    lab = remap[lab]
    nodes = np.array([pts[lab == c].mean(axis=0) for c in range(n_cl)])
    if n_cl == 1:
        return Skeleton(nodes, np.zeros((0, 2), int), [[0]], np.zeros(1, int))
    D = cdist(nodes, nodes)
    # tiny index-based jitter breaks MST ties deterministically
    D = D + 1e-12 * (np.arange(n_cl)[:, None] + np.arange(n_cl)[None, :]) + 1e-15
    np.fill_diagonal(D, 0)
    mst = minimum_spanning_tree(D).tocoo()
    edges = np.array(sorted((min(a, b), max(a, b)) for a, b in zip(mst.row, mst.col)), dtype=int)
    branches = []
    for chain in _split_branches(n_cl, edges):
        branches.extend(_split_corners(nodes, chain, corner_angle))
    node_branch = np.full(n_cl, -1)
    for bi, chain in enumerate(branches):
        for v in chain:
            if node_branch[v] < 0:
                node_branch[v] = bi
    return Skeleton(nodes, edges, branches, node_branch)


def _split_branches(n, edges):
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    for lst in adj:
        lst.sort()
    deg = np.array([len(a) for a in adj])
    used = set()
    branches = []
    stops = [v for v in range(n) if deg[v] != 2]
    for s in stops:
        for nb in adj[s]:
            if (min(s, nb), max(s, nb)) in used:
                continue
            chain = [s]
            prev, cur = s, nb
            used.add((min(prev, cur), max(prev, cur)))
            while deg[cur] == 2:
                chain.append(cur)
                nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
                prev, cur = cur, nxt
                used.add((min(prev, cur), max(prev, cur)))
            chain.append(cur)
            branches.append(chain)
    # pure cycles cannot occur in a tree; isolated nodes form their own branch
    for v in range(n):
        if deg[v] == 0:
            branches.append([v])
    return branches


def _split_corners(nodes, chain, corner_angle):
    """Cut a chain at interior nodes where its direction turns by more than
    ``corner_angle``; the corner node ends one piece and starts the next."""
    if len(chain) < 3:
        return [chain]
    out, cur = [], [chain[0]]
    for k in range(1, len(chain) - 1):
        cur.append(chain[k])
        a = nodes[chain[k]] - nodes[chain[k - 1]]
        b = nodes[chain[k + 1]] - nodes[chain[k]]
        c = a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-300)
        if c < np.cos(corner_angle):
            out.append(cur)
            cur = [chain[k]]
    cur.append(chain[-1])
    out.append(cur)
    return out


def _point_segment_dist(p, a, b):
    ab = b - a
    L = ab @ ab
    if L == 0:
        return np.linalg.norm(p - a, axis=-1)
    t = np.clip(((p - a) @ ab) / L, 0, 1)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def branch_distances(points, skeleton):
    points = np.atleast_2d(points)
    D = np.full((len(points), skeleton.n_branches), np.inf)
    for bi, chain in enumerate(skeleton.branches):
        if len(chain) == 1:
            D[:, bi] = np.linalg.norm(points - skeleton.nodes[chain[0]], axis=1)
            continue
        for a, b in zip(chain[:-1], chain[1:]):
            D[:, bi] = np.minimum(D[:, bi], _point_segment_dist(points, skeleton.nodes[a], skeleton.nodes[b]))
    return D


def assign_subspaces(viewpoints, skeleton):
    """Map branch index -> list of viewpoints nearest to that branch."""
    if skeleton.n_branches == 0:
        raise ValueError("empty skeleton")
    if not viewpoints:
        return {}
    pos = np.array([vp.position for vp in viewpoints])
    D = branch_distances(pos, skeleton)
    lab = np.argmin(D, axis=1)  # first minimum -> lower branch index on ties
    out = {}
    for vp, b in zip(viewpoints, lab):
        out.setdefault(int(b), []).append(vp)
    return out


def visibility_graph(positions, mesh):
    """Boolean matrix of unobstructed lines of sight between positions."""
    n = len(positions)
    vis = np.eye(n, dtype=bool)
    if n < 2:
        return vis
    i, j = np.triu_indices(n, 1)
    same = np.all(positions[i] == positions[j], axis=1)
    counts = np.zeros(len(i), dtype=np.int64)
    if (~same).any():
        counts[~same] = mesh.segment_crossings(positions[i[~same]], positions[j[~same]])
    ok = counts == 0
    vis[i[ok], j[ok]] = True
    vis[j[ok], i[ok]] = True
    return vis


def _radius(pos):
    return float(np.linalg.norm(pos - pos.mean(axis=0), axis=1).max()) if len(pos) else 0.0


def _valid(idx, pos, vis, R_g):
    return _radius(pos[idx]) <= R_g and vis[np.ix_(idx, idx)].all()


def _kmeans(idx, pos, seeds, vis, iters=10):
    """Lloyd iterations; a point may only join a seed cluster whose current
    members are all visible from it (falling back to the nearest seed)."""
    P = pos[idx]
    C = np.array(seeds, dtype=float)
    lab = np.argmin(cdist(P, C), axis=1)
    for it in range(iters):
        D = cdist(P, C)
        new = np.empty(len(P), int)
        order = np.argsort(D.min(axis=1), kind="stable")
        members = [[] for _ in range(len(C))]
        for p in order:
            for c in np.argsort(D[p], kind="stable"):
                if all(vis[idx[p], idx[q]] for q in members[c]):
                    break
            else:
                c = int(np.argmin(D[p]))
            new[p] = c
            members[c].append(p)
        if it > 0 and np.array_equal(new, lab):
            break
        lab = new
        for c in range(len(C)):
            if np.any(lab == c):
                C[c] = P[lab == c].mean(axis=0)
    return [idx[lab == c] for c in range(len(C)) if np.any(lab == c)]


def _split(idx, pos, vis, R_g, seeds=None):
    if _valid(idx, pos, vis, R_g):
        return [idx]
    if len(idx) == 1:
        return [idx]
    k = 2
    while True:
        if seeds is not None and len(seeds) >= 2:
            s = np.asarray(seeds, dtype=float)
            seeds = None
        else:
            s = pos[idx][farthest_point_sample(pos[idx], min(k, len(idx)), start_index=0)]
        parts = _kmeans(idx, pos, s, vis)
        if len(parts) > 1:
            break
        k += 1
        if k > len(idx):
            return [np.array([i]) for i in idx]
    out = []
    for part in parts:
        out.extend(_split(part, pos, vis, R_g))
    return out


def refine_groups(group, R_g, mesh, prev_centroids=None):
    """Split one subspace's viewpoints into groups of radius <= R_g whose
    members see each other."""
    if not group:
        raise ValueError("empty group")
    pos = np.array([vp.position for vp in group])
    vis = visibility_graph(pos, mesh)
    all_idx = np.arange(len(group))
    if _valid(all_idx, pos, vis, R_g):
        return [ViewpointGroup.of(group)]
    n_cc, cc = connected_components(vis, directed=False)
    parts = []
    for c in range(n_cc):
        idx = all_idx[cc == c]
        seeds = None
        if prev_centroids is not None and len(prev_centroids):
            pc = np.asarray(prev_centroids, dtype=float).reshape(-1, 3)
            # keep previous centroids that fall within this component's extent
            lo, hi = pos[idx].min(axis=0) - R_g, pos[idx].max(axis=0) + R_g
            inside = np.all((pc >= lo) & (pc <= hi), axis=1)
            if inside.sum() >= 2:
                seeds = pc[inside]
        parts.extend(_split(idx, pos, vis, R_g, seeds))
    parts.sort(key=lambda ix: int(ix.min()))
    return [ViewpointGroup.of([group[i] for i in ix]) for ix in parts]


def group_viewpoints(viewpoints, skeleton, R_g, mesh, prev_centroids=None):
    """Assign to skeleton branches, then refine each branch's set."""
    groups = []
    for b, vps in sorted(assign_subspaces(viewpoints, skeleton).items()):
        groups.extend(refine_groups(vps, R_g, mesh, prev_centroids))
    return groups
