"""Viewpoint-constrained minimum-control trajectories over 5 channels
(x, y, z, pitch, yaw): MINCO construction, soft-penalty objective and an
L-BFGS solve over movable waypoints and virtual times."""
import json
import logging
from dataclasses import dataclass, field
from math import factorial

import numpy as np
from numba import njit
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import minimize

from .path import PathNode, wrap_angle

log = logging.getLogger(__name__)

S_ORDER = 4
N_CH = 5


# -- time diffeomorphism -----------------------------------------------------

def theta_map(tau):
    """Smooth bijection from the reals onto positive durations."""
    tau = np.asarray(tau, dtype=float)
    pos = 1.0 + tau + 0.5 * tau * tau
    neg = 2.0 / (2.0 - 2.0 * tau + tau * tau)
    out = np.where(tau >= 0, pos, neg)
    return float(out) if out.ndim == 0 else out


def theta_grad(tau):
    tau = np.asarray(tau, dtype=float)
    den = 2.0 - 2.0 * tau + tau * tau
    out = np.where(tau >= 0, 1.0 + tau, 4.0 * (1.0 - tau) / (den * den))
    return float(out) if out.ndim == 0 else out


def theta_inverse(T):
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("durations must be positive")
    big = -1.0 + np.sqrt(np.maximum(2.0 * T - 1.0, 0.0))
    small = 1.0 - np.sqrt(np.maximum(2.0 / T - 1.0, 0.0))
    out = np.where(T >= 1.0, big, small)
    return float(out) if out.ndim == 0 else out


# -- polynomial basis --------------------------------------------------------

_FALLING = {}
_NO_GRID = np.zeros((0, 0, 0))


def _falling(n):
    """Table F[k, j] = j! / (j - k)! (zero for j < k) and exponents max(j - k, 0)."""
    if n not in _FALLING:
        F = np.zeros((n, n))
        for k in range(n):
            for j in range(k, n):
                F[k, j] = factorial(j) / factorial(j - k)
        E = np.maximum(np.arange(n)[None, :] - np.arange(n)[:, None], 0)
        _FALLING[n] = (F, E)
    return _FALLING[n]


def _basis(t, k, n):
    """k-th derivative of [1, t, ..., t^(n-1)] at scalar or array t."""
    F, E = _falling(n)
    t = np.asarray(t, dtype=float)
    return F[k] * t[..., None] ** E[k]


def _basis_all(t, n):
    """Rows k = 0..n-1 of ``_basis(t, k, n)`` for a scalar t."""
    F, E = _falling(n)
    return F * float(t) ** E


@dataclass
class PolyTrajectory:
    coeffs: np.ndarray     # (K, 2s, 5)
    durations: np.ndarray  # (K,)
    s: int = S_ORDER

    @property
    def n_pieces(self):
        return len(self.durations)

    @property
    def duration(self):
        return float(np.sum(self.durations))

    @property
    def junction_times(self):
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def _locate(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.duration)
        edges = self.junction_times
        i = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, self.n_pieces - 1)
        return i, t - edges[i]

    def evaluate(self, t, d=0):
        """Derivative ``d`` of all 5 channels at time(s) ``t``."""
        i, tl = self._locate(t)
        B = _basis(tl, d, 2 * self.s)
        return np.einsum("...j,...jc->...c", B, self.coeffs[i])

    def piece_eval(self, i, t, d=0):
        return _basis(t, d, 2 * self.s) @ self.coeffs[i]

    def junction_jumps(self):
        """Max derivative discontinuity (orders 0..2s-2) over junctions."""
        worst = 0.0
        for i in range(self.n_pieces - 1):
            for d in range(2 * self.s - 1):
                a = self.piece_eval(i, self.durations[i], d)
                b = self.piece_eval(i + 1, 0.0, d)
                worst = max(worst, float(np.abs(a - b).max()))
        return worst

    def sample(self, dt=0.05):
        n = int(np.floor(self.duration / dt + 1e-9))
        t = np.arange(n + 1) * dt
        if t[-1] < self.duration - 1e-12:
            t = np.append(t, self.duration)
        return t, self.evaluate(t), self.evaluate(t, 1)

    def to_jsonl(self, fh, dt=0.05, t0=0.0):
        t, p, v = self.sample(dt)
        for ti, pi, vi in zip(t, p, v):
            rec = {"t": float(f"{ti + t0:.6g}")}
            for k, name in enumerate(("x", "y", "z", "pitch")):
                rec[name] = float(f"{pi[k]:.6g}")
            rec["yaw"] = float(f"{wrap_angle(pi[4]):.6g}")
            for k, name in enumerate(("vx", "vy", "vz")):
                rec[name] = float(f"{vi[k]:.6g}")
            fh.write(json.dumps(rec) + "\n")


# -- MINCO -------------------------------------------------------------------

@njit(cache=True)
def _minco_matrix(T, s, F, E):
    """Banded system: start derivatives, then per junction the position and
    continuity of orders 0..2s-2, then end derivatives."""
    n = 2 * s
    K = len(T)
    N = n * K
    A = np.zeros((N, N))
    fact = np.ones(n)
    for d in range(1, n):
        fact[d] = fact[d - 1] * d
    for k in range(s):
        A[k, k] = fact[k]
    for i in range(K - 1):
        r = s + n * i
        for j in range(n):
            A[r, n * i + j] = F[0, j] * T[i] ** E[0, j]
        for d in range(n - 1):
            for j in range(n):
                A[r + 1 + d, n * i + j] = F[d, j] * T[i] ** E[d, j]
            A[r + 1 + d, n * (i + 1) + d] = -fact[d]
    r = N - s
    for d in range(s):
        for j in range(n):
            A[r + d, n * (K - 1) + j] = F[d, j] * T[K - 1] ** E[d, j]
    return A


@njit(cache=True)
def _minco_time_adjoint(G, T, C, s, F, E):
    """Sum over constraint rows of adjoint times d(row residual)/dT_i."""
    n = 2 * s
    K = len(T)
    out = np.zeros(K)
    D = np.zeros((n, C.shape[2]))
    for i in range(K):
        # derivatives of piece i at its end, orders 0..n-1
        for d in range(n):
            for c in range(C.shape[2]):
                acc = 0.0
                for j in range(n):
                    acc += F[d, j] * T[i] ** E[d, j] * C[i, j, c]
                D[d, c] = acc
        if i < K - 1:
            # position row uses order 0, continuity rows use orders 0..n-2
            r, lo, hi = s + n * i, 0, n
        else:
            r, lo, hi = n * K - s - 1, 1, s + 1
        for q in range(lo, hi):
            d = 1 if (i < K - 1 and q == 0) else q
            for c in range(C.shape[2]):
                out[i] += G[r + q, c] * D[d, c]
    return out


class Minco:
    """Minimum-control spline with fixed boundary derivatives.

    The coefficients solve a square system ``A(T) c = b(Q)``; ``backward``
    maps a cost gradient on ``c`` (and a direct gradient on ``T``) to
    gradients on the interior points and durations by the adjoint method.
    """

    def __init__(self, start, end, s=S_ORDER):
        self.s = s
        self.start = np.asarray(start, dtype=float).reshape(s, N_CH)
        self.end = np.asarray(end, dtype=float).reshape(s, N_CH)

    def construct(self, Q, T):
        s, n = self.s, 2 * self.s
        Q = np.asarray(Q, dtype=float).reshape(-1, N_CH)
        T = np.asarray(T, dtype=float)
        K = len(T)
        if len(Q) != K - 1:
            raise ValueError("need K-1 interior points for K pieces")
        if np.any(T <= 0):
            raise ValueError("durations must be positive")
        F, E = _falling(n)
        A = _minco_matrix(T, s, F, E)
        b = np.zeros((n * K, N_CH))
        b[:s] = self.start
        b[s + n * np.arange(K - 1)] = Q
        b[n * K - s:] = self.end
        self._lu = lu_factor(A)
        c = lu_solve(self._lu, b)
        self.T = T
        self.K = K
        self.traj = PolyTrajectory(c.reshape(K, n, N_CH), T.copy(), s)
        return self.traj

    def backward(self, grad_c, grad_T=None):
        """Return (dJ/dQ (K-1, 5), dJ/dT (K,))."""
        s, n, K = self.s, 2 * self.s, self.K
        G = lu_solve(self._lu, np.asarray(grad_c).reshape(n * K, N_CH), trans=1)
        gQ = np.stack([G[s + n * i] for i in range(K - 1)]) if K > 1 else np.zeros((0, N_CH))
        gT = np.zeros(K) if grad_T is None else np.array(grad_T, dtype=float)
        F, E = _falling(n)
        gT -= _minco_time_adjoint(G, self.T, self.traj.coeffs, s, F, E)
        return gQ, gT


def minco_construct(Q, T, start, end, s=S_ORDER):
    """Convenience wrapper returning only the trajectory."""
    return Minco(start, end, s).construct(Q, T)


def _effort_table(s, n):
    """Constant part M[j, k] = a_j a_k / e and exponent e = j + k - 2s + 1 of
    the per-piece Gram matrix; entries with j or k below s are zero."""
    a = np.array([factorial(j) / factorial(j - s) if j >= s else 0.0 for j in range(n)])
    idx = np.arange(n)
    e = idx[:, None] + idx[None, :] - 2 * s + 1
    live = (idx[:, None] >= s) & (idx[None, :] >= s)
    M = np.where(live, np.outer(a, a) / np.where(live, e, 1), 0.0)
    return M, np.where(live, e, 0)


def control_effort(traj, channels=slice(None)):
    """Closed-form sum over pieces of the integral of the squared s-th
    derivative; returns (value, dJ/dc, dJ/dT)."""
    s, n = traj.s, 2 * traj.s
    M, e = _effort_table(s, n)
    T = traj.durations
    Qm = M[None] * T[:, None, None] ** e[None]  # (K, n, n)
    c = traj.coeffs[..., channels]
    Qc = np.einsum("kjl,klc->kjc", Qm, c)
    val = float(np.einsum("kjc,kjc->", c, Qc))
    gc = np.zeros_like(traj.coeffs)
    gc[..., channels] = 2.0 * Qc
    top = np.einsum("kj,kjc->kc", _basis(T, s, n), c)
    gT = np.einsum("kc,kc->k", top, top)
    return val, gc, gT


# -- penalties ---------------------------------------------------------------

@dataclass
class PenaltyWeights:
    w_t: float = 60.0
    w_d: float = 500.0
    w_c: float = 500.0
    w_sc: float = 60.0
    w_tc: float = 80.0
    v_max: float = 1.0
    a_max: float = 2.0
    j_max: float = 4.0
    omega_max: float = np.deg2rad(20.0)
    clearance: float = 0.3
    margin: float = 0.15
    kappa: int = 8
    mu: float = 0.01

    def __post_init__(self):
        for k in ("w_t", "w_d", "w_c", "w_sc", "w_tc", "v_max", "a_max", "j_max", "omega_max",
                  "clearance", "margin", "mu"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")


def smooth_l1(x, mu):
    """Zero below 0, quadratic on [0, mu), linear beyond; returns (f, f')."""
    x = np.asarray(x, dtype=float)
    f = np.where(x <= 0, 0.0, np.where(x < mu, x * x / (2 * mu), x - mu / 2))
    g = np.where(x <= 0, 0.0, np.where(x < mu, x / mu, 1.0))
    return f, g


@dataclass
class PenaltyResult:
    value: float
    grad_c: np.ndarray
    grad_T: np.ndarray
    grad_Q: np.ndarray
    terms: dict = field(default_factory=dict)
    violation: dict = field(default_factory=dict)


def _cov_rows(X):
    """Summed per-coordinate population variance of rows of X and its gradient."""
    m = len(X)
    if m < 2:
        return 0.0, np.zeros_like(X)
    d = X - X.mean(axis=0)
    return float((d * d).sum() / m), 2.0 * d / m


@njit(cache=True)
def _sl1(x, mu):
    if x <= 0.0:
        return 0.0, 0.0
    if x < mu:
        return x * x / (2.0 * mu), x / mu
    return x - 0.5 * mu, 1.0


@njit(cache=True)
def _esdf_trilinear(D, origin, res, p, grad):
    """Trilinear distance and gradient, clamped like ``VoxelWorld.esdf_query``."""
    f = np.empty(3)
    i0 = np.empty(3, np.int64)
    i1 = np.empty(3, np.int64)
    clamped = np.zeros(3, np.bool_)
    for a in range(3):
        hi = D.shape[a] - 1
        g = (p[a] - origin[a]) / res - 0.5
        if g < 0.0 or g > hi:
            clamped[a] = True
        g = min(max(g, 0.0), float(hi))
        i = min(int(np.floor(g)), max(hi - 1, 0))
        i0[a] = i
        i1[a] = min(i + 1, hi)
        f[a] = g - i
    c = np.empty((2, 2, 2))
    for a in range(2):
        for b in range(2):
            for e in range(2):
                c[a, b, e] = D[i1[0] if a else i0[0], i1[1] if b else i0[1], i1[2] if e else i0[2]]
    fx, fy, fz = f[0], f[1], f[2]
    c00 = c[0, 0, 0] * (1 - fx) + c[1, 0, 0] * fx
    c01 = c[0, 0, 1] * (1 - fx) + c[1, 0, 1] * fx
    c10 = c[0, 1, 0] * (1 - fx) + c[1, 1, 0] * fx
    c11 = c[0, 1, 1] * (1 - fx) + c[1, 1, 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    grad[0] = ((c[1, 0, 0] - c[0, 0, 0]) * (1 - fy) * (1 - fz) + (c[1, 1, 0] - c[0, 1, 0]) * fy * (1 - fz)
               + (c[1, 0, 1] - c[0, 0, 1]) * (1 - fy) * fz + (c[1, 1, 1] - c[0, 1, 1]) * fy * fz) / res
    grad[1] = ((c10 - c00) * (1 - fz) + (c11 - c01) * fz) / res
    grad[2] = (c1 - c0) / res
    for a in range(3):
        if clamped[a]:
            grad[a] = 0.0
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def _dynamics_kernel(C, T, frac, F, E, v_max, a_max, j_max, omega_max, mu,
                     D, origin, res, need, clearance):
    """Smooth-L1 limit penalties on speed, acceleration, jerk and the two
    angular rates at the sample times, plus the clearance penalty when the
    distance grid ``D`` is non-empty. Returns the unweighted dynamics and
    clearance sums, their gradients on the coefficients and durations, and
    the worst violation per limit (clearance last)."""
    K, n, nc = C.shape
    m = len(frac)
    gc = np.zeros_like(C)
    gT = np.zeros(K)
    gcc = np.zeros_like(C)
    gTc = np.zeros(K)
    vmax = np.full(6, -np.inf)
    lim = (v_max, a_max, j_max)
    X = np.zeros((5, nc))
    B = np.zeros((5, n))
    grad = np.zeros(3)
    total = 0.0
    coll = 0.0
    world = D.size > 0
    for k in range(K):
        for s in range(m):
            t = frac[s] * T[k]
            for d in range(5):
                for j in range(n):
                    B[d, j] = F[d, j] * t ** E[d, j]
                for c in range(nc):
                    acc = 0.0
                    for j in range(n):
                        acc += B[d, j] * C[k, j, c]
                    X[d, c] = acc
            if world:
                phi = _esdf_trilinear(D, origin, res, X[0, :3], grad)
                vmax[5] = max(vmax[5], clearance - phi)
                f, g = _sl1(need - phi, mu)
                coll += f
                if g != 0.0:
                    dT = 0.0
                    for c in range(3):
                        gp = -g * grad[c]
                        for j in range(n):
                            gcc[k, j, c] += B[0, j] * gp
                        dT += gp * X[1, c]
                    gTc[k] += dT * frac[s]
            for d in range(1, 4):
                nrm = np.sqrt(X[d, 0] ** 2 + X[d, 1] ** 2 + X[d, 2] ** 2)
                vmax[d - 1] = max(vmax[d - 1], nrm - lim[d - 1])
                f, g = _sl1(nrm - lim[d - 1], mu)
                if g == 0.0 or nrm == 0.0:
                    total += f
                    continue
                total += f
                dT = 0.0
                for c in range(3):
                    gv = g * X[d, c] / nrm
                    for j in range(n):
                        gc[k, j, c] += B[d, j] * gv
                    dT += gv * X[d + 1, c]
                gT[k] += dT * frac[s]
            for c in range(3, 5):
                x = X[1, c]
                vmax[c] = max(vmax[c], abs(x) - omega_max)
                f, g = _sl1(abs(x) - omega_max, mu)
                total += f
                if g == 0.0:
                    continue
                if x < 0:
                    g = -g
                for j in range(n):
                    gc[k, j, c] += B[1, j] * g
                gT[k] += g * X[2, c] * frac[s]
    return total, gc, gT, coll, gcc, gTc, vmax


def evaluate_penalties(traj, weights, world=None, waypoint_slots=None, Q=None, attract=None):
    """Full objective on a constructed trajectory.

    Returns the value with partial gradients on the coefficients, on the
    durations (direct dependence) and on the interior points ``Q`` (direct
    dependence through the regularisers). ``waypoint_slots`` indexes the
    movable interior points; ``attract`` optionally maps slot -> target pose
    for soft viewpoint attraction.
    """
    wt = weights
    K, n = traj.n_pieces, 2 * traj.s
    T = traj.durations
    gc = np.zeros_like(traj.coeffs)
    gT = np.zeros(K)
    terms, viol = {}, {}

    js, gcs, gTs = control_effort(traj)
    gc += gcs
    gT += gTs
    terms["smooth"] = js
    terms["time"] = wt.w_t * float(T.sum())
    gT += wt.w_t

    # sampled constraints, kappa + 1 samples per piece including both ends
    frac = np.arange(wt.kappa + 1) / wt.kappa
    F, E = _falling(n)
    if world is not None:
        D, origin, res = world.esdf_grid()
    else:
        D, origin, res = _NO_GRID, np.zeros(3), 1.0
    need = wt.clearance + wt.margin
    jd, gcd, gTd, jc, gcc, gTc, vmax = _dynamics_kernel(
        np.ascontiguousarray(traj.coeffs), T, frac, F, E, wt.v_max, wt.a_max, wt.j_max, wt.omega_max,
        wt.mu, D, origin, res, need, wt.clearance)
    gc += wt.w_d * gcd + wt.w_c * gcc
    gT += wt.w_d * gTd + wt.w_c * gTc
    for k, name in enumerate(("vel", "acc", "jerk", "pitch_rate", "yaw_rate", "clearance")):
        viol[name] = float(vmax[k])
    terms["dynamics"] = wt.w_d * jd
    terms["collision"] = wt.w_c * jc

    gQ = np.zeros((K - 1, N_CH))
    if Q is not None and waypoint_slots is not None and len(waypoint_slots) > 2:
        W = np.asarray(Q)[waypoint_slots, :3]
        cv, gcv = _cov_rows(np.diff(W, axis=0))
        terms["cov_q"] = wt.w_sc * cv
        gW = np.zeros_like(W)
        gW[1:] += gcv
        gW[:-1] -= gcv
        gQ[waypoint_slots, :3] += wt.w_sc * gW
    else:
        terms["cov_q"] = 0.0
    cvt, gcvt = _cov_rows(T[:, None])
    terms["cov_t"] = wt.w_tc * cvt
    gT += wt.w_tc * gcvt[:, 0]

    if attract:
        ja = 0.0
        for slot, pose in attract.items():
            d = np.asarray(Q)[slot] - pose
            ja += float(d @ d)
            gQ[slot] += wt.w_sc * 2.0 * d
        terms["attract"] = wt.w_sc * ja

    value = float(sum(terms.values()))
    return PenaltyResult(value, gc, gT, gQ, terms, viol)


# -- local problem -----------------------------------------------------------

@dataclass
class LocalResult:
    traj: PolyTrajectory
    objective: float
    iterations: int
    converged: bool
    line_search_failed: bool
    infeasible: bool
    violation: dict
    history: list
    slots: list  # per interior slot: "viewpoint" or "waypoint"
    nodes: list = field(default_factory=list)  # nodes actually interpolated, start first


class LocalProblem:
    """Decision vector x = [Q_w (W x 5), tau (K)]; viewpoint slots fixed."""

    def __init__(self, points, kinds, start_state, weights, world=None, soft_viewpoints=False):
        pts = np.asarray(points, dtype=float).reshape(-1, N_CH)
        if len(pts) < 2:
            raise ValueError("need at least the start and one target node")
        self.weights = weights
        self.world = world
        self.kinds = list(kinds)
        start = np.zeros((S_ORDER, N_CH))
        st = np.asarray(start_state, dtype=float).reshape(-1, N_CH)
        start[:len(st)] = st[:S_ORDER]
        # unwrap yaw along the node chain starting from the current heading
        yaw = np.concatenate([[start[0, 4]], pts[1:, 4]])
        pts = pts.copy()
        pts[1:, 4] = np.unwrap(yaw)[1:]
        pts[0] = start[0]
        end = np.zeros((S_ORDER, N_CH))
        end[0] = pts[-1]
        self.minco = Minco(start, end)
        self.Q0 = pts[1:-1]
        inner = self.kinds[1:-1]
        self.soft = soft_viewpoints
        if soft_viewpoints:
            self.free = np.arange(len(inner))
            self.attract = {i: self.Q0[i].copy() for i, k in enumerate(inner) if k == "viewpoint"}
        else:
            self.free = np.array([i for i, k in enumerate(inner) if k != "viewpoint"], dtype=np.int64)
            self.attract = None
        self.waypoint_slots = np.array([i for i, k in enumerate(inner) if k != "viewpoint"], dtype=np.int64)
        self.K = len(pts) - 1
        self.nodes = pts

    def initial_times(self):
        wt = self.weights
        seg = np.diff(self.nodes, axis=0)
        lin = np.linalg.norm(seg[:, :3], axis=1) / max(wt.v_max, 1e-6)
        ang = np.abs(seg[:, 3:]).max(axis=1) / max(wt.omega_max, 1e-6)
        return np.maximum(np.maximum(lin, ang), 0.2)

    def pack(self, Qw, T):
        return np.concatenate([np.asarray(Qw).ravel(), theta_inverse(np.asarray(T))])

    def unpack(self, x):
        nw = len(self.free) * N_CH
        Q = self.Q0.copy()
        Q[self.free] = x[:nw].reshape(-1, N_CH)
        tau = x[nw:]
        return Q, tau

    def value_and_grad(self, x):
        Q, tau = self.unpack(x)
        T = theta_map(tau)
        T = np.atleast_1d(T)
        traj = self.minco.construct(Q, T)
        res = evaluate_penalties(traj, self.weights, self.world, self.waypoint_slots, Q, self.attract)
        gQ, gT = self.minco.backward(res.grad_c, res.grad_T)
        gQ = gQ + res.grad_Q
        g = np.concatenate([gQ[self.free].ravel(), gT * np.atleast_1d(theta_grad(tau))])
        self.last = (traj, res)
        return res.value, g

    def trajectory(self, x):
        Q, tau = self.unpack(x)
        return self.minco.construct(Q, np.atleast_1d(theta_map(tau)))


def subdivide(nodes, max_piece):
    """Insert evenly spaced free waypoints so no segment exceeds ``max_piece``."""
    out = [nodes[0]]
    for a, b in zip(nodes[:-1], nodes[1:]):
        pa, pb = np.asarray(a.pose, float), np.asarray(b.pose, float)
        n = int(np.ceil(np.linalg.norm(pb[:3] - pa[:3]) / max_piece))
        d = pb - pa
        d[3:] = wrap_angle(d[3:])
        for k in range(1, n):
            q = pa + d * (k / n)
            out.append(PathNode.waypoint(q[:3], q[3], wrap_angle(q[4])))
        out.append(b)
    return out


def optimize_local(path_slice, world, weights=None, initial_state=None, max_iter=100, gtol=1e-5,
                   soft_viewpoints=False, warm_times=None, max_piece=2.0, ftol=1e-4):
    """Minimum-time, collision-penalised trajectory through a path slice.

    ``path_slice`` is a :class:`CoveragePath` (or a list of nodes) whose
    first node is the current drone pose; ``initial_state`` gives the
    current derivatives as rows [pose, vel, acc, jerk] (missing rows zero).
    Viewpoint nodes are interpolated exactly unless ``soft_viewpoints``.
    Segments longer than ``max_piece`` get extra free waypoints.
    """
    wt = weights or PenaltyWeights()
    nodes = list(getattr(path_slice, "nodes", path_slice))
    if max_piece and warm_times is None:
        nodes = subdivide(nodes, max_piece)
    pts = np.array([nd.pose for nd in nodes], dtype=float)
    kinds = [nd.kind for nd in nodes]
    if initial_state is None:
        initial_state = pts[0][None]
    st = np.zeros((S_ORDER, N_CH))
    given = np.asarray(initial_state, dtype=float).reshape(-1, N_CH)[:S_ORDER]
    st[:len(given)] = given
    pts[0] = st[0]
    if world is not None:
        world.ensure_esdf()
    prob = LocalProblem(pts, kinds, st, wt, world, soft_viewpoints)
    T0 = prob.initial_times() if warm_times is None else np.asarray(warm_times, dtype=float)
    x0 = prob.pack(prob.Q0[prob.free], T0)
    history = []

    last = {}

    def fun(x):
        f, g = prob.value_and_grad(x)
        last["x"], last["f"] = x.copy(), f
        return f, g

    def cb(xk):
        # the accepted iterate is normally the last point evaluated
        if "x" in last and np.array_equal(last["x"], xk):
            history.append(last["f"])
        else:
            history.append(prob.value_and_grad(xk)[0])

    history.append(fun(x0)[0])
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=cb,
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": ftol, "maxcor": 10})
    Q_opt, tau = prob.unpack(res.x)
    T_opt = np.atleast_1d(theta_map(tau))
    traj, T_opt = _rescale_to_limits(prob.minco, Q_opt, T_opt, wt, st)
    final = evaluate_penalties(traj, wt, world, prob.waypoint_slots, Q_opt, prob.attract)
    ls_fail = (not res.success) and "ABNORMAL" in str(res.message).upper()
    viol = dict(final.violation)
    if world is not None:
        viol["clearance"] = max(viol["clearance"], _dense_clearance(traj, world, wt.clearance))
    infeasible = world is not None and viol["clearance"] > 0.5 * wt.clearance
    return LocalResult(traj, float(res.fun), int(res.nit), bool(res.success), ls_fail, infeasible,
                       viol, history, kinds[1:-1], nodes)


def _rate_excess(traj, wt, start, per_piece=32):
    """Largest ratio of dense-sampled speed / angular rate to its limit."""
    t = np.concatenate([traj.junction_times[i] + np.linspace(0, T, per_piece, endpoint=False)
                        for i, T in enumerate(traj.durations)])
    v = traj.evaluate(t, 1)
    # the initial state may already exceed a limit; allow that much
    vlim = max(wt.v_max, float(np.linalg.norm(start[1, :3])))
    wlim = max(wt.omega_max, float(np.abs(start[1, 3:]).max()))
    r = np.linalg.norm(v[:, :3], axis=1).max() / max(vlim, 1e-9)
    return max(r, np.abs(v[:, 3:]).max() / max(wlim, 1e-9))


def _rescale_to_limits(minco, Q, T, wt, start, tol=1.005, rounds=8):
    """Uniformly stretch durations until dense speed and angular rate
    respect their limits; the soft penalties alone leave a small overshoot."""
    traj = minco.construct(Q, T)
    best = (_rate_excess(traj, wt, start), traj, T)
    for _ in range(rounds):
        r = best[0]
        if r <= tol:
            break
        T = best[2] * min(r / tol * 1.001, 2.0)
        traj = minco.construct(Q, T)
        r_new = _rate_excess(traj, wt, start)
        if r_new >= r:
            # boundary derivatives dominate; stretching no longer helps
            break
        best = (r_new, traj, T)
    return best[1], best[2]


def _dense_clearance(traj, world, clearance, per_piece=32):
    t = np.concatenate([traj.junction_times[i] + np.linspace(0, T, per_piece, endpoint=False)
                        for i, T in enumerate(traj.durations)] + [[traj.duration]])
    phi, _ = world.esdf_query(traj.evaluate(t)[:, :3])
    return float(np.max(clearance - phi))
