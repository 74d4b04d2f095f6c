"""Discrete optimal transport between weighted point clouds.

Exact plans come from a transportation (network) simplex on the bipartite
source/target graph; an entropic log-domain Sinkhorn solver is offered as an
approximation path for larger clouds.  ``brute_force_ot`` enumerates all
permutations and exists purely as an independent check on small inputs.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TransportError",
    "SolverError",
    "EmpiricalDistribution",
    "Coupling",
    "TransportMap",
    "cost_matrix",
    "solve_exact",
    "solve_sinkhorn",
    "optimal_cost",
    "wasserstein",
    "extract_map",
    "brute_force_ot",
    "read_point_cloud",
    "write_point_cloud",
]

WEIGHT_FLOOR = 1e-15
EXACT_MARGINAL_TOL = 1e-9
BRUTE_FORCE_MAX_N = 8


class TransportError(ValueError):
    """Rejected input to a transport operation."""


class SolverError(RuntimeError):
    """Internal solver failure; carries the marginal residuals."""

    def __init__(self, message: str, row_residual: float = float("nan"), col_residual: float = float("nan")):
        super().__init__(f"{message} (row residual {row_residual:.3e}, column residual {col_residual:.3e})")
        self.row_residual = row_residual
        self.col_residual = col_residual


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    """Weighted point cloud in R^n.

    ``points`` is (N, n); ``weights`` is (N,) and must sum to one.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise TransportError("points must be a non-empty (N, n) array")
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise TransportError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise TransportError("point coordinates must be finite")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise TransportError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise TransportError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "weights", _readonly(w))

    @classmethod
    def uniform(cls, points) -> EmpiricalDistribution:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def translated(self, t) -> EmpiricalDistribution:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape[0] != self.dim:
            raise TransportError(f"translation of length {t.shape[0]} in dimension {self.dim}")
        return EmpiricalDistribution(self.points + t, self.weights)


@dataclass(frozen=True, eq=False)
class Coupling:
    """Sparse transport plan: parallel arrays of (row, col, mass)."""

    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    n_source: int
    n_target: int
    converged: bool = True
    row_residual: float = 0.0
    col_residual: float = 0.0
    iterations: int = 0

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_source, self.n_target))
        np.add.at(out, (self.rows, self.cols), self.mass)
        return out

    def residuals(self, a, b) -> tuple[float, float]:
        g = self.dense()
        return float(np.max(np.abs(g.sum(axis=1) - a))), float(np.max(np.abs(g.sum(axis=0) - b)))


@dataclass(frozen=True, eq=False)
class TransportMap:
    images: np.ndarray
    is_permutation: bool
    # target index for each source atom; only set when is_permutation
    assignment: np.ndarray | None = field(default=None)


def _check_pair(P: EmpiricalDistribution, Q: EmpiricalDistribution):
    if P.dim != Q.dim:
        raise TransportError(f"dimension mismatch: {P.dim} vs {Q.dim}")


def cost_matrix(P: EmpiricalDistribution, Q: EmpiricalDistribution, ground: str = "euclidean", p: int = 2) -> np.ndarray:
    """Pairwise ``||x_i - y_j||^p`` under the euclidean or l1 ground norm."""
    _check_pair(P, Q)
    if int(p) != p or p < 1:
        raise TransportError(f"p must be an integer >= 1, got {p!r}")
    diff = P.points[:, None, :] - Q.points[None, :, :]
    if ground == "euclidean":
        if p == 2:
            return np.einsum("ijk,ijk->ij", diff, diff)
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    elif ground == "l1":
        d = np.abs(diff).sum(axis=2)
    else:
        raise TransportError(f"unknown ground cost {ground!r}")
    return d if p == 1 else d**p


# ---------------------------------------------------------------------------
# Transportation simplex
# ---------------------------------------------------------------------------


def _initial_basis(a, b, C):
    """Matrix-minimum starting basis; always a spanning tree of N+M-1 cells."""
    N, M = C.shape
    s = a.copy()
    d = b.copy()
    Cm = C.astype(np.float64, copy=True)
    rows_left, cols_left = N, M
    basis = {}
    for step in range(N + M - 1):
        flat = int(np.argmin(Cm))
        i, j = divmod(flat, M)
        f = min(s[i], d[j])
        basis[flat] = f
        row_done = s[i] <= d[j]
        s[i] -= f
        d[j] -= f
        if step == N + M - 2:
            break
        if (row_done and rows_left > 1) or cols_left == 1:
            Cm[i, :] = np.inf
            rows_left -= 1
        else:
            Cm[:, j] = np.inf
            cols_left -= 1
    return basis


def _tree(basis, N, M, C):
    """Potentials, parent pointers and depths of the basis tree rooted at row 0."""
    adj = [[] for _ in range(N + M)]
    for flat in basis:
        i, j = divmod(flat, M)
        adj[i].append(N + j)
        adj[N + j].append(i)
    pot = np.zeros(N + M)
    parent = [-1] * (N + M)
    depth = [0] * (N + M)
    seen = [False] * (N + M)
    seen[0] = True
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if seen[nb]:
                continue
            seen[nb] = True
            parent[nb] = node
            depth[nb] = depth[node] + 1
            if node < N:
                pot[nb] = C[node, nb - N] - pot[node]
            else:
                pot[nb] = C[nb, node - N] - pot[node]
            queue.append(nb)
    if not all(seen):
        raise SolverError("basis is not a spanning tree")
    return pot[:N], pot[N:], parent, depth


def _cycle(i, j, parent, depth, N, M):
    """Cells on the tree path from row i to column j, in order from row i."""
    x, y = i, N + j
    left, right = [x], [y]
    while depth[x] > depth[y]:
        x = parent[x]
        left.append(x)
    while depth[y] > depth[x]:
        y = parent[y]
        right.append(y)
    while x != y:
        x = parent[x]
        y = parent[y]
        left.append(x)
        right.append(y)
    nodes = left + right[-2::-1]
    cells = []
    for u, v in zip(nodes[:-1], nodes[1:]):
        r, c = (u, v - N) if u < N else (v, u - N)
        cells.append(r * M + c)
    return cells


def _transport_simplex(a, b, C, max_pivots=None):
    N, M = C.shape
    basis = _initial_basis(a, b, C)
    if N == 1 or M == 1:
        return basis, 0
    scale = max(1.0, float(np.max(np.abs(C))))
    tol = 1e-12 * scale
    if max_pivots is None:
        max_pivots = 50 * (N + M) * max(N, M) + 1000
    # Dantzig pricing; after a run of degenerate pivots switch to Bland's rule
    # (lowest flat index enters and leaves) until a pivot makes progress.
    degenerate_run = 0
    bland_after = N + M
    for pivot in range(max_pivots):
        u, v, parent, depth = _tree(basis, N, M, C)
        red = C - u[:, None] - v[None, :]
        if degenerate_run >= bland_after:
            candidates = np.flatnonzero(red.ravel() < -tol)
            if candidates.size == 0:
                return basis, pivot
            enter = int(candidates[0])
        else:
            enter = int(np.argmin(red))
            if red.flat[enter] >= -tol:
                return basis, pivot
        i, j = divmod(enter, M)
        cells = _cycle(i, j, parent, depth, N, M)
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(basis[c] for c in minus)
        leave = min(c for c in minus if basis[c] == theta)
        for c in minus:
            basis[c] = max(basis[c] - theta, 0.0)
        for c in plus:
            basis[c] += theta
        del basis[leave]
        basis[enter] = theta
        degenerate_run = degenerate_run + 1 if theta == 0.0 else 0
    raise SolverError(f"transport simplex did not terminate in {max_pivots} pivots")


def _support(w):
    keep = np.flatnonzero(w >= WEIGHT_FLOOR)
    ws = w[keep]
    return keep, ws / ws.sum()


def solve_exact(P: EmpiricalDistribution, Q: EmpiricalDistribution, cost: np.ndarray) -> tuple[Coupling, float]:
    """Optimal Kantorovich plan for ``cost`` between P and Q.

    Atoms lighter than 1e-15 are dropped and the remaining weights
    renormalised before solving; they receive no mass in the plan.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.shape != (P.size, Q.size):
        raise TransportError(f"cost shape {C.shape} does not match ({P.size}, {Q.size})")
    if not np.all(np.isfinite(C)):
        raise TransportError("cost matrix must be finite")
    ri, a = _support(P.weights)
    ci, b = _support(Q.weights)
    Cs = C[np.ix_(ri, ci)]
    basis, pivots = _transport_simplex(a, b, Cs)
    M = Cs.shape[1]
    flats = np.array(sorted(f for f, m in basis.items() if m > 0.0), dtype=np.int64)
    mass = np.array([basis[f] for f in flats], dtype=np.float64)
    r, c = np.divmod(flats, M)
    rows, cols = ri[r], ci[c]
    row_res = float(np.max(np.abs(np.bincount(r, mass, minlength=len(a)) - a)))
    col_res = float(np.max(np.abs(np.bincount(c, mass, minlength=len(b)) - b)))
    if row_res > EXACT_MARGINAL_TOL or col_res > EXACT_MARGINAL_TOL:
        raise SolverError("exact plan violates marginals", row_res, col_res)
    value = math.fsum(mass * C[rows, cols])
    plan = Coupling(rows, cols, mass, P.size, Q.size, True, row_res, col_res, pivots)
    return plan, value


def _lse_rows(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def solve_sinkhorn(
    P: EmpiricalDistribution,
    Q: EmpiricalDistribution,
    cost: np.ndarray,
    epsilon: float,
    max_iter: int = 100_000,
    tol: float = 1e-9,
) -> tuple[Coupling, float]:
    """Entropic plan by log-domain Sinkhorn with epsilon annealing.

    The returned value is the transport cost of the plan, without the
    entropy term.  A plan that misses ``tol`` within ``max_iter`` sweeps is
    returned with ``converged=False`` and its residuals.
    """
    if not epsilon > 0:
        raise TransportError(f"epsilon must be positive, got {epsilon!r}")
    C = np.asarray(cost, dtype=np.float64)
    if C.shape != (P.size, Q.size):
        raise TransportError(f"cost shape {C.shape} does not match ({P.size}, {Q.size})")
    ri, a = _support(P.weights)
    ci, b = _support(Q.weights)
    Cs = C[np.ix_(ri, ci)]
    loga, logb = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))

    cmax = float(np.max(Cs)) if Cs.size else 0.0
    schedule = []
    e = max(cmax, epsilon)
    while e > epsilon:
        schedule.append(e)
        e *= 0.5
    schedule.append(epsilon)

    it = 0
    row_res = np.inf
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        stage_tol = tol if final else max(tol, 1e-2 * float(a.min()))
        K = -Cs / eps
        KT = np.ascontiguousarray(K.T)
        while it < max_iter:
            f = eps * (loga - _lse_rows(K + g / eps))
            g = eps * (logb - _lse_rows(KT + f / eps))
            it += 1
            if it % 10 == 0 or it == max_iter:
                plan = np.exp((f[:, None] + g[None, :] - Cs) / eps)
                row_res = float(np.max(np.abs(plan.sum(axis=1) - a)))
                if row_res <= stage_tol:
                    break
        if it >= max_iter:
            break
    eps = schedule[-1]
    plan = np.exp((f[:, None] + g[None, :] - Cs) / eps)
    row_res = float(np.max(np.abs(plan.sum(axis=1) - a)))
    col_res = float(np.max(np.abs(plan.sum(axis=0) - b)))
    converged = max(row_res, col_res) <= tol
    r, c = np.nonzero(plan > 0)
    mass = plan[r, c]
    value = math.fsum(mass * Cs[r, c])
    coupling = Coupling(ri[r], ci[c], mass, P.size, Q.size, converged, row_res, col_res, it)
    return coupling, value


def optimal_cost(P, Q, p: int = 2, ground: str = "euclidean", method: str = "exact", **sinkhorn_kw) -> float:
    """Minimal expected ``||x - y||^p``, i.e. ``W_p ** p``."""
    C = cost_matrix(P, Q, ground, p)
    if method == "exact":
        return solve_exact(P, Q, C)[1]
    if method == "sinkhorn":
        kw = dict(sinkhorn_kw)
        if "epsilon" not in kw:
            kw["epsilon"] = 0.01 * float(np.median(C)) if np.median(C) > 0 else 1e-3
        plan, value = solve_sinkhorn(P, Q, C, **kw)
        if not plan.converged:
            raise SolverError("Sinkhorn did not converge", plan.row_residual, plan.col_residual)
        return value
    raise TransportError(f"unknown method {method!r}")


def wasserstein(P, Q, p: int = 2, ground: str = "euclidean", method: str = "exact", **sinkhorn_kw) -> float:
    """``W_p(P, Q)`` under the given ground norm."""
    value = optimal_cost(P, Q, p, ground, method, **sinkhorn_kw)
    return max(value, 0.0) ** (1.0 / p)


def extract_map(c: Coupling, P: EmpiricalDistribution, Q: EmpiricalDistribution) -> TransportMap:
    """Barycentric projection ``x_i -> sum_j g_ij y_j / w_i`` of a plan."""
    if c.n_source != P.size or c.n_target != Q.size:
        raise TransportError("coupling sizes do not match the distributions")
    row_mass = np.bincount(c.rows, c.mass, minlength=P.size)
    if np.any(row_mass <= 0):
        bad = int(np.flatnonzero(row_mass <= 0)[0])
        raise TransportError(f"source atom {bad} carries no mass")
    images = np.zeros((P.size, Q.dim))
    np.add.at(images, c.rows, c.mass[:, None] * Q.points[c.cols])
    images /= row_mass[:, None]
    row_count = np.bincount(c.rows, minlength=P.size)
    col_count = np.bincount(c.cols, minlength=Q.size)
    is_perm = P.size == Q.size and bool(np.all(row_count == 1)) and bool(np.all(col_count == 1))
    assignment = None
    if is_perm:
        assignment = np.empty(P.size, dtype=np.int64)
        assignment[c.rows] = c.cols
        images = np.array(Q.points[assignment], copy=True)
    return TransportMap(images, is_perm, assignment)


def brute_force_ot(P: EmpiricalDistribution, Q: EmpiricalDistribution, cost: np.ndarray) -> float:
    """Minimum over all N! permutations; equal-size uniform inputs only."""
    n = P.size
    if Q.size != n or not (P.is_uniform() and Q.is_uniform()):
        raise TransportError("brute force needs equal-size uniform marginals")
    if n > BRUTE_FORCE_MAX_N:
        raise TransportError(f"brute force limited to N <= {BRUTE_FORCE_MAX_N}, got {n}")
    C = np.asarray(cost, dtype=np.float64)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = C[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(totals))
    return math.fsum(C[np.arange(n), perms[best]]) / n


# ---------------------------------------------------------------------------
# Point-cloud CSV
# ---------------------------------------------------------------------------


def read_point_cloud(path) -> EmpiricalDistribution:
    """Read ``x1,...,xn[,weight]`` CSV; missing weights mean uniform."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TransportError(f"{path}: empty file") from None
        has_w = header[-1] == "weight"
        coords = header[:-1] if has_w else header
        expected = [f"x{i + 1}" for i in range(len(coords))]
        if not coords or coords != expected:
            raise TransportError(f"{path}: header must be x1,...,xn[,weight], got {','.join(header)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise TransportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                rows.append([float(x) for x in rec])
            except ValueError as exc:
                raise TransportError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise TransportError(f"{path}: no points")
    arr = np.array(rows)
    if has_w:
        w = arr[:, -1]
        if w.sum() <= 0:
            raise TransportError(f"{path}: weights sum to zero")
        return EmpiricalDistribution(arr[:, :-1], w / w.sum())
    return EmpiricalDistribution.uniform(arr)


def write_point_cloud(dist: EmpiricalDistribution, path, weights: bool = True) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"x{i + 1}" for i in range(dist.dim)]
        w.writerow(header + (["weight"] if weights else []))
        for pt, wt in zip(dist.points, dist.weights):
            row = [repr(float(x)) for x in pt]
            w.writerow(row + ([repr(float(wt))] if weights else []))
