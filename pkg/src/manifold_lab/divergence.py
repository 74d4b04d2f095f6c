"""Grid densities, KL / Jensen-Shannon divergences and the F-distance.

All logarithms are natural, so the JSD ceiling is ``log 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transport import EmpiricalDistribution

__all__ = [
    "GridError",
    "GridDensity",
    "DiscriminatorField",
    "histogram",
    "smooth",
    "kl",
    "jsd",
    "mixture",
    "optimal_discriminator",
    "f_distance_objective",
    "estimate_f_distance",
    "read_grid",
    "write_grid",
    "LOG2",
]

LOG2 = math.log(2.0)
_TINY = np.finfo(np.float64).tiny


class GridError(ValueError):
    """Rejected grid input."""


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Cell masses on an axis-aligned box, flattened in row-major order."""

    box: tuple
    shape: tuple
    masses: np.ndarray

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        shape = tuple(int(s) for s in self.shape)
        if len(box) != len(shape) or not 1 <= len(shape) <= 3:
            raise GridError(f"grid dimension must be 1, 2 or 3 (box {len(box)}, shape {len(shape)})")
        if any(not hi > lo for lo, hi in box) or any(s < 1 for s in shape):
            raise GridError("box edges must satisfy lo < hi and cell counts be >= 1")
        m = np.array(self.masses, dtype=np.float64).reshape(-1)
        if m.size != int(np.prod(shape)):
            raise GridError(f"{m.size} masses for shape {shape}")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise GridError("masses must be finite and nonnegative")
        if abs(m.sum() - 1.0) > 1e-12:
            raise GridError(f"masses sum to {m.sum()!r}, expected 1")
        m.setflags(write=False)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "masses", m)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def widths(self) -> np.ndarray:
        return np.array([(hi - lo) / s for (lo, hi), s in zip(self.box, self.shape)])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def axes(self) -> list[np.ndarray]:
        """Cell-center coordinates along each axis."""
        return [lo + (np.arange(s) + 0.5) * (hi - lo) / s for (lo, hi), s in zip(self.box, self.shape)]

    def centers(self) -> np.ndarray:
        """(K, d) array of cell centers in mass order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=1)

    def as_array(self) -> np.ndarray:
        return self.masses.reshape(self.shape)

    def same_grid(self, other: GridDensity) -> bool:
        return self.shape == other.shape and self.box == other.box

    def with_masses(self, masses) -> GridDensity:
        return GridDensity(self.box, self.shape, masses)


@dataclass(frozen=True, eq=False)
class DiscriminatorField:
    values: np.ndarray


def _check_same(p: GridDensity, q: GridDensity):
    if not p.same_grid(q):
        raise GridError(f"grid mismatch: {p.box}/{p.shape} vs {q.box}/{q.shape}")


def histogram(samples: EmpiricalDistribution, box, shape) -> GridDensity:
    """Bin weighted samples; a point outside ``box`` is an error."""
    box = [tuple(map(float, b)) for b in box]
    shape = [int(s) for s in shape]
    if samples.dim != len(box):
        raise GridError(f"samples live in R^{samples.dim} but box has {len(box)} axes")
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    pts = samples.points
    outside = np.any((pts < lo) | (pts > hi), axis=1)
    if np.any(outside):
        idx = int(np.flatnonzero(outside)[0])
        raise GridError(f"sample {idx} at {pts[idx].tolist()} lies outside the box")
    s = np.array(shape)
    cell = np.floor((pts - lo) / (hi - lo) * s).astype(np.int64)
    cell = np.minimum(cell, s - 1)
    flat = np.ravel_multi_index(tuple(cell.T), tuple(shape))
    masses = np.bincount(flat, weights=samples.weights, minlength=int(np.prod(shape)))
    return GridDensity(tuple(box), tuple(shape), masses / masses.sum())


def _gauss_kernel(sigma_cells: float, size: int) -> np.ndarray:
    half = min(size - 1, int(math.ceil(40.0 * sigma_cells)))
    k = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma_cells) ** 2)
    return w / w.sum()


def smooth(g: GridDensity, sigma: float) -> GridDensity:
    """Discrete Gaussian convolution with standard deviation ``sigma`` (coordinate units).

    Mass leaving the box is discarded and the result renormalised.  Cells
    whose smoothed mass underflows double precision are floored at the
    smallest normal float, so every cell of the output is strictly positive.
    """
    if not sigma > 0:
        raise GridError(f"sigma must be positive, got {sigma!r}")
    arr = g.as_array().astype(np.float64)
    for axis, (width, size) in enumerate(zip(g.widths, g.shape)):
        kern = _gauss_kernel(sigma / width, size)
        half = (kern.size - 1) // 2
        arr = np.apply_along_axis(lambda v: np.convolve(v, kern)[half : half + size], axis, arr)
    arr = np.maximum(arr, _TINY)
    arr = arr / arr.sum()
    return g.with_masses(arr.reshape(-1))


def _xlogy_ratio(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(x / y) with 0 log 0 = 0; assumes y > 0 wherever x > 0."""
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * (np.log(x[pos]) - np.log(y[pos]))
    return out


def kl(p: GridDensity, q: GridDensity) -> float:
    """``sum p log(p / q)``; ``inf`` when p has mass where q has none."""
    _check_same(p, q)
    pm, qm = p.masses, q.masses
    if np.any((pm > 0) & (qm == 0)):
        return math.inf
    return float(max(np.sum(_xlogy_ratio(pm, qm)), 0.0))


def _jsd_masses(pm: np.ndarray, qm: np.ndarray) -> float:
    s = pm + qm
    # p log(2p / (p+q)) is the KL(p || m) summand with m = (p+q)/2
    a = np.zeros_like(pm)
    b = np.zeros_like(qm)
    pp, qp = pm > 0, qm > 0
    a[pp] = pm[pp] * np.log(2.0 * pm[pp] / s[pp])
    b[qp] = qm[qp] * np.log(2.0 * qm[qp] / s[qp])
    val = 0.5 * np.sum(a) + 0.5 * np.sum(b)
    return float(min(max(val, 0.0), LOG2))


def jsd(p: GridDensity, q: GridDensity) -> float:
    """Jensen-Shannon divergence of two densities on the same grid, in [0, log 2]."""
    _check_same(p, q)
    return _jsd_masses(p.masses, q.masses)


def mixture(p: GridDensity, q: GridDensity) -> GridDensity:
    _check_same(p, q)
    return p.with_masses(0.5 * (p.masses + q.masses))


def optimal_discriminator(p_r: GridDensity, q: GridDensity) -> DiscriminatorField:
    """Per-cell ``p_r / (p_r + q)``, with 0/0 read as 1/2."""
    _check_same(p_r, q)
    s = p_r.masses + q.masses
    vals = np.full(s.shape, 0.5)
    nz = s > 0
    vals[nz] = p_r.masses[nz] / s[nz]
    return DiscriminatorField(vals)


# ---------------------------------------------------------------------------
# F-distance over restricted discriminator families
# ---------------------------------------------------------------------------


def f_distance_objective(d_on_p, wp, d_on_q, wq, convention: str = "gan") -> float:
    """Objective of one discriminator D given its values on P- and Q-samples.

    ``"verbatim"``: ``|E_P log D - E_Q log(1 - D)| - 2 log(1/2)``.
    ``"gan"``: ``(E_P log D + E_Q log(1 - D) - 2 log(1/2)) / 2``, whose
    supremum over all D is the JSD.
    """
    d_on_p = np.asarray(d_on_p, dtype=np.float64)
    d_on_q = np.asarray(d_on_q, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lp = np.where(wp > 0, np.log(d_on_p), 0.0)
        lq = np.where(wq > 0, np.log1p(-d_on_q), 0.0)
    ep = float(np.sum(np.where(wp > 0, wp * lp, 0.0)))
    eq = float(np.sum(np.where(wq > 0, wq * lq, 0.0)))
    if convention == "verbatim":
        return abs(ep - eq) + 2.0 * LOG2
    if convention == "gan":
        return 0.5 * (ep + eq) + LOG2
    raise GridError(f"unknown convention {convention!r}")


def _cell_sup(pa: np.ndarray, qa: np.ndarray, convention: str, clip: float) -> float:
    """Supremum over cell-wise constant D of the objective, in closed form."""
    if convention == "gan":
        # per cell, p log D + q log(1-D) peaks at D = p / (p + q)
        return _jsd_masses(pa, qa)
    # the verbatim inner difference is increasing in every D, so the
    # absolute value peaks with D pinned at one end of [clip, 1 - clip]
    lo, hi = math.log(clip), math.log1p(-clip)
    top = pa.sum() * hi - qa.sum() * lo
    bottom = pa.sum() * lo - qa.sum() * hi
    return max(abs(top), abs(bottom)) + 2.0 * LOG2


def _partition_search(P, Q, convention, clip):
    pts = np.vstack([P.points, Q.points])
    wp = np.concatenate([P.weights, np.zeros(Q.size)])
    wq = np.concatenate([np.zeros(P.size), Q.weights])
    best = _cell_sup(np.array([1.0]), np.array([1.0]), convention, clip)
    for axis in range(pts.shape[1]):
        order = np.argsort(pts[:, axis], kind="stable")
        xs = pts[order, axis]
        cp = np.cumsum(wp[order])
        cq = np.cumsum(wq[order])
        # split after position i, only between distinct coordinates
        cuts = np.flatnonzero(xs[1:] > xs[:-1])
        for i in cuts:
            pa = np.array([cp[i], cp[-1] - cp[i]])
            qa = np.array([cq[i], cq[-1] - cq[i]])
            best = max(best, _cell_sup(np.clip(pa, 0, None), np.clip(qa, 0, None), convention, clip))
    return best


def _fourier_features(X, k, seed, scale):
    ss = np.random.SeedSequence(seed)
    rw, rb = (np.random.default_rng(s) for s in ss.spawn(2))
    omega = rw.normal(size=(k, X.shape[1])) / scale
    phase = rb.uniform(0.0, 2.0 * np.pi, size=k)
    return math.sqrt(2.0) * np.cos(X @ omega.T + phase)


def _sigmoid(s):
    return np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))


def _log_sigmoid(s):
    return -np.logaddexp(0.0, -s)


def _logistic_search(P, Q, k, steps, seed, convention, radius):
    pooled = np.vstack([P.points, Q.points])
    diffs = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    scale = float(np.median(dist[dist > 0])) if np.any(dist > 0) else 1.0
    fp = np.hstack([_fourier_features(P.points, k, seed, scale), np.ones((P.size, 1))])
    fq = np.hstack([_fourier_features(Q.points, k, seed, scale), np.ones((Q.size, 1))])
    wp, wq = P.weights, Q.weights
    lip = 0.25 * max(np.max((fp**2).sum(axis=1)), np.max((fq**2).sum(axis=1))) * 2.0

    def value(theta, sign):
        sp, sq = fp @ theta, fq @ theta
        if convention == "gan":
            return float(wp @ _log_sigmoid(sp) + wq @ _log_sigmoid(-sq))
        return sign * float(wp @ _log_sigmoid(sp) - wq @ _log_sigmoid(-sq))

    def grad(theta, sign):
        sp, sq = fp @ theta, fq @ theta
        if convention == "gan":
            return fp.T @ (wp * (1.0 - _sigmoid(sp))) - fq.T @ (wq * _sigmoid(sq))
        return sign * (fp.T @ (wp * (1.0 - _sigmoid(sp))) + fq.T @ (wq * _sigmoid(sq)))

    def project(theta):
        nrm = np.linalg.norm(theta)
        return theta if nrm <= radius else theta * (radius / nrm)

    def ascend(sign):
        # accelerated projected gradient ascent, fixed step 1/L
        theta = np.zeros(k + 1)
        prev = theta
        best = value(theta, sign)
        for t in range(1, steps + 1):
            y = theta + (t - 1) / (t + 2) * (theta - prev)
            prev = theta
            theta = project(y + grad(y, sign) / lip)
            best = max(best, value(theta, sign))
        return best

    if convention == "gan":
        return 0.5 * ascend(1.0) + LOG2
    return max(ascend(1.0), ascend(-1.0)) + 2.0 * LOG2


def estimate_f_distance(
    P: EmpiricalDistribution,
    Q: EmpiricalDistribution,
    family: str = "two_cell_partition",
    k: int | None = None,
    steps: int = 500,
    seed: int = 0,
    convention: str = "gan",
    clip: float = 1e-6,
    radius: float = 20.0,
) -> float:
    """F-distance between two sample sets over a capacity-restricted family.

    ``family="two_cell_partition"`` searches every axis-aligned split of the
    pooled samples into two cells, with D constant on each cell.
    ``family="logistic_features"`` uses ``D = sigmoid(w . phi(x) + c)`` over
    ``k`` seeded random Fourier features with ``||(w, c)|| <= radius``.
    Under the default ``"gan"`` convention the value is on the JSD scale;
    ``"verbatim"`` evaluates the absolute-value form with D kept inside
    ``[clip, 1 - clip]``.
    """
    if P.dim != Q.dim:
        raise GridError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    if convention not in ("gan", "verbatim"):
        raise GridError(f"unknown convention {convention!r}")
    if family == "two_cell_partition":
        return _partition_search(P, Q, convention, clip)
    if family == "logistic_features":
        if k is None or k < 1:
            raise GridError("logistic_features needs k >= 1 features")
        return _logistic_search(P, Q, int(k), int(steps), seed, convention, radius)
    raise GridError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# Grid file format
# ---------------------------------------------------------------------------


def write_grid(g: GridDensity, path) -> None:
    box = ",".join(f"{lo!r}:{hi!r}" for lo, hi in g.box)
    shape = ",".join(str(s) for s in g.shape)
    lines = [f"# box={box};shape={shape}"] + [repr(float(m)) for m in g.masses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path) -> GridDensity:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise GridError(f"{path}:1: missing '# box=...;shape=...' header")
    try:
        fields = dict(part.strip().split("=", 1) for part in lines[0][1:].split(";"))
        box = [tuple(float(v) for v in b.split(":")) for b in fields["box"].split(",")]
        shape = [int(s) for s in fields["shape"].split(",")]
    except (KeyError, ValueError) as exc:
        raise GridError(f"{path}:1: malformed header ({exc})") from None
    masses = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            masses.append(float(line))
        except ValueError:
            raise GridError(f"{path}:{lineno}: not a number: {line!r}") from None
    return GridDensity(tuple(box), tuple(shape), np.array(masses))
