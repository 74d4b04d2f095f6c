"""Parametric embedded submanifolds and support-overlap measurement.

Every chart maps a box of intrinsic parameters into R^n.  Overlap between
two manifolds is measured by cutting the first chart's parameter box into
cells and counting the cells whose image lies within ``tau`` of the second
manifold; the counted cells' k-volume is the estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .transport import EmpiricalDistribution

__all__ = [
    "ManifoldError",
    "ManifoldSpec",
    "Mixture",
    "OverlapReport",
    "circle",
    "arc",
    "segment",
    "flat_patch",
    "torus_curve",
    "chart",
    "measure",
    "distance",
    "sample_manifold",
    "overlap_measure",
    "translate",
    "sample_transversal_offset",
    "classify_perturbation",
    "spec_to_kv",
    "spec_from_kv",
    "DEFAULT_RESOLUTION",
    "DEFAULT_TAU",
]

CHARTS = ("segment", "arc", "circle", "torus_knotless_curve", "flat_patch")
DEFAULT_RESOLUTION = 1e-3
DEFAULT_TAU = 10 * DEFAULT_RESOLUTION
# dense samples used by the non-analytic curve's distance function
_DENSE = 200_000
# chunk size for vectorised cell evaluation
_CHUNK = 500_000


class ManifoldError(ValueError):
    """Rejected manifold input."""


@dataclass(frozen=True)
class ManifoldSpec:
    """A k-dimensional chart in R^n.

    ``params`` is a sorted tuple of ``(name, values)`` pairs so the spec stays
    hashable; use :meth:`param` to read one back as an array.
    """

    chart_id: str
    params: tuple
    k: int
    n: int
    domain: tuple

    def __post_init__(self):
        if self.chart_id not in CHARTS:
            raise ManifoldError(f"unknown chart {self.chart_id!r}")
        if not (self.k < self.n or self.k == self.n):
            raise ManifoldError(f"intrinsic dimension {self.k} exceeds ambient {self.n}")
        if len(self.domain) != self.k:
            raise ManifoldError(f"domain has {len(self.domain)} axes for k={self.k}")
        for lo, hi in self.domain:
            if not hi > lo:
                raise ManifoldError(f"empty parameter interval ({lo}, {hi})")

    def param(self, name) -> np.ndarray:
        for key, val in self.params:
            if key == name:
                return np.array(val, dtype=np.float64)
        raise ManifoldError(f"{self.chart_id} has no parameter {name!r}")

    def replace_params(self, **updates) -> ManifoldSpec:
        merged = dict(self.params)
        for key, val in updates.items():
            merged[key] = _tup(val)
        return ManifoldSpec(self.chart_id, tuple(sorted(merged.items())), self.k, self.n, self.domain)


def _tup(v) -> tuple:
    return tuple(float(x) for x in np.atleast_1d(np.asarray(v, dtype=np.float64)))


def _make(chart_id, k, n, domain, **params) -> ManifoldSpec:
    items = tuple(sorted((key, _tup(val)) for key, val in params.items()))
    return ManifoldSpec(chart_id, items, k, n, tuple((float(a), float(b)) for a, b in domain))


def _frame(n, e1, e2):
    if e1 is None:
        e1 = np.eye(n)[0]
    if e2 is None:
        e2 = np.eye(n)[1]
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != (n,) or e2.shape != (n,):
        raise ManifoldError("frame vectors must live in the ambient space")
    if abs(e1 @ e1 - 1) > 1e-12 or abs(e2 @ e2 - 1) > 1e-12 or abs(e1 @ e2) > 1e-12:
        raise ManifoldError("frame vectors must be orthonormal")
    return e1, e2


def circle(center, radius, e1=None, e2=None) -> ManifoldSpec:
    """Circle of the given radius in the plane spanned by ``e1, e2``."""
    c = np.asarray(center, dtype=np.float64)
    if not radius > 0:
        raise ManifoldError("radius must be positive")
    e1, e2 = _frame(c.size, e1, e2)
    return _make("circle", 1, c.size, [(0.0, 2 * math.pi)], center=c, radius=radius, e1=e1, e2=e2)


def arc(center, radius, start, stop, e1=None, e2=None) -> ManifoldSpec:
    """Arc of angles ``[start, stop]`` (radians, ``0 < stop - start < 2 pi``)."""
    c = np.asarray(center, dtype=np.float64)
    if not radius > 0 or not 0 < stop - start < 2 * math.pi:
        raise ManifoldError("arc needs radius > 0 and 0 < stop - start < 2 pi")
    e1, e2 = _frame(c.size, e1, e2)
    return _make("arc", 1, c.size, [(start, stop)], center=c, radius=radius, e1=e1, e2=e2)


def segment(start, end) -> ManifoldSpec:
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(end, dtype=np.float64)
    if a.shape != b.shape or np.linalg.norm(b - a) == 0:
        raise ManifoldError("segment endpoints must differ and share a dimension")
    return _make("segment", 1, a.size, [(0.0, 1.0)], start=a, end=b)


def flat_patch(origin, u_dir, v_dir, u_range=(0.0, 1.0), v_range=(0.0, 1.0)) -> ManifoldSpec:
    """Rectangle ``origin + s u + t v`` with orthonormal ``u, v``."""
    o = np.asarray(origin, dtype=np.float64)
    u, v = _frame(o.size, u_dir, v_dir)
    return _make("flat_patch", 2, o.size, [u_range, v_range], origin=o, u=u, v=v)


def torus_curve(center=(0.0, 0.0, 0.0), major=1.0, minor=0.3, winding=3) -> ManifoldSpec:
    """Closed (1, winding) curve on a torus in R^3; unknotted for any winding.

    This is the one chart without closed-form point distance; distances are
    taken against a dense sample of the curve.
    """
    if not major > minor > 0:
        raise ManifoldError("torus curve needs major > minor > 0")
    c = np.asarray(center, dtype=np.float64)
    if c.size != 3:
        raise ManifoldError("torus curve lives in R^3")
    return _make("torus_knotless_curve", 1, 3, [(0.0, 2 * math.pi)], center=c, major=major, minor=minor, winding=winding)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def chart(m: ManifoldSpec, u) -> np.ndarray:
    """Map parameters ``u`` of shape (K, k) to points (K, n)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, m.k)
    cid = m.chart_id
    if cid in ("circle", "arc"):
        c, r = m.param("center"), m.param("radius")[0]
        e1, e2 = m.param("e1"), m.param("e2")
        t = u[:, 0]
        return c + r * (np.cos(t)[:, None] * e1 + np.sin(t)[:, None] * e2)
    if cid == "segment":
        a, b = m.param("start"), m.param("end")
        return a + u[:, :1] * (b - a)
    if cid == "flat_patch":
        o, uu, vv = m.param("origin"), m.param("u"), m.param("v")
        return o + u[:, :1] * uu + u[:, 1:2] * vv
    c = m.param("center")
    big, small, q = (m.param(x)[0] for x in ("major", "minor", "winding"))
    t = u[:, 0]
    rad = big + small * np.cos(q * t)
    return c + np.stack([rad * np.cos(t), rad * np.sin(t), small * np.sin(q * t)], axis=1)


def _speed(m: ManifoldSpec, u) -> np.ndarray:
    """k-volume element of the chart at parameters ``u``."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, m.k)
    cid = m.chart_id
    if cid in ("circle", "arc"):
        return np.full(len(u), m.param("radius")[0])
    if cid == "segment":
        return np.full(len(u), float(np.linalg.norm(m.param("end") - m.param("start"))))
    if cid == "flat_patch":
        return np.ones(len(u))
    big, small, q = (m.param(x)[0] for x in ("major", "minor", "winding"))
    t = u[:, 0]
    rad = big + small * np.cos(q * t)
    drad = -small * q * np.sin(q * t)
    dz = small * q * np.cos(q * t)
    return np.sqrt(drad**2 + rad**2 + dz**2)


def _max_speed(m: ManifoldSpec) -> np.ndarray:
    """Upper bound on |d chart / d u_l| per parameter axis."""
    if m.chart_id == "torus_knotless_curve":
        big, small, q = (m.param(x)[0] for x in ("major", "minor", "winding"))
        return np.array([math.sqrt((big + small) ** 2 + (small * q) ** 2)])
    return np.full(m.k, float(_speed(m, np.array([[lo for lo, _ in m.domain]]))[0]))


def measure(m: ManifoldSpec) -> float:
    """k-dimensional volume (length or area) of the chart image."""
    cid = m.chart_id
    (lo, hi) = m.domain[0]
    if cid in ("circle", "arc", "segment"):
        return float(_speed(m, [[lo]])[0] * (hi - lo))
    if cid == "flat_patch":
        return float(np.prod([b - a for a, b in m.domain]))
    t = np.linspace(lo, hi, 400_001)
    return float(np.trapezoid(_speed(m, t[:, None]), t))


@lru_cache(maxsize=16)
def _dense_tree(m: ManifoldSpec):
    lo, hi = m.domain[0]
    t = np.linspace(lo, hi, _DENSE, endpoint=False) if m.chart_id == "torus_knotless_curve" else np.linspace(lo, hi, _DENSE)
    pts = chart(m, t[:, None])
    step = float(np.max(np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)))
    return cKDTree(pts), t, step


def dense_slack(m: ManifoldSpec) -> float:
    """Worst-case overestimate of :func:`distance` for the sampled chart; zero otherwise."""
    if m.chart_id != "torus_knotless_curve":
        return 0.0
    return 0.5 * _dense_tree(m)[2]


def distance(m: ManifoldSpec, X) -> np.ndarray:
    """Euclidean distance from each row of ``X`` to the chart image."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != m.n:
        raise ManifoldError(f"points in R^{X.shape[1]} for a manifold in R^{m.n}")
    cid = m.chart_id
    if cid in ("circle", "arc"):
        c, r = m.param("center"), m.param("radius")[0]
        e1, e2 = m.param("e1"), m.param("e2")
        d = X - c
        a, b = d @ e1, d @ e2
        rho = np.hypot(a, b)
        perp = d - a[:, None] * e1 - b[:, None] * e2
        on_circle = np.hypot(rho - r, np.linalg.norm(perp, axis=1))
        if cid == "circle":
            return on_circle
        lo, hi = m.domain[0]
        ang = np.mod(np.arctan2(b, a) - lo, 2 * math.pi)
        inside = ang <= hi - lo
        ends = chart(m, np.array([[lo], [hi]]))
        to_end = np.min(np.linalg.norm(X[:, None, :] - ends[None, :, :], axis=2), axis=1)
        return np.where(inside, on_circle, to_end)
    if cid == "segment":
        a, b = m.param("start"), m.param("end")
        ab = b - a
        t = np.clip(((X - a) @ ab) / (ab @ ab), 0.0, 1.0)
        return np.linalg.norm(X - (a + t[:, None] * ab), axis=1)
    if cid == "flat_patch":
        o, uu, vv = m.param("origin"), m.param("u"), m.param("v")
        d = X - o
        (u0, u1), (v0, v1) = m.domain
        s = np.clip(d @ uu, u0, u1)
        t = np.clip(d @ vv, v0, v1)
        return np.linalg.norm(d - s[:, None] * uu - t[:, None] * vv, axis=1)
    tree = _dense_tree(m)[0]
    return tree.query(X)[0]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mixture:
    """Modes in parameter space: centers (per mode, k values), weights, spread."""

    centers: tuple
    weights: tuple
    spread: float

    def __post_init__(self):
        if len(self.centers) != len(self.weights) or not self.centers:
            raise ManifoldError("mixture needs one weight per mode")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1) > 1e-12:
            raise ManifoldError("mixture weights must be a probability vector")
        if not self.spread > 0:
            raise ManifoldError("mixture spread must be positive")


_PERIODIC = ("circle", "torus_knotless_curve")


def _uniform_params(m: ManifoldSpec, N: int, rng) -> np.ndarray:
    lo = np.array([a for a, _ in m.domain])
    hi = np.array([b for _, b in m.domain])
    u = lo + (hi - lo) * rng.uniform(size=(N, m.k))
    if m.chart_id == "torus_knotless_curve":
        # inverse arc-length CDF so samples are uniform in length, not parameter
        t = np.linspace(lo[0], hi[0], 20_001)
        sp = _speed(m, t[:, None])
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (sp[1:] + sp[:-1]) * np.diff(t))])
        cdf /= cdf[-1]
        u = np.interp(rng.uniform(size=N), cdf, t)[:, None]
    return u


def _mixture_params(m: ManifoldSpec, N: int, mix: Mixture, rng) -> np.ndarray:
    centers = np.array(mix.centers, dtype=np.float64).reshape(len(mix.weights), m.k)
    lo = np.array([a for a, _ in m.domain])
    hi = np.array([b for _, b in m.domain])
    labels = rng.choice(len(mix.weights), size=N, p=np.array(mix.weights))
    u = centers[labels] + mix.spread * rng.normal(size=(N, m.k))
    if m.chart_id in _PERIODIC:
        return lo + np.mod(u - lo, hi - lo)
    # truncate to the domain by redrawing the offending noise
    bad = np.any((u < lo) | (u > hi), axis=1)
    while np.any(bad):
        u[bad] = centers[labels[bad]] + mix.spread * rng.normal(size=(int(bad.sum()), m.k))
        bad = np.any((u < lo) | (u > hi), axis=1)
    return u


def sample_manifold(m: ManifoldSpec, N: int, density="uniform", seed=0, return_params=False):
    """Draw ``N`` points on the chart image, uniform in k-volume or from a mode mixture."""
    if N < 1:
        raise ManifoldError("need at least one sample")
    rng = np.random.default_rng(seed)
    if isinstance(density, Mixture):
        u = _mixture_params(m, N, density, rng)
    elif density == "uniform":
        u = _uniform_params(m, N, rng)
    else:
        raise ManifoldError(f"unknown density {density!r}")
    dist = EmpiricalDistribution.uniform(chart(m, u))
    return (dist, u) if return_params else dist


# ---------------------------------------------------------------------------
# Overlap, translation, perturbation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OverlapReport:
    overlap_estimate: float
    resolution: float
    tau: float
    shared_cells: int
    total_cells: int


def overlap_measure(a: ManifoldSpec, b: ManifoldSpec, resolution: float = DEFAULT_RESOLUTION, tau: float | None = None) -> OverlapReport:
    """k-volume of the part of ``a`` lying within ``tau`` of ``b``.

    ``resolution`` is the cell size in k-volume units along each parameter
    axis; ``tau`` defaults to ten cells.
    """
    if not resolution > 0:
        raise ManifoldError("resolution must be positive")
    if tau is None:
        tau = 10 * resolution
    if not tau > 0 or tau < resolution / 10 * (1 - 1e-12):
        raise ManifoldError(f"tau={tau} is below resolution/10={resolution / 10}")
    if a.n != b.n:
        raise ManifoldError("manifolds live in different ambient spaces")
    speeds = _max_speed(a)
    counts = [max(1, math.ceil(s * (hi - lo) / resolution)) for s, (lo, hi) in zip(speeds, a.domain)]
    axes = [lo + (np.arange(c) + 0.5) * (hi - lo) / c for c, (lo, hi) in zip(counts, a.domain)]
    du = float(np.prod([(hi - lo) / c for c, (lo, hi) in zip(counts, a.domain)]))
    total = int(np.prod(counts))
    shared = 0
    volume = 0.0
    if a.k == 1:
        blocks = (axes[0][i : i + _CHUNK, None] for i in range(0, total, _CHUNK))
    else:
        step = max(1, _CHUNK // counts[1])
        blocks = (
            np.stack(np.meshgrid(axes[0][i : i + step], axes[1], indexing="ij"), axis=-1).reshape(-1, 2)
            for i in range(0, counts[0], step)
        )
    for u in blocks:
        hit = distance(b, chart(a, u)) <= tau
        shared += int(hit.sum())
        volume += float(np.sum(_speed(a, u[hit]))) * du
    return OverlapReport(volume, float(resolution), float(tau), shared, total)


_POSITION_PARAMS = {
    "circle": ("center",),
    "arc": ("center",),
    "segment": ("start", "end"),
    "flat_patch": ("origin",),
    "torus_knotless_curve": ("center",),
}


def translate(m: ManifoldSpec, t) -> ManifoldSpec:
    """The same chart with its image shifted by ``t``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size != m.n or not np.all(np.isfinite(t)):
        raise ManifoldError(f"translation must be a finite vector in R^{m.n}")
    return m.replace_params(**{name: m.param(name) + t for name in _POSITION_PARAMS[m.chart_id]})


def sample_transversal_offset(delta: float, a: ManifoldSpec, b: ManifoldSpec, seed=0) -> np.ndarray:
    """Uniform random vector in the closed ball of radius ``delta`` in R^n."""
    if not delta > 0:
        raise ManifoldError("delta must be positive")
    if a.n != b.n:
        raise ManifoldError("manifolds live in different ambient spaces")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=a.n)
    direction /= np.linalg.norm(direction)
    radius = delta * rng.uniform() ** (1.0 / a.n)
    return direction * radius


def classify_perturbation(m: ManifoldSpec, x, eps, tol: float) -> str:
    """``"on_manifold"`` if ``x + eps`` stays within ``tol`` of ``m``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if float(distance(m, x[None, :])[0]) > 1e-9 + dense_slack(m):
        raise ManifoldError("base point is not on the manifold")
    moved = x + np.asarray(eps, dtype=np.float64).reshape(-1)
    return "on_manifold" if float(distance(m, moved[None, :])[0]) <= tol else "off_manifold"


# ---------------------------------------------------------------------------
# Key-value serialisation
# ---------------------------------------------------------------------------


_REQUIRED = {
    "circle": ("center", "radius", "e1", "e2"),
    "arc": ("center", "radius", "e1", "e2"),
    "segment": ("start", "end"),
    "flat_patch": ("origin", "u", "v"),
    "torus_knotless_curve": ("center", "major", "minor", "winding"),
}


def spec_to_kv(m: ManifoldSpec) -> dict:
    out = {"chart_id": m.chart_id, "k": str(m.k), "n": str(m.n)}
    out["domain"] = ", ".join(f"{lo!r}:{hi!r}" for lo, hi in m.domain)
    for key, val in m.params:
        out[key] = ", ".join(repr(v) for v in val)
    return out


def spec_from_kv(kv: dict) -> ManifoldSpec:
    """Inverse of :func:`spec_to_kv`; unknown chart fields raise ``ManifoldError``."""
    kv = {k.strip(): str(v).strip() for k, v in kv.items()}
    try:
        cid = kv.pop("chart_id")
        k = int(kv.pop("k"))
        n = int(kv.pop("n"))
        domain = tuple(tuple(float(x) for x in part.split(":")) for part in kv.pop("domain").split(","))
        params = {key: tuple(float(x) for x in val.split(",")) for key, val in kv.items()}
    except KeyError as exc:
        raise ManifoldError(f"missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ManifoldError(f"malformed value: {exc}") from None
    need = _REQUIRED.get(cid)
    if need is None:
        raise ManifoldError(f"unknown chart {cid!r}")
    if set(params) != set(need):
        raise ManifoldError(f"{cid} needs fields {sorted(need)}, got {sorted(params)}")
    return ManifoldSpec(cid, tuple(sorted(params.items())), k, n, domain)
