"""Generator families and primal gradients of W2^2, W1, JSD and the -log D loss.

Each ``grad_*`` function returns a :class:`GradientAudit` pairing the
closed-form gradient with central finite differences of the loss itself
(full OT re-solves or full grid re-evaluations).  The OT formulas
differentiate the transport cost at the fixed optimal permutation; the
finite differences are what certify that this equals the true derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import GridDensity, GridError, jsd, kl, mixture
from .transport import EmpiricalDistribution, cost_matrix, extract_map, optimal_cost, solve_exact

__all__ = [
    "GradientError",
    "GeneratorFamily",
    "GradientAudit",
    "affine_family",
    "mixture_family",
    "pushforward",
    "finite_difference",
    "ot_value_and_gradient",
    "w2sq_gradient",
    "w1_gradient",
    "grad_w2sq",
    "grad_w1",
    "density_grid",
    "jsd_gradient",
    "neg_log_d_gradient",
    "grad_jsd",
    "grad_neg_log_d",
    "neg_log_d_identity",
    "neg_log_d_weight",
    "jsd_weight",
    "sample_density_family",
    "H_REL",
]

H_REL = 1e-5
QUADRATURE_TOL = 1e-6


class GradientError(ValueError):
    """Rejected gradient input: wrong family, violated precondition, tie."""


@dataclass(frozen=True, eq=False)
class GeneratorFamily:
    """Parametric generator or density family.

    ``affine_pushforward``: ``G(z) = A z + b``, ``dims = (latent, ambient)``,
    theta packs ``A`` row-major then ``b``.
    ``gaussian_mixture_density``: ``dims = (components, ambient)``, theta packs
    component means, softplus-raw scales, then weight logits.
    """

    family_id: str
    dims: tuple
    theta: np.ndarray
    latent_spec: str = ""

    def __post_init__(self):
        if self.family_id not in ("affine_pushforward", "gaussian_mixture_density"):
            raise GradientError(f"unknown family {self.family_id!r}")
        th = np.array(self.theta, dtype=np.float64).reshape(-1)
        if th.size != self.n_params or not np.all(np.isfinite(th)):
            raise GradientError(f"theta must be {self.n_params} finite values")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @property
    def n_params(self) -> int:
        a, n = self.dims
        if self.family_id == "affine_pushforward":
            return n * a + n
        return a * n + 2 * a


@dataclass(frozen=True, eq=False)
class GradientAudit:
    name: str
    formula_gradient: np.ndarray
    oracle_gradient: np.ndarray
    max_rel_error: float
    h: float


def affine_family(A, b, latent_spec: str = "") -> GeneratorFamily:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n, d = A.shape
    if b.size != n:
        raise GradientError("offset length must match the output dimension")
    return GeneratorFamily("affine_pushforward", (d, n), np.concatenate([A.ravel(), b]), latent_spec)


def _softplus_inv(s):
    s = np.asarray(s, dtype=np.float64)
    return s + np.log(-np.expm1(-s))


def mixture_family(means, scales, weights) -> GeneratorFamily:
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 1:
        means = means[:, None]
    m, n = means.shape
    scales = np.asarray(scales, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if scales.size != m or weights.size != m or np.any(scales <= 0) or np.any(weights <= 0):
        raise GradientError("need one positive scale and weight per component")
    theta = np.concatenate([means.ravel(), _softplus_inv(scales), np.log(weights / weights.sum())])
    return GeneratorFamily("gaussian_mixture_density", (m, n), theta)


def _unpack_affine(f: GeneratorFamily, theta):
    d, n = f.dims
    theta = np.asarray(theta, dtype=np.float64)
    return theta[: n * d].reshape(n, d), theta[n * d :]


def _unpack_mixture(f: GeneratorFamily, theta):
    m, n = f.dims
    theta = np.asarray(theta, dtype=np.float64)
    means = theta[: m * n].reshape(m, n)
    raw = theta[m * n : m * n + m]
    logits = theta[m * n + m :]
    scales = np.logaddexp(0.0, raw)
    w = np.exp(logits - logits.max())
    return means, scales, raw, w / w.sum()


def _require(f: GeneratorFamily, family_id: str):
    if f.family_id != family_id:
        raise GradientError(f"operation needs a {family_id} family, got {f.family_id}")


def pushforward(f: GeneratorFamily, theta, latents) -> EmpiricalDistribution:
    """Uniform point cloud ``G_theta(z_j)`` over the given latents."""
    _require(f, "affine_pushforward")
    A, b = _unpack_affine(f, theta)
    Z = np.asarray(latents, dtype=np.float64).reshape(-1, f.dims[0])
    return EmpiricalDistribution.uniform(Z @ A.T + b)


def _affine_pullback(f, weights, V, Z):
    """Sum_i w_i V_i^T dG(z_i)/dtheta for the affine family."""
    wv = weights[:, None] * V
    return np.concatenate([(wv.T @ Z).ravel(), wv.sum(axis=0)])


def finite_difference(loss, theta, h_rel: float = H_REL) -> np.ndarray:
    """Central differences with per-coordinate step ``h_rel * max(|theta_c|, 1)``."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros(theta.size)
    for c in range(theta.size):
        h = h_rel * max(abs(theta[c]), 1.0)
        tp = theta.copy()
        tm = theta.copy()
        tp[c] += h
        tm[c] -= h
        fp, fm = loss(tp), loss(tm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradientError(f"loss is not finite at theta[{c}] +- {h}")
        out[c] = (fp - fm) / (tp[c] - tm[c])
    return out


def _rel_error(formula, oracle) -> float:
    denom = max(float(np.max(np.abs(oracle))) if oracle.size else 0.0, 1e-8)
    return float(np.max(np.abs(formula - oracle))) / denom if oracle.size else 0.0


# ---------------------------------------------------------------------------
# Wasserstein gradients
# ---------------------------------------------------------------------------


def _matched(P_r: EmpiricalDistribution, f, theta, latents, ground, p):
    if P_r.size != len(latents) or not P_r.is_uniform():
        raise GradientError("need a uniform target with one latent per target atom")
    Q = pushforward(f, theta, latents)
    plan, value = solve_exact(P_r, Q, cost_matrix(P_r, Q, ground, p))
    tmap = extract_map(plan, P_r, Q)
    if not tmap.is_permutation:
        raise GradientError("optimal plan is not a permutation, so no Monge map exists here")
    return Q, tmap.assignment, value


def ot_value_and_gradient(P_r, f, theta, latents, p: int = 2, ground: str = "euclidean"):
    """``W_p^p`` and its fixed-permutation gradient in one solve.

    ``p = 2`` (euclidean): pair weight ``2 (T(x_i) - x_i)``.  ``p = 1``: the
    sign vector (l1) or unit vector (euclidean) of ``T(x_i) - x_i``.
    """
    _require(f, "affine_pushforward")
    Z = np.asarray(latents, dtype=np.float64).reshape(-1, f.dims[0])
    if p == 2 and ground != "euclidean":
        raise GradientError("the W2^2 formula is defined for the euclidean ground cost")
    Q, sigma, value = _matched(P_r, f, theta, Z, ground, p)
    diff = Q.points[sigma] - P_r.points
    if p == 2:
        V = 2.0 * diff
    elif p != 1:
        raise GradientError("only p = 1 and p = 2 have closed-form gradients")
    elif ground == "l1":
        ties = np.argwhere(diff == 0.0)
        if ties.size:
            i, c = ties[0]
            raise GradientError(f"coordinate tie at pair (x_{i}, T(x_{i})) in axis {c}: subgradient is not unique")
        V = np.sign(diff)
    elif ground == "euclidean":
        norms = np.linalg.norm(diff, axis=1)
        if np.any(norms == 0.0):
            i = int(np.flatnonzero(norms == 0.0)[0])
            raise GradientError(f"x_{i} coincides with its image: subgradient is not unique")
        V = diff / norms[:, None]
    else:
        raise GradientError(f"unknown ground cost {ground!r}")
    return value, _affine_pullback(f, P_r.weights, V, Z[sigma])


def w2sq_gradient(P_r, f, theta, latents) -> np.ndarray:
    """``sum_i w_i 2 (T(x_i) - x_i)^T dT(x_i)/dtheta`` at the optimal permutation."""
    return ot_value_and_gradient(P_r, f, theta, latents, 2, "euclidean")[1]


def w1_gradient(P_r, f, theta, latents, ground: str = "l1") -> np.ndarray:
    """Sign-vector (l1) or unit-vector (euclidean) weighted pullback for W1."""
    return ot_value_and_gradient(P_r, f, theta, latents, 1, ground)[1]


def grad_w2sq(P_r, f, theta, latents, h_rel: float = H_REL) -> GradientAudit:
    _require(f, "affine_pushforward")
    formula = w2sq_gradient(P_r, f, theta, latents)
    oracle = finite_difference(lambda th: optimal_cost(P_r, pushforward(f, th, latents), 2, "euclidean"), theta, h_rel)
    return GradientAudit("w2sq", formula, oracle, _rel_error(formula, oracle), h_rel)


def grad_w1(P_r, f, theta, latents, ground: str = "l1", h_rel: float = H_REL) -> GradientAudit:
    _require(f, "affine_pushforward")
    formula = w1_gradient(P_r, f, theta, latents, ground)
    oracle = finite_difference(lambda th: optimal_cost(P_r, pushforward(f, th, latents), 1, ground), theta, h_rel)
    return GradientAudit(f"w1_{ground}", formula, oracle, _rel_error(formula, oracle), h_rel)


# ---------------------------------------------------------------------------
# Density-family gradients on grids
# ---------------------------------------------------------------------------


def _mixture_density(f, theta, X, with_grad=False):
    means, scales, raw, w = _unpack_mixture(f, theta)
    m, n = f.dims
    d2 = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)  # (K, m)
    comp = np.exp(-0.5 * d2 / scales**2) / (2 * math.pi * scales**2) ** (n / 2)
    q = comp @ w
    if not with_grad:
        return q
    g_means = (w * comp / scales**2)[:, :, None] * (X[:, None, :] - means[None, :, :])
    dsig = comp * (d2 / scales**3 - n / scales)
    g_raw = w * dsig * (1.0 / (1.0 + np.exp(-raw)))
    g_logit = w * (comp - q[:, None])
    grad = np.concatenate([g_means.reshape(len(X), m * n), g_raw, g_logit], axis=1)
    return q, grad


def _check_grid(f, grid: GridDensity):
    _require(f, "gaussian_mixture_density")
    if grid.ndim != f.dims[1] or grid.ndim > 2:
        raise GradientError(f"a {f.dims[1]}-D mixture needs a matching 1-D or 2-D grid")


def density_grid(f: GeneratorFamily, theta, like: GridDensity, with_grad=False):
    """Midpoint-rule cell masses of ``q_theta`` on the grid of ``like``.

    Raises when the raw masses miss total mass 1 by more than 1e-6, i.e. the
    grid is too coarse or too small for the current parameters.
    """
    _check_grid(f, like)
    X = like.centers()
    vol = like.cell_volume
    out = _mixture_density(f, theta, X, with_grad)
    q = out[0] if with_grad else out
    total = float(q.sum() * vol)
    if abs(total - 1.0) > QUADRATURE_TOL:
        raise GridError(f"quadrature self-check failed: q_theta integrates to {total!r} on this grid")
    g = like.with_masses(q * vol / total)
    return (g, out[1] * vol) if with_grad else g


def jsd_gradient(f, theta, p_r: GridDensity) -> np.ndarray:
    """Quadrature of ``grad q * log(q / q_m)``; equals ``2 grad JSD``."""
    q, dq = density_grid(f, theta, p_r, with_grad=True)
    qm = 0.5 * (q.masses + p_r.masses)
    pos = q.masses > 0
    logr = np.zeros_like(qm)
    logr[pos] = np.log(q.masses[pos] / qm[pos])
    return logr @ dq


def neg_log_d_gradient(f, theta, p_r: GridDensity) -> np.ndarray:
    """Quadrature of ``grad q * (1 + log(q_m / p_r))``; needs ``p_r > 0`` everywhere."""
    if np.any(p_r.masses <= 0):
        raise GradientError("p_r must be strictly positive on the grid (smooth it first)")
    q, dq = density_grid(f, theta, p_r, with_grad=True)
    qm = 0.5 * (q.masses + p_r.masses)
    return (1.0 + np.log(qm / p_r.masses)) @ dq


def grad_jsd(f, theta, p_r: GridDensity, h_rel: float = H_REL) -> GradientAudit:
    _check_grid(f, p_r)
    formula = jsd_gradient(f, theta, p_r)
    oracle = 2.0 * finite_difference(lambda th: jsd(p_r, density_grid(f, th, p_r)), theta, h_rel)
    return GradientAudit("jsd", formula, oracle, _rel_error(formula, oracle), h_rel)


def _two_kl_mix(f, th, p_r):
    return 2.0 * kl(mixture(density_grid(f, th, p_r), p_r), p_r)


def grad_neg_log_d(f, theta, p_r: GridDensity, h_rel: float = H_REL) -> GradientAudit:
    _check_grid(f, p_r)
    formula = neg_log_d_gradient(f, theta, p_r)
    oracle = finite_difference(lambda th: _two_kl_mix(f, th, p_r), theta, h_rel)
    return GradientAudit("neg_log_d", formula, oracle, _rel_error(formula, oracle), h_rel)


def neg_log_d_identity(f, theta, p_r: GridDensity, h_rel: float = H_REL):
    """Finite differences of ``2 KL(q_m || p_r)`` and of ``KL(q || p_r) - 2 JSD``.

    The two forms are algebraically equal.  The fixed-discriminator loss
    ``E_q[-log D*]`` is what differs from them in value while sharing the
    gradient.  Returns both difference vectors and their max relative
    disagreement.
    """
    if np.any(p_r.masses <= 0):
        raise GradientError("p_r must be strictly positive on the grid")

    def other(th):
        q = density_grid(f, th, p_r)
        return kl(q, p_r) - 2.0 * jsd(p_r, q)

    a = finite_difference(lambda th: _two_kl_mix(f, th, p_r), theta, h_rel)
    b = finite_difference(other, theta, h_rel)
    return a, b, _rel_error(a, b)


def neg_log_d_weight(p_r, q) -> np.ndarray:
    """Per-cell ``|1 + log(q_m / p_r)|`` weighting the -log D gradient."""
    p_r = np.asarray(p_r, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.abs(1.0 + np.log(0.5 * (p_r + q) / p_r))


def jsd_weight(p_r, q) -> np.ndarray:
    """Per-cell ``|log(q / q_m)|`` weighting the JSD gradient."""
    p_r = np.asarray(p_r, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.abs(np.log(q / (0.5 * (p_r + q))))


def sample_density_family(f: GeneratorFamily, theta, noise, labels_u) -> np.ndarray:
    """Reparametrised mixture samples from fixed normal ``noise`` and uniform ``labels_u``."""
    _require(f, "gaussian_mixture_density")
    means, scales, _, w = _unpack_mixture(f, theta)
    cdf = np.cumsum(w)
    labels = np.minimum(np.searchsorted(cdf, labels_u, side="right"), len(w) - 1)
    return means[labels] + scales[labels, None] * noise
