from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment, linprog

from manifold_lab.transport import (
    EmpiricalDistribution,
    SolverError,
    TransportError,
    brute_force_ot,
    cost_matrix,
    extract_map,
    optimal_cost,
    read_point_cloud,
    solve_exact,
    solve_sinkhorn,
    wasserstein,
    write_point_cloud,
)

U = EmpiricalDistribution.uniform


def lp_oracle(a, b, C):
    """Independent LP solve of the Kantorovich problem."""
    n, m = C.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1
    for j in range(m):
        A_eq[n + j, j::m] = 1
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


# --- types -----------------------------------------------------------------


def test_distribution_rejects_bad_weights():
    with pytest.raises(TransportError):
        EmpiricalDistribution(np.zeros((2, 1)), [0.5, 0.6])
    with pytest.raises(TransportError):
        EmpiricalDistribution(np.zeros((2, 1)), [1.5, -0.5])
    with pytest.raises(TransportError):
        EmpiricalDistribution([[np.nan]], [1.0])
    with pytest.raises(TransportError):
        EmpiricalDistribution(np.zeros((0, 2)), [])


def test_distribution_is_immutable():
    P = U([[0.0, 1.0]])
    with pytest.raises(ValueError):
        P.points[0, 0] = 3.0


# --- cost matrix -----------------------------------------------------------


def test_cost_matrix_examples():
    P, Q = U([[0.0, 0.0]]), U([[3.0, 4.0]])
    assert cost_matrix(P, Q, "euclidean", 2).tolist() == [[25.0]]
    assert cost_matrix(P, Q, "l1", 1).tolist() == [[7.0]]
    assert cost_matrix(P, Q, "euclidean", 1).tolist() == [[5.0]]
    R = U(np.random.default_rng(0).normal(size=(6, 3)))
    assert np.all(np.diag(cost_matrix(R, R)) == 0)


def test_cost_matrix_dimension_mismatch():
    with pytest.raises(TransportError):
        cost_matrix(U([[0.0]]), U([[0.0, 1.0]]))
    with pytest.raises(TransportError):
        cost_matrix(U([[0.0]]), U([[1.0]]), "chebyshev")


# --- exact solver ----------------------------------------------------------


def test_exact_two_point_line():
    P, Q = U([[0.0], [1.0]]), U([[1.0], [2.0]])
    plan, value = solve_exact(P, Q, cost_matrix(P, Q))
    assert value == 1.0
    tmap = extract_map(plan, P, Q)
    assert tmap.is_permutation
    assert tmap.images.ravel().tolist() == [1.0, 2.0]
    assert wasserstein(P, Q, p=1) == 1.0


def test_exact_identity_gives_diagonal():
    P = U(np.random.default_rng(3).normal(size=(7, 2)))
    plan, value = solve_exact(P, P, cost_matrix(P, P))
    assert value == 0.0
    assert np.allclose(plan.dense(), np.eye(7) / 7)
    tmap = extract_map(plan, P, P)
    assert tmap.is_permutation and np.array_equal(tmap.images, P.points)


@pytest.mark.parametrize("seed", range(5))
def test_exact_matches_brute_force_n5(seed):
    rng = np.random.default_rng(seed)
    P, Q = U(rng.normal(size=(5, 2))), U(rng.normal(size=(5, 2)))
    C = cost_matrix(P, Q)
    assert abs(solve_exact(P, Q, C)[1] - brute_force_ot(P, Q, C)) <= 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_exact_matches_lp_nonuniform(seed):
    rng = np.random.default_rng(100 + seed)
    n, m = rng.integers(1, 9, size=2)
    P = EmpiricalDistribution(rng.normal(size=(n, 2)), rng.dirichlet(np.ones(n)))
    Q = EmpiricalDistribution(rng.normal(size=(m, 2)), rng.dirichlet(np.ones(m)))
    C = cost_matrix(P, Q, "l1", 1)
    plan, value = solve_exact(P, Q, C)
    assert value == pytest.approx(lp_oracle(P.weights, Q.weights, C), abs=1e-9)
    r, c = plan.residuals(P.weights, Q.weights)
    assert r <= 1e-9 and c <= 1e-9
    assert np.all(plan.mass >= 0)


def test_exact_matches_hungarian_n60():
    rng = np.random.default_rng(7)
    P, Q = U(rng.normal(size=(60, 3))), U(rng.normal(size=(60, 3)))
    C = cost_matrix(P, Q)
    r, c = linear_sum_assignment(C)
    assert solve_exact(P, Q, C)[1] == pytest.approx(C[r, c].sum() / 60, abs=1e-12)


def test_exact_degenerate_ties_terminate():
    # all costs equal: every plan is optimal, pivoting must not cycle
    P, Q = U(np.zeros((6, 1))), U(np.zeros((6, 1)))
    plan, value = solve_exact(P, Q, np.ones((6, 6)))
    assert value == pytest.approx(1.0)
    grid = np.arange(8.0)[:, None]
    P = U(grid)
    plan, value = solve_exact(P, P, cost_matrix(P, P, "l1", 1))
    assert value == 0.0


def test_exact_drops_negligible_atoms():
    P = EmpiricalDistribution([[0.0], [5.0]], [1.0 - 1e-16, 1e-16])
    Q = U([[1.0]])
    plan, value = solve_exact(P, Q, cost_matrix(P, Q))
    assert value == 1.0
    assert plan.rows.tolist() == [0]


def test_exact_is_deterministic():
    rng = np.random.default_rng(11)
    P, Q = U(rng.normal(size=(30, 2))), U(rng.normal(size=(30, 2)))
    C = cost_matrix(P, Q)
    a, va = solve_exact(P, Q, C)
    b, vb = solve_exact(P, Q, C)
    assert va == vb and np.array_equal(a.rows, b.rows) and np.array_equal(a.cols, b.cols)


def test_exact_rejects_bad_cost():
    P = U([[0.0], [1.0]])
    with pytest.raises(TransportError):
        solve_exact(P, P, np.ones((3, 2)))
    with pytest.raises(TransportError):
        solve_exact(P, P, np.array([[0.0, np.inf], [1.0, 0.0]]))


def test_solver_error_carries_residuals():
    err = SolverError("boom", 1e-3, 2e-3)
    assert err.row_residual == 1e-3 and "row residual" in str(err)


# --- Sinkhorn --------------------------------------------------------------


def test_sinkhorn_single_atom_any_epsilon():
    P, Q = U([[0.0, 0.0]]), U([[3.0, 4.0]])
    for eps in (10.0, 1.0, 0.01):
        plan, value = solve_sinkhorn(P, Q, cost_matrix(P, Q), eps)
        assert value == 25.0 and plan.converged


def test_sinkhorn_identity_bound():
    rng = np.random.default_rng(2)
    P = U(rng.normal(size=(20, 2)))
    C = cost_matrix(P, P)
    values = []
    for eps in (1.0, 0.1, 0.01):
        plan, v = solve_sinkhorn(P, P, C, eps, tol=1e-6)
        assert plan.converged
        assert v <= 0.0 + eps * math.log(20)
        values.append(v)
    assert values[0] >= values[1] >= values[2]


@pytest.mark.slow
def test_sinkhorn_gap_monotone_over_epsilon_sweep():
    rng = np.random.default_rng(0)
    P, Q = U(rng.normal(size=(100, 2))), U(rng.normal(size=(100, 2)))
    C = cost_matrix(P, Q)
    exact = solve_exact(P, Q, C)[1]
    med = float(np.median(C))
    gaps = []
    for f in (0.1, 0.01, 0.001):
        plan, v = solve_sinkhorn(P, Q, C, f * med, tol=1e-6)
        assert plan.converged
        assert v >= exact - 1e-9
        gaps.append(v - exact)
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_sinkhorn_nonconvergence_is_flagged():
    rng = np.random.default_rng(5)
    P, Q = U(rng.normal(size=(30, 2))), U(rng.normal(size=(30, 2)))
    plan, _ = solve_sinkhorn(P, Q, cost_matrix(P, Q), 1e-4, max_iter=5)
    assert not plan.converged and plan.row_residual > 0
    with pytest.raises(SolverError):
        optimal_cost(P, Q, method="sinkhorn", epsilon=1e-4, max_iter=5)


def test_sinkhorn_rejects_nonpositive_epsilon():
    P = U([[0.0]])
    with pytest.raises(TransportError):
        solve_sinkhorn(P, P, np.zeros((1, 1)), 0.0)


# --- wasserstein and maps ----------------------------------------------------


def test_wasserstein_examples():
    assert wasserstein(U([[0.0, 0.0]]), U([[3.0, 4.0]]), 2) == 5.0
    P = U(np.random.default_rng(1).normal(size=(5, 2)))
    assert wasserstein(P, P) == 0.0


def test_map_to_single_atom():
    P, Q = U([[0.0], [4.0]]), U([[1.0]])
    plan, _ = solve_exact(P, Q, cost_matrix(P, Q))
    tmap = extract_map(plan, P, Q)
    assert not tmap.is_permutation and tmap.images.ravel().tolist() == [1.0, 1.0]


def test_map_barycentric_in_hull():
    P = U([[0.0]])
    Q = U([[1.0], [3.0]])
    plan, _ = solve_exact(P, Q, cost_matrix(P, Q))
    tmap = extract_map(plan, P, Q)
    assert tmap.images.tolist() == [[2.0]]
    assert tmap.assignment is None


def test_brute_force_limits():
    P = U(np.zeros((9, 1)))
    with pytest.raises(TransportError):
        brute_force_ot(P, P, np.zeros((9, 9)))
    assert brute_force_ot(U([[0.0]]), U([[2.0]]), np.array([[4.0]])) == 4.0
    assert brute_force_ot(U([[0.0], [1.0]]), U([[1.0], [2.0]]), np.array([[1.0, 4.0], [0.0, 1.0]])) == 1.0


# --- metric axioms (property based) ------------------------------------------

clouds = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=2), min_size=n, max_size=n)
)


@settings(max_examples=60, deadline=None)
@given(clouds, clouds, clouds, st.sampled_from([(1, "euclidean"), (2, "euclidean"), (1, "l1")]))
def test_metric_axioms(a, b, c, pg):
    p, ground = pg
    P, Q, R = U(a), U(b), U(c)
    assert wasserstein(P, P, p, ground) <= 1e-9
    assert abs(wasserstein(P, Q, p, ground) - wasserstein(Q, P, p, ground)) <= 1e-9
    assert wasserstein(P, R, p, ground) <= wasserstein(P, Q, p, ground) + wasserstein(Q, R, p, ground) + 1e-9


@settings(max_examples=40, deadline=None)
@given(clouds, clouds, st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=2))
def test_translation_bound(a, b, t):
    P, Q = U(a), U(b)
    moved = Q.translated(t)
    assert wasserstein(P, moved) <= wasserstein(P, Q) + float(np.linalg.norm(t)) + 1e-9


# --- file format -------------------------------------------------------------


def test_point_cloud_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    P = EmpiricalDistribution(rng.normal(size=(5, 3)), rng.dirichlet(np.ones(5)))
    write_point_cloud(P, tmp_path / "p.csv")
    back = read_point_cloud(tmp_path / "p.csv")
    assert np.array_equal(back.points, P.points)
    assert np.allclose(back.weights, P.weights, rtol=0, atol=1e-15)


def test_point_cloud_without_weights(tmp_path):
    f = tmp_path / "u.csv"
    f.write_text("x1,x2\n0,0\n3,4\n")
    P = read_point_cloud(f)
    assert P.is_uniform() and P.size == 2


@pytest.mark.parametrize(
    "text, msg",
    [("", "empty"), ("a,b\n1,2\n", "header"), ("x1,x2\n1\n", ":2:"), ("x1\nfoo\n", ":2:"), ("x1\n", "no points")],
)
def test_point_cloud_errors(tmp_path, text, msg):
    f = tmp_path / "bad.csv"
    f.write_text(text)
    with pytest.raises(TransportError, match=msg):
        read_point_cloud(f)
