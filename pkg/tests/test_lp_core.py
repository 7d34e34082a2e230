import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contactfunnel.lp_core import LPProblem, LPStatus, lp_feasible, lp_solve
from oracles import lp_vertex_enumeration, zonotope_vertices


def random_bounded_lp(rng, n=None, m=None, with_eq=None):
    n = n or int(rng.integers(1, 5))
    m = int(rng.integers(1, 7)) if m is None else m
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m) + rng.uniform(-0.5, 1.5)
    lb = -rng.uniform(0.5, 3.0, size=n)
    ub = rng.uniform(0.5, 3.0, size=n)
    c = rng.normal(size=n)
    E = f = None
    if (rng.random() < 0.3 if with_eq is None else with_eq) and n >= 2:
        E = rng.normal(size=(1, n))
        f = rng.normal(size=1) * 0.5
    return c, A, b, E, f, lb, ub


def compare_with_vertices(c, A, b, E, f, lb, ub, method):
    sol = lp_solve(LPProblem(c, A, b, E, f, lb, ub), method=method)
    best, _ = lp_vertex_enumeration(c, A, b, E, f, lb, ub)
    if best is None:
        assert sol.status == LPStatus.INFEASIBLE
    else:
        assert sol.status == LPStatus.OPTIMAL
        assert abs(sol.objective - best) <= 1e-8 * (1.0 + abs(best))
    return sol, best


def test_bound_active_minimum():
    sol = lp_solve(LPProblem([1.0], lb=[0.0], ub=[1.0]))
    assert sol.status == LPStatus.OPTIMAL
    assert sol.point[0] == 0.0
    assert sol.objective == 0.0


def test_contradictory_constraints_infeasible():
    # x + y >= 2 and x + y <= 1 with x, y >= 0
    A = [[-1.0, -1.0], [1.0, 1.0]]
    b = [-2.0, 1.0]
    for method in ("simplex", "highs"):
        sol = lp_solve(LPProblem([1.0, 1.0], A, b, lb=[0, 0]), method=method)
        assert sol.status == LPStatus.INFEASIBLE


def test_unbounded_detected():
    for method in ("simplex", "highs"):
        sol = lp_solve(LPProblem([-1.0, 0.0], [[0.0, 1.0]], [1.0], lb=[0.0, 0.0]), method=method)
        assert sol.status == LPStatus.UNBOUNDED


def test_free_variables_are_split():
    # min |x - 3| written with an epigraph variable, x free
    A = [[1.0, -1.0], [-1.0, -1.0]]
    b = [3.0, -3.0]
    sol = lp_solve(LPProblem([0.0, 1.0], A, b, lb=[-np.inf, 0.0]), method="simplex")
    assert sol.optimal
    assert abs(sol.point[0] - 3.0) < 1e-9
    assert abs(sol.objective) < 1e-9


@pytest.mark.parametrize("method", ["simplex", "highs"])
def test_three_variable_lps_match_vertex_enumeration(method):
    rng = np.random.default_rng(3)
    for _ in range(50):
        compare_with_vertices(*random_bounded_lp(rng, n=3, m=6, with_eq=False), method=method)


def test_random_small_lps_match_vertex_enumeration():
    rng = np.random.default_rng(20)
    statuses = set()
    for _ in range(200):
        sol, _ = compare_with_vertices(*random_bounded_lp(rng), method="simplex")
        statuses.add(sol.status)
    # the generator should exercise both outcomes
    assert statuses == {LPStatus.OPTIMAL, LPStatus.INFEASIBLE}


def test_weak_duality_bound():
    """Any y >= 0 on the inequality rows and bound multipliers give a lower
    bound on the optimum; the best such bound is attained (strong duality),
    so every random dual-feasible bound must lie below the primal value."""
    rng = np.random.default_rng(5)
    for _ in range(60):
        c, A, b, _, _, lb, ub = random_bounded_lp(rng, with_eq=False)
        sol = lp_solve(LPProblem(c, A, b, lb=lb, ub=ub), method="simplex")
        if not sol.optimal:
            continue
        for _ in range(5):
            y = rng.exponential(size=len(b))
            # reduced cost r = c + A'y; the bound box contributes min over the box
            r = c + A.T @ y
            bound = -y @ b + np.sum(np.where(r > 0, r * lb, r * ub))
            assert sol.objective >= bound - 1e-8 * (1 + abs(bound))


def test_deterministic():
    rng = np.random.default_rng(8)
    c, A, b, E, f, lb, ub = random_bounded_lp(rng, n=4, m=6)
    p = LPProblem(c, A, b, E, f, lb, ub)
    s1, s2 = lp_solve(p, method="simplex"), lp_solve(p, method="simplex")
    assert s1.status == s2.status
    if s1.optimal:
        assert s1.point.tobytes() == s2.point.tobytes()
        assert s1.objective == s2.objective


def test_feasible_box_query():
    # is the point p inside [-1, 1]^2?  Fix z = p by equalities
    for p, expected in (((0.3, -1.0), True), ((1.0, 1.0), True), ((1.2, 0.0), False)):
        prob = LPProblem(np.zeros(2), eq_lhs=np.eye(2), eq_rhs=p, lb=[-1, -1], ub=[1, 1])
        assert lp_feasible(prob) is expected


def test_equality_against_bound_infeasible():
    prob = LPProblem([0.0], eq_lhs=[[1.0]], eq_rhs=[2.0], ub=[1.0])
    assert lp_feasible(prob) is False


def zonotope_h_rep(center, G):
    """Half-planes of a 2-generator zonotope in the plane, by hand: each edge
    is normal to one generator's perpendicular."""
    H, h = [], []
    for k in range(2):
        n = np.array([-G[1, k], G[0, k]])
        reach = abs(n @ G[:, 1 - k])
        H += [n, -n]
        h += [n @ center + reach, -(n @ center) + reach]
    return np.array(H), np.array(h)


def test_zonotope_membership_matches_halfplanes():
    rng = np.random.default_rng(11)
    agree = 0
    for _ in range(100):
        center = rng.normal(size=2)
        G = rng.normal(size=(2, 2))
        if abs(np.linalg.det(G)) < 0.1:
            continue
        x = center + rng.uniform(-2, 2, size=2) @ G.T
        # LP: exists p in [-1, 1]^2 with center + G p = x
        prob = LPProblem(np.zeros(2), eq_lhs=G, eq_rhs=x - center, lb=[-1, -1], ub=[1, 1])
        H, h = zonotope_h_rep(center, G)
        slack = np.min(h - H @ x)
        if abs(slack) < 1e-7:
            continue
        assert lp_feasible(prob) == (slack >= 0)
        # the vertices themselves satisfy the half-planes
        assert np.all(zonotope_vertices(center, G) @ H.T <= h + 1e-9)
        agree += 1
    assert agree > 80


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_simplex_agrees_with_highs(seed):
    rng = np.random.default_rng(seed)
    c, A, b, E, f, lb, ub = random_bounded_lp(rng)
    p = LPProblem(c, A, b, E, f, lb, ub)
    s1 = lp_solve(p, method="simplex")
    s2 = lp_solve(p, method="highs")
    assert s1.status == s2.status
    if s1.optimal:
        assert abs(s1.objective - s2.objective) <= 1e-7 * (1 + abs(s2.objective))
        assert p.violation(s1.point) <= 1e-8 * (1 + np.max(np.abs(s1.point)))
