import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contactfunnel import funnel as fn
from contactfunnel.pwa import AffineDynamics, HPolytope, PWATable
from oracles import zonotope_contained_by_vertices

BOX2 = HPolytope.box([-1.0, -1.0], [1.0, 1.0])


def rotation(a):
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def test_small_square_inside_box():
    assert fn.zonotope_in_hpolytope(np.zeros(2), 0.5 * np.eye(2), BOX2)


def test_large_square_not_inside_box():
    assert not fn.zonotope_in_hpolytope(np.zeros(2), 1.2 * np.eye(2), BOX2)


def test_rotated_zonotopes_match_vertex_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(500):
        G = rotation(rng.uniform(0, np.pi)) @ np.diag(rng.uniform(0.05, 0.9, size=2))
        c = rng.uniform(-0.5, 0.5, size=2)
        H = rng.normal(size=(int(rng.integers(3, 7)), 2))
        h = rng.uniform(0.2, 1.5, size=H.shape[0])
        poly = HPolytope(H, h)
        margin = np.min(fn.support_margin(c, G, poly))
        if abs(margin) < 1e-9:
            continue
        assert fn.zonotope_in_hpolytope(c, G, poly) == zonotope_contained_by_vertices(c, G, H, h)
        checked += 1
    assert checked > 450


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_containment_agrees_with_vertices_up_to_three_generators(k, seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(2, k)) * 0.4
    c = rng.normal(size=2) * 0.3
    H = rng.normal(size=(4, 2))
    h = rng.uniform(0.1, 1.0, size=4)
    poly = HPolytope(H, h)
    if abs(np.min(fn.support_margin(c, G, poly))) < 1e-9:
        return
    assert fn.zonotope_in_hpolytope(c, G, poly) == zonotope_contained_by_vertices(c, G, H, h)


def identity_chain(N=2, n=8):
    """A = I, B = I, c = 0 with G_i = I and theta_i = 0."""
    cells = {}
    for i in range(N):
        d = AffineDynamics(np.eye(n), np.eye(n), np.zeros(n), i, 1, 0.01)
        cells[(i, 1)] = (d, HPolytope.box(-np.ones(2 * n), np.ones(2 * n)))
    table = PWATable(cells, N, 1, 0.01)
    goal = HPolytope.box(-np.ones(n), np.ones(n))
    policy = fn.FunnelPolicy(np.zeros((N + 1, n)), np.zeros((N, n)), np.stack([np.eye(n)] * (N + 1)),
                             np.zeros((N + 1, n, n)), goal)
    return table, policy


def test_identity_chain_is_admissible():
    table, policy = identity_chain()
    assert fn.recursion_residual(policy, table) == 0.0
    assert fn.zonotope_in_hpolytope(policy.centers[-1], policy.G[-1], policy.goal)


def test_linear_plant_schedule_is_all_ones():
    table, policy = identity_chain(N=4)

    def plant(X, U, i):
        return table.dynamics(i, 1).apply(X, U)

    sched = fn.verify_prop1(policy, None, samples=256, plant=plant)
    assert np.all(sched.a == 1.0)


def test_membership_examples(flip):
    _, _, policy, _ = flip
    i = 17
    p0 = fn.membership(policy, i, policy.centers[i])
    assert np.allclose(p0, 0.0, atol=1e-12)
    corner = policy.centers[i] + policy.G[i] @ np.ones(8)
    assert np.allclose(fn.membership(policy, i, corner), 1.0, atol=1e-9)
    p = np.full(8, 0.2)
    p[3] = 1.5
    assert fn.membership(policy, i, policy.centers[i] + policy.G[i] @ p) is None


def test_flip_policy_invariants(flip):
    _, table, policy, _ = flip
    assert fn.recursion_residual(policy, table) <= 1e-8
    sig = [np.linalg.svd(g, compute_uv=False)[-1] for g in policy.G]
    assert min(sig) >= 1e-6
    assert fn.zonotope_in_hpolytope(policy.centers[-1], policy.G[-1], policy.goal)


def test_same_p_image_on_linear_chain(flip):
    _, table, policy, _ = flip
    rng = np.random.default_rng(9)
    for _ in range(100):
        i = int(rng.integers(0, policy.horizon))
        p = rng.uniform(-1, 1, size=8)
        nxt = table.dynamics(i, 1)(policy.centers[i] + policy.G[i] @ p, policy.law(i, p))
        q = np.linalg.solve(policy.G[i + 1], nxt - policy.centers[i + 1])
        assert np.max(np.abs(q - p)) <= 1e-6


def test_linearized_plant_schedule_is_all_ones(flip):
    _, table, policy, params = flip

    def plant(X, U, i):
        return table.dynamics(i, 1).apply(X, U)

    sched = fn.verify_prop1(policy, params, samples=256, plant=plant)
    assert np.all(sched.a == 1.0)


def test_schedule_shape_and_recheck(flip):
    _, _, policy, params = flip
    a = np.asarray(policy.schedule)
    assert a.shape == (policy.horizon + 1,)
    assert a[-1] == 1.0 and a[0] >= 1e-3
    assert np.all(np.diff(a) >= 0)
    sched = fn.ShrinkSchedule(a, 4096, [], [])
    assert fn.recheck_schedule(policy, sched, params)


@pytest.mark.slow
def test_doubling_samples_does_not_raise_the_schedule(flip):
    _, _, policy, params = flip
    a1 = fn.verify_prop1(policy, params, samples=1024).a
    a2 = fn.verify_prop1(policy, params, samples=2048).a
    tol = 1e-3
    assert np.all(a2 <= a1 + tol * np.maximum(a1, 1e-3))


def test_policy_round_trip(flip, tmp_path):
    _, _, policy, _ = flip
    path = tmp_path / "policy.json"
    policy.save(path)
    back = fn.FunnelPolicy.load(path)
    assert back.G.tobytes() == policy.G.tobytes()
    assert back.theta.tobytes() == policy.theta.tobytes()
    assert back.config_hash == policy.config_hash
    assert back.schedule == policy.schedule
