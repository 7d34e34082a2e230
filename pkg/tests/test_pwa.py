import numpy as np
import pytest

from contactfunnel import dynamics as dyn
from contactfunnel import pwa
from contactfunnel.dynamics import F2, F2T, FN, FT, PHI, PHID, W, WD
from contactfunnel.pwa import HPolytope, PWATable

# perturbation directions in natural units: metres, radians, newtons
STATE_SCALE = np.array([1e-3, 1e-3, 1e-2, 1e-2, 1e-2, 1e-1, 1e-2, 1e-3])
INPUT_SCALE = np.array([1e-2] * 6 + [1e-1, 1e-2])


def richardson_ratio(x, u, mode, params, h):
    A1, B1 = pwa.fd_jacobians(x, u, mode, params, h)
    A2, B2 = pwa.fd_jacobians(x, u, mode, params, h / 2)
    A3, B3 = pwa.fd_jacobians(x, u, mode, params, h / 4)
    J1, J2, J3 = (np.hstack(m) for m in ((A1, B1), (A2, B2), (A3, B3)))
    return np.linalg.norm(J1 - J2) / np.linalg.norm(J2 - J3)


def test_expansion_point_exactness(flip):
    traj, table, _, params = flip
    for i in range(0, traj.horizon, 7):
        d = table.dynamics(i, 1)
        x, u = traj.states[i], traj.controls[i]
        assert np.max(np.abs(d(x, u) - dyn.integrate(x, u, params))) <= 1e-10
        assert np.max(np.abs(d(x, u) - traj.states[i + 1])) <= 1e-6


def test_kinematic_input_columns(flip):
    traj, table, _, params = flip
    for i in (0, 50, 99):
        for j in (1, 2):
            B = table.dynamics(i, j).B
            assert abs(B[PHI, PHID] - params.dt) < 1e-12 and abs(B[W, WD] - params.dt) < 1e-12
            others = [k for k in range(8) if k not in (PHI, W)]
            assert np.all(B[others][:, [PHID, WD]] == 0.0)
            # the gripper rows see no force
            assert np.all(B[[PHI, W], :6] == 0.0)


def test_inactive_contact_columns_zero(flip):
    _, table, _, _ = flip
    for i in range(table.horizon):
        B = table.dynamics(i, 2).B
        assert np.all(B[:, [F2, F2T]] == 0.0)
        assert np.any(table.dynamics(i, 1).B[:, F2] != 0.0)


@pytest.mark.parametrize("i", [0, 40, 90])
def test_richardson_order(flip, i):
    traj, _, _, params = flip
    x, u = traj.states[i], traj.controls[i]
    # central differences: halving the step quarters the error
    ratio = richardson_ratio(x, u, dyn.NOMINAL, params, 2e-3)
    assert 3.5 < ratio < 4.5


def test_friction_row_verbatim(flip):
    traj, _, _, params = flip
    assert params.mu_ground == 0.3
    poly = pwa.linearize_constraints(traj, 10, dyn.NOMINAL, params)
    want = np.zeros(16)
    want[8 + FT] = 1.0
    want[8 + FN] = -0.3
    hits = [k for k in range(len(poly.h)) if np.array_equal(poly.H[k], want) and poly.h[k] == 0.0]
    assert len(hits) == 1


def test_nominal_points_inside_their_cells(flip):
    traj, table, _, _ = flip
    for i in range(traj.horizon):
        z = np.concatenate([traj.states[i], traj.controls[i]])
        assert table.polytope(i, 1).contains(z)


def test_open_finger_violates_active_contact_row(flip):
    traj, table, _, params = flip
    i = 30
    x = traj.states[i].copy()
    x[W] += 2 * params.contact_tol
    assert dyn.contact_geometry(x, params).gap_right > params.contact_tol
    z = np.concatenate([x, traj.controls[i]])
    assert not table.polytope(i, 1).contains(z)
    u2 = traj.controls[i].copy()
    u2[[F2, F2T]] = 0.0
    assert table.polytope(i, 2).contains(np.concatenate([x, u2]))


def test_table_shape_and_definition(flip):
    traj, table, _, params = flip
    assert len(table) == 200
    for i in (0, 33, 99):
        ref = pwa.linearize_mode(traj, i, dyn.NOMINAL, params)
        d = table.dynamics(i, 1)
        assert d.A.tobytes() == ref.A.tobytes()
        assert d.B.tobytes() == ref.B.tobytes()
        assert d.c.tobytes() == ref.c.tobytes()


def test_serialization_round_trip(flip, tmp_path):
    _, table, _, _ = flip
    path = tmp_path / "pwa.json"
    table.save(path)
    back = PWATable.load(path)
    assert back.config_hash == table.config_hash
    assert set(back.cells) == set(table.cells)
    for key, (d, poly) in table.cells.items():
        d2, poly2 = back.cells[key]
        for a, b in ((d.A, d2.A), (d.B, d2.B), (d.c, d2.c), (poly.H, poly2.H), (poly.h, poly2.h)):
            assert a.tobytes() == b.tobytes()


def test_one_step_error_is_second_order(flip):
    traj, table, _, params = flip
    rng = np.random.default_rng(4)
    for i in (5, 50, 95):
        direction = np.concatenate([STATE_SCALE, INPUT_SCALE]) * rng.choice([-1.0, 1.0], size=16)
        slope, errs = pwa.error_slope(table, traj, params, i, direction)
        assert slope >= 1.8
        assert np.all(np.diff(errs) > 0)


def test_polytope_box_and_validation():
    box = HPolytope.box([-1, -1], [1, 1])
    assert box.contains([0.5, -1.0]) and not box.contains([1.1, 0])
    with pytest.raises(ValueError):
        HPolytope(np.eye(2), [1.0])
