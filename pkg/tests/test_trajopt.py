import json
import math

import numpy as np
import pytest

from contactfunnel import dynamics as dyn
from contactfunnel import trajopt as to
from contactfunnel.dynamics import F1, F2, FN, PHI, PHID, TH, W, X, Y, PlantParams

P = PlantParams()


def toy_spec(N, **kw):
    return to.TrajOptSpec(horizon=N, initial_state=to.default_initial_state(P), **kw)


def test_counts_for_one_step():
    nlp = to.transcribe(toy_spec(1), P)
    # 2 states, 1 control, 2 gaps per knot
    assert nlp.n_vars == 2 * 8 + 1 * 8 + 2 * 2 == 28
    assert nlp.n_defect == 8
    z = nlp.warm_start()
    assert z.shape == (28,)
    assert nlp.equality(z).shape == (8 + 4,)


def test_zero_horizon_rejected():
    with pytest.raises(to.SpecInvalid):
        to.transcribe(toy_spec(0), P)


def test_dt_mismatch_rejected():
    with pytest.raises(to.SpecInvalid):
        to.transcribe(toy_spec(3, dt=0.02), P)


def test_forward_simulation_has_no_defects():
    """A trajectory produced by plant_step from admissible commands satisfies
    the transcription's dynamics rows."""
    N = 6
    nlp = to.transcribe(toy_spec(N), P)
    x = nlp.spec.initial_state.copy()
    mg = P.mass * P.gravity
    states, controls = [x], []
    for t in range(N):
        u = np.zeros(8)
        u[F1] = 0.1 * t  # pressing on the flat face above the centre: no torque
        u[FN] = mg + u[F1]
        u[PHID] = 0.5
        assert np.allclose(dyn.project_command(x, u, P), u)
        x = dyn.plant_step(x, u, P)
        states.append(x)
        controls.append(u)
    X, U = np.array(states), np.array(controls)
    z = nlp.pack(X, U, nlp.gap_fun(X))
    res = nlp.equality(z)
    assert np.max(np.abs(res)) < 1e-9
    assert abs(X[-1, PHI] - X[0, PHI] - N * P.dt * 0.5) < 1e-12


def test_complementarity_row_with_touching_finger():
    nlp = to.transcribe(toy_spec(1), P)
    X = np.array([nlp.spec.initial_state] * 2)
    U = np.zeros((1, 8))
    U[0, F2] = 5.0
    G = np.zeros((2, 2))  # right gap exactly zero
    z = nlp.pack(X, U, G)
    comp = nlp.inequality(z)[-2:] * nlp.spec.eps_comp + nlp.spec.eps_comp
    assert comp[1] == 0.0
    assert comp[1] <= nlp.spec.eps_comp


def test_goal_at_initial_equilibrium_stays_put():
    x0 = to.default_initial_state(P, phi0=0.0)
    spec = to.TrajOptSpec(horizon=5, initial_state=x0, goal_angle=0.0)
    traj = to.solve_nlp(to.transcribe(spec, P))
    assert traj.diagnostics["objective"] == 0.0
    for k in (X, TH, PHI, W):
        assert np.all(traj.states[:, k] == x0[k])
    # the body may settle vertically inside the planning gap band only
    assert np.max(np.abs(traj.states[:, Y] - x0[Y])) <= 0.5 * P.contact_tol
    to.check_trajectory(traj, P)


def test_flip_plan_reaches_goal(flip):
    traj, _, _, params = flip
    th, ph = traj.states[-1, TH], traj.states[-1, PHI]
    assert abs(th - math.pi / 2) <= math.radians(2.0)
    assert abs(ph - math.pi / 2) <= math.radians(2.0)
    res = to.trajectory_residuals(traj, params)
    assert res["max_defect"] <= 1e-6
    assert res["max_complementarity"] <= params.eps_comp
    assert res["max_cone_violation"] <= 1e-9


def test_objective_is_the_resummed_angle_gap(flip):
    traj = flip[0]
    resum = sum(abs(a - b) for a, b in zip(traj.states[:, PHI].tolist(), traj.states[:, TH].tolist()))
    assert abs(traj.diagnostics["objective"] - resum) <= 1e-9 * (1 + resum)


def test_merit_history_non_increasing(flip):
    merits = flip[0].diagnostics["merit_history"]
    assert len(merits) >= 2
    assert all(b <= a for a, b in zip(merits, merits[1:]))


def test_defects_match_resimulation(flip):
    traj, _, _, params = flip
    for t in range(traj.horizon):
        d = traj.states[t + 1] - dyn.plant_step(traj.states[t], traj.controls[t], params)
        assert np.max(np.abs(d)) <= 1e-6


def test_save_load_round_trip(flip, tmp_path):
    traj, _, _, params = flip
    path = tmp_path / "t.json"
    to.save_trajectory(traj, path, params)
    back = to.load_trajectory(path, params)
    assert back.states.tobytes() == traj.states.tobytes()
    assert back.controls.tobytes() == traj.controls.tobytes()
    assert back.config_hash == traj.config_hash


def test_mismatched_horizon_rejected(flip, tmp_path):
    traj, _, _, params = flip
    path = tmp_path / "t.json"
    to.save_trajectory(traj, path, params)
    doc = json.loads(path.read_text())
    doc["n"] = traj.horizon - 1
    path.write_text(json.dumps(doc))
    with pytest.raises(to.InvariantViolation):
        to.load_trajectory(path, params)


def test_injected_defect_names_the_step(flip, tmp_path):
    traj, _, _, params = flip
    path = tmp_path / "t.json"
    to.save_trajectory(traj, path, params)
    doc = json.loads(path.read_text())
    doc["states"][38][Y] += 1e-4
    path.write_text(json.dumps(doc))
    with pytest.raises(to.InvariantViolation) as err:
        to.load_trajectory(path, params)
    assert err.value.step == 37
    assert "step 37" in str(err.value)


def test_garbage_file_is_a_parse_error(tmp_path):
    path = tmp_path / "t.json"
    path.write_text("{not json")
    with pytest.raises(to.ParseError):
        to.load_trajectory(path, P)
