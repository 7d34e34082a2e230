import dataclasses
import json
import math

import numpy as np
import pytest

from contactfunnel import dynamics as dyn
from contactfunnel import harness as hs
from contactfunnel.controller import Controller, ControllerConfig, goal_reached
from contactfunnel.dynamics import TH, W, PlantParams
from contactfunnel.harness import DisturbanceKind, DisturbanceSpec

ROT15 = DisturbanceSpec(DisturbanceKind.FORCED_ROTATION, 15.0, 10, magnitude_jitter=0.1, trigger_jitter=2)
OPEN7 = DisturbanceSpec(DisturbanceKind.GRIPPER_OPEN, 0.02, 7)


def decided(flip, x):
    _, table, policy, params = flip
    return Controller(policy, table, params).decide(x).u


@pytest.fixture(scope="module")
def undisturbed(flip):
    traj, table, policy, params = flip
    return hs.run_trial(traj, policy, table, params)


def test_trace_header_bytes(undisturbed, tmp_path):
    path = tmp_path / "trace.csv"
    hs.export_trace(undisturbed, path)
    first = path.read_bytes().split(b"\n", 1)[0]
    assert first == b"tick,t,x,y,theta,xd,yd,thetad,phi,w,branch,closest_i,mode_j,lp_obj,disturbed"


def test_export_then_parse_round_trip(undisturbed, tmp_path):
    path = tmp_path / "trace.csv"
    hs.export_trace(undisturbed, path)
    header, cols = hs.read_trace(path)
    assert tuple(header) == hs.TRACE_HEADER
    states = np.column_stack([cols[h] for h in hs.TRACE_HEADER[2:10]])
    assert states.tobytes() == np.asarray(undisturbed.states).tobytes()
    assert cols["branch"] == undisturbed.branches
    assert cols["closest_i"] == undisturbed.closest
    assert cols["mode_j"] == undisturbed.modes
    assert cols["lp_obj"] == undisturbed.lp_obj
    # byte-identical output for the same trace
    again = tmp_path / "again.csv"
    hs.export_trace(undisturbed, again)
    assert again.read_bytes() == path.read_bytes()


def test_lp_objective_blank_exactly_on_lp_free_ticks(flip, tmp_path):
    traj, table, policy, params = flip
    trace = hs.run_trial(traj, policy, table, params, disturbance=ROT15, seed=3)
    path = tmp_path / "rot.csv"
    hs.export_trace(trace, path)
    _, cols = hs.read_trace(path)
    kinds = set()
    for branch, obj in zip(cols["branch"], cols["lp_obj"]):
        kinds.add(branch)
        assert (obj is None) == (branch in ("FunnelLaw", "GoalReached", "Fallback"))
    assert {"FunnelLaw", "TrackPolytope", "GoalReached"} <= kinds


def test_success_ends_in_goal(undisturbed):
    assert undisturbed.success
    assert goal_reached(undisturbed.states[-1], ControllerConfig())
    assert undisturbed.branches[-1] == "GoalReached"


def test_trial_reproducible(flip):
    traj, table, policy, params = flip
    a = hs.run_trial(traj, policy, table, params, disturbance=ROT15, seed=11)
    b = hs.run_trial(traj, policy, table, params, disturbance=ROT15, seed=11)
    assert a.fingerprint() == b.fingerprint()


def test_gripper_open_jumps_at_trigger(flip):
    traj, table, policy, params = flip
    trace = hs.run_trial(traj, policy, table, params, disturbance=OPEN7)
    assert trace.disturbed.index(True) == 7 and sum(trace.disturbed) == 1
    # the recorded state at tick 7 already carries the opening
    before = dyn.plant_step(trace.states[6], decided(flip, trace.states[6]), params)
    assert abs(trace.states[7][W] - before[W] - 0.02) < 1e-12


def test_rotation_ramp_and_hold(flip):
    traj, table, policy, params = flip
    spec = DisturbanceSpec(DisturbanceKind.FORCED_ROTATION, 20.0, 10, ramp=5, hold=3)
    trace = hs.run_trial(traj, policy, table, params, disturbance=spec)
    th = np.asarray(trace.states)[:, TH]
    # the override starts from the state arriving at the trigger tick
    start = dyn.plant_step(trace.states[9], decided(flip, trace.states[9]), params)[TH]
    assert trace.disturbed[10:18] == [True] * 8 and not trace.disturbed[9] and not trace.disturbed[18]
    for k in range(5):
        assert abs(th[10 + k] - (start - math.radians(20.0) * (k + 1) / 5)) < 1e-12
    for k in range(5, 8):
        assert abs(th[10 + k] - (start - math.radians(20.0))) < 1e-12


def test_rolled_state_keeps_contact():
    p = PlantParams()
    s = dyn.rest_state(p, theta=0.3)
    r = hs.rolled_state(s, -0.2, p)
    g0, g1 = dyn.contact_geometry(s, p), dyn.contact_geometry(r, p)
    assert abs(g1.center[1] - g0.center[1]) < 1e-15
    assert abs(g1.center[0] - (g0.center[0] + p.radius * 0.5)) < 1e-15
    assert abs(g1.gap_ground - g0.gap_ground) < 1e-15


def test_disturbance_sampling():
    a, b = ROT15.sample(5), ROT15.sample(5)
    assert a == b
    assert 13.5 <= a.magnitude <= 16.5 and 8 <= a.trigger <= 12
    assert a.magnitude_jitter == 0 and a.trigger_jitter == 0
    with pytest.raises(ValueError):
        DisturbanceSpec(DisturbanceKind.GRIPPER_OPEN, 0.02, 200).validate(100)
    with pytest.raises(ValueError):
        DisturbanceSpec(DisturbanceKind.GRIPPER_OPEN, -0.02, 7).validate(100)
    spec = DisturbanceSpec.from_dict(json.loads(json.dumps(ROT15.to_dict())))
    assert spec == ROT15


def test_zero_trials_rejected(flip):
    traj, table, policy, params = flip
    with pytest.raises(ValueError):
        hs.run_batch(traj, policy, table, params, [(ROT15, 0)])


def test_seed_permutation_keeps_rates(flip):
    traj, table, policy, params = flip
    seeds = [4, 9, 16, 25]
    r1 = hs.run_batch(traj, policy, table, params, [(ROT15, 4)], [seeds])
    r2 = hs.run_batch(traj, policy, table, params, [(ROT15, 4)], [seeds[::-1]])
    assert r1.conditions[0].outcomes == r2.conditions[0].outcomes[::-1]
    assert r1.successes == r2.successes
    assert list(r1.rows())[0][:4] == list(r2.rows())[0][:4]


def test_report_export(flip, tmp_path):
    traj, table, policy, params = flip
    rep = hs.run_batch(traj, policy, table, params, [(None, 1), (OPEN7, 2)], [[0], [1, 2]])
    path = tmp_path / "report.csv"
    jpath = hs.export_report(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(hs.REPORT_HEADER)
    assert len(lines) == 3
    doc = json.loads(open(jpath).read())
    assert doc["total"] == {"trials": 3, "successes": rep.successes}
    assert doc["conditions"][1]["trials"] == 2
    assert doc["strategy"] == "FunnelTrack"


def test_provenance_mismatch(flip):
    traj, table, policy, params = flip
    other = dataclasses.replace(traj, config_hash="0" * 64)
    with pytest.raises(hs.ConfigMismatch):
        hs.run_trial(other, policy, table, params)
    with pytest.raises(hs.ConfigMismatch):
        hs.run_batch(other, policy, table, params, [(None, 1)])
