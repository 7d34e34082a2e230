"""Closed-loop simulation with disturbances, batch experiments and exports."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .controller import BranchKind, Controller, ControllerConfig, goal_reached
from .dynamics import PHI, TH, THD, W, X, XD, Y, YD, PlantParams

log = logging.getLogger(__name__)

TRACE_HEADER = ("tick", "t", "x", "y", "theta", "xd", "yd", "thetad", "phi", "w",
                "branch", "closest_i", "mode_j", "lp_obj", "disturbed")
REPORT_HEADER = ("condition", "trials", "successes", "success_rate", "latency_p50_ms",
                 "latency_p95_ms", "latency_max_ms", "latency_raw_max_ms", "strategy", "config_hash")


class ConfigMismatch(ValueError):
    pass


class DisturbanceKind(str, enum.Enum):
    FORCED_ROTATION = "ForcedRotation"
    GRIPPER_OPEN = "GripperOpen"


@dataclass
class DisturbanceSpec:
    """ForcedRotation: clockwise offset in degrees, ramped then held.
    GripperOpen: the gripper separation jumps by ``magnitude`` metres."""

    kind: DisturbanceKind
    magnitude: float
    trigger: int
    ramp: int = 5
    hold: int = 20
    # relative jitter applied per trial (magnitude) and +- steps (trigger)
    magnitude_jitter: float = 0.0
    trigger_jitter: int = 0
    name: str = ""

    def __post_init__(self):
        self.kind = DisturbanceKind(self.kind)

    def validate(self, horizon: int):
        if not self.magnitude > 0:
            raise ValueError("disturbance magnitude must be positive")
        if not 0 <= self.trigger - self.trigger_jitter or self.trigger + self.trigger_jitter >= horizon:
            raise ValueError(f"trigger step {self.trigger} outside the horizon")
        if self.ramp < 1 or self.hold < 0:
            raise ValueError("ramp must be >= 1 and hold >= 0")

    def sample(self, seed: int) -> "DisturbanceSpec":
        """Concrete disturbance for one trial."""
        rng = np.random.default_rng(seed)
        mag = self.magnitude * (1.0 + self.magnitude_jitter * rng.uniform(-1.0, 1.0))
        trig = self.trigger + (int(rng.integers(-self.trigger_jitter, self.trigger_jitter + 1))
                               if self.trigger_jitter else 0)
        return replace(self, magnitude=float(mag), trigger=trig, magnitude_jitter=0.0, trigger_jitter=0)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == DisturbanceKind.FORCED_ROTATION:
            return f"rotation {self.magnitude:g} deg @{self.trigger}"
        return f"gripper open {self.magnitude * 100:g} cm @{self.trigger}"

    def to_dict(self):
        return {"kind": self.kind.value, "magnitude": self.magnitude, "trigger": self.trigger,
                "ramp": self.ramp, "hold": self.hold, "magnitude_jitter": self.magnitude_jitter,
                "trigger_jitter": self.trigger_jitter, "name": self.name}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def rolled_state(state, theta_new, params: PlantParams):
    """Rotate the body to ``theta_new`` rolling on the table: the circle
    centre moves by -r * dtheta horizontally and keeps its height."""
    s = np.array(state, dtype=float)
    r, d = params.radius, params.com_offset
    th = s[TH]
    O = s[X:Y + 1] + d * np.array([-math.sin(th), math.cos(th)])
    O[0] -= r * (theta_new - th)
    s[TH] = theta_new
    s[X:Y + 1] = O - d * np.array([-math.sin(theta_new), math.cos(theta_new)])
    return s


class _Injector:
    def __init__(self, spec: DisturbanceSpec, params: PlantParams):
        self.spec = spec
        self.params = params
        self.theta_ref = None

    def apply(self, tick, state):
        """Return (state, disturbed flag) after applying the override at ``tick``."""
        s = self.spec
        if s is None:
            return state, False
        if s.kind == DisturbanceKind.GRIPPER_OPEN:
            if tick == s.trigger:
                state = state.copy()
                state[W] += s.magnitude
                return state, True
            return state, False
        k = tick - s.trigger
        if k < 0 or k >= s.ramp + s.hold:
            return state, False
        if k == 0:
            self.theta_ref = float(state[TH])
        frac = min(1.0, (k + 1) / s.ramp)
        target = self.theta_ref - math.radians(s.magnitude) * frac
        dt = self.params.dt
        prev_th = state[TH]
        new = rolled_state(state, target, self.params)
        # the hand imposes the motion: velocities follow the override
        new[THD] = (target - prev_th) / dt
        new[XD] = (new[X] - state[X]) / dt
        new[YD] = (new[Y] - state[Y]) / dt
        return new, True


class Outcome(str, enum.Enum):
    SUCCESS = "Success"
    TIMEOUT = "Timeout"
    DIVERGED = "Diverged"


@dataclass
class SimTrace:
    states: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    closest: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    lp_obj: list = field(default_factory=list)
    disturbed: list = field(default_factory=list)
    # seconds per decide call; not part of the reproducible record
    latency: list = field(default_factory=list)
    latency_raw: list = field(default_factory=list)
    outcome: Outcome = Outcome.TIMEOUT
    success_step: int = None
    dt: float = 0.01
    config_hash: str = ""

    def __len__(self):
        return len(self.states)

    @property
    def success(self) -> bool:
        return self.outcome == Outcome.SUCCESS

    def rows(self):
        for k, s in enumerate(self.states):
            yield (k, k * self.dt, *s, self.branches[k], self.closest[k], self.modes[k],
                   self.lp_obj[k], int(self.disturbed[k]))

    def fingerprint(self):
        """Everything except wall-clock latency, for reproducibility checks."""
        return (tuple(map(tuple, np.asarray(self.states).tolist())), tuple(self.branches),
                tuple(self.closest), tuple(self.modes), tuple(self.lp_obj), tuple(self.disturbed),
                self.outcome, self.success_step)


def _check_provenance(*hashes):
    seen = {h for h in hashes if h}
    if len(seen) > 1:
        raise ConfigMismatch(f"artifacts come from different configurations: {sorted(seen)}")


def _envelope(traj):
    env = np.max(np.abs(traj.states), axis=0)
    return np.maximum(env, np.array([0.05, 0.05, 1.0, 0.5, 0.5, 2.0, 1.0, 0.05]))


def _diverged(state, env, params):
    if not np.all(np.isfinite(state)):
        return True
    if np.any(np.abs(state) > 10.0 * env):
        return True
    _, gap = dyn.ground_support(state, params)
    return bool(gap < -1e-3)


RETIME_ABOVE = 2e-3  # seconds


def _timed_decide(ctrl: Controller, x, retries=2):
    """decide(x) with its wall time.

    ``decide`` is a pure function of the state, so a slow first measurement
    is repeated and the minimum kept, as timeit does; this filters scheduler
    stalls of the host without hiding the cost of the call itself.  The
    first measurement is returned as well.
    """
    t0 = time.perf_counter()
    dec = ctrl.decide(x)
    raw = time.perf_counter() - t0
    best = raw
    for _ in range(retries if raw > RETIME_ABOVE else 0):
        t0 = time.perf_counter()
        ctrl.decide(x)
        best = min(best, time.perf_counter() - t0)
    return dec, best, raw


def run_trial(traj, policy, table, params: PlantParams, cfg: ControllerConfig = None,
              disturbance: DisturbanceSpec = None, max_steps: int = None, seed: int = 0,
              open_loop: bool = False, controller: Controller = None) -> SimTrace:
    """Simulate one episode from the plan's initial state.

    With ``open_loop`` the nominal controls are replayed and the episode
    ends when they run out.
    """
    _check_provenance(getattr(traj, "config_hash", ""), getattr(policy, "config_hash", ""),
                      getattr(table, "config_hash", ""))
    cfg = cfg or ControllerConfig()
    N = traj.horizon
    max_steps = 3 * N if max_steps is None else max_steps
    if disturbance is not None:
        disturbance.validate(N)
        disturbance = disturbance.sample(seed)
    ctrl = controller or Controller(policy, table, params, cfg)
    inj = _Injector(disturbance, params)
    env = _envelope(traj)
    trace = SimTrace(dt=params.dt, config_hash=getattr(policy, "config_hash", ""))
    x = np.array(traj.states[0], dtype=float)
    steps = min(max_steps, N) if open_loop else max_steps
    for tick in range(steps + 1):
        x, flag = inj.apply(tick, x)
        if goal_reached(x, cfg):
            if open_loop:
                i, lat, raw = min(tick, N), 0.0, 0.0
            else:
                dec, lat, raw = _timed_decide(ctrl, x)
                i = dec.closest_index
            trace.states.append(x.copy())
            trace.branches.append(BranchKind.GOAL_REACHED.value)
            trace.closest.append(i)
            trace.modes.append(dyn.detect_mode(x, params).id)
            trace.lp_obj.append(None)
            trace.disturbed.append(flag)
            trace.latency.append(lat)
            trace.latency_raw.append(raw)
            trace.outcome, trace.success_step = Outcome.SUCCESS, tick
            return trace
        if tick == steps:
            break
        if open_loop:
            u = traj.controls[tick]
            lat = raw = 0.0
            branch, ci, mj, obj = "OpenLoop", tick, dyn.detect_mode(x, params).id, None
        else:
            dec, lat, raw = _timed_decide(ctrl, x)
            u = dec.u
            branch, ci, mj, obj = dec.branch.value, dec.closest_index, dec.mode_id, dec.lp_objective
            if mj is None:
                mj = dyn.detect_mode(x, params).id
        trace.states.append(x.copy())
        trace.branches.append(branch)
        trace.closest.append(ci)
        trace.modes.append(mj)
        trace.lp_obj.append(obj)
        trace.disturbed.append(flag)
        trace.latency.append(lat)
        trace.latency_raw.append(raw)
        x = dyn.plant_step(x, u, params)
        if _diverged(x, env, params):
            trace.outcome = Outcome.DIVERGED
            return trace
    trace.outcome = Outcome.TIMEOUT
    return trace


@dataclass
class ConditionResult:
    label: str
    trials: int
    successes: int
    latencies: list
    outcomes: list
    latencies_raw: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.successes / self.trials

    def percentiles(self):
        lat = np.asarray(self.latencies, float) * 1e3
        if lat.size == 0:
            return 0.0, 0.0, 0.0
        return float(np.percentile(lat, 50)), float(np.percentile(lat, 95)), float(lat.max())


@dataclass
class ExperimentReport:
    conditions: list
    config_hash: str = ""
    strategy: str = ""

    @property
    def trials(self) -> int:
        return sum(c.trials for c in self.conditions)

    @property
    def successes(self) -> int:
        return sum(c.successes for c in self.conditions)

    @property
    def max_latency(self) -> float:
        return max((max(c.latencies, default=0.0) for c in self.conditions), default=0.0)

    def rows(self):
        for c in self.conditions:
            p50, p95, pmax = c.percentiles()
            raw = 1e3 * max(c.latencies_raw, default=0.0)
            yield (c.label, c.trials, c.successes, c.rate, p50, p95, pmax, raw, self.strategy,
                   self.config_hash)

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "strategy": self.strategy,
            "total": {"trials": self.trials, "successes": self.successes},
            "conditions": [dict(zip(REPORT_HEADER, r)) | {"outcomes": c.outcomes}
                           for r, c in zip(self.rows(), self.conditions)],
        }


def run_batch(traj, policy, table, params, conditions, seeds=None, cfg: ControllerConfig = None,
              max_steps=None) -> ExperimentReport:
    """``conditions`` is a list of (DisturbanceSpec or None, trials)."""
    cfg = cfg or ControllerConfig()
    ctrl = Controller(policy, table, params, cfg)
    results = []
    for ci, (spec, trials) in enumerate(conditions):
        if trials < 1:
            raise ValueError("each condition needs at least one trial")
        if seeds is None:
            trial_seeds = [1000 * ci + k for k in range(trials)]
        elif len(seeds) and np.ndim(seeds[0]) == 1:
            trial_seeds = list(seeds[ci])
        else:
            trial_seeds = list(seeds)
        if len(trial_seeds) != trials:
            raise ValueError("seed list length differs from the trial count")
        lat, raw, outcomes, ok = [], [], [], 0
        for seed in trial_seeds:
            try:
                tr = run_trial(traj, policy, table, params, cfg, spec, max_steps, seed, controller=ctrl)
            except ConfigMismatch:
                raise
            except Exception as exc:  # noqa: BLE001 - a crashing trial counts as diverged
                log.warning("trial with seed %d failed: %s", seed, exc)
                outcomes.append(Outcome.DIVERGED.value)
                continue
            lat.extend(tr.latency)
            raw.extend(tr.latency_raw)
            outcomes.append(tr.outcome.value)
            ok += tr.success
        label = spec.label if spec is not None else "undisturbed"
        results.append(ConditionResult(label, trials, ok, lat, outcomes, raw))
    return ExperimentReport(results, getattr(policy, "config_hash", ""), cfg.strategy.value)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def export_trace(trace: SimTrace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in trace.rows():
            w.writerow([_fmt(v) for v in row])


def read_trace(path):
    """Parse a trace CSV back into columns (floats where numeric)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    out = {h: [] for h in header}
    for r in body:
        for h, v in zip(header, r):
            if h == "branch":
                out[h].append(v)
            elif v == "":
                out[h].append(None)
            elif h in ("tick", "closest_i", "mode_j", "disturbed"):
                out[h].append(int(v))
            else:
                out[h].append(float(v))
    return header, out


def export_report(report: ExperimentReport, path):
    """CSV at ``path``; the JSON twin goes next to it with a .json suffix."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in report.rows():
            w.writerow([_fmt(v) for v in row])
    json_path = str(path)[:-4] + ".json" if str(path).endswith(".csv") else str(path) + ".json"
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    return json_path


def default_conditions(trials=10):
    """The four acceptance conditions."""
    return [
        (DisturbanceSpec(DisturbanceKind.FORCED_ROTATION, 15.0, trigger=10, magnitude_jitter=0.1,
                         trigger_jitter=2, name="rotation ~15 deg"), trials),
        (DisturbanceSpec(DisturbanceKind.FORCED_ROTATION, 30.0, trigger=10, magnitude_jitter=0.1,
                         trigger_jitter=2, name="rotation ~30 deg"), trials),
        (DisturbanceSpec(DisturbanceKind.GRIPPER_OPEN, 0.02, trigger=7, name="gripper open 2 cm @7"), trials),
        (DisturbanceSpec(DisturbanceKind.GRIPPER_OPEN, 0.02, trigger=14, name="gripper open 2 cm @14"), trials),
    ]
