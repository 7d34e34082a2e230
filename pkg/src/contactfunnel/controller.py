"""Online feedback around the nominal plan.

Each tick: stop if the execution goal is met; otherwise use the funnel law of
the latest slice that contains the state; otherwise find the closest nominal
state, detect the contact mode and solve a small tracking LP toward the next
slice (or the next nominal point).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import PHI, PHID, TH, W, WD, ContactMode, PlantParams
from .funnel import FunnelPolicy
from .lp_core import LPProblem, LPStatus, NumericalFailure, lp_solve
from .pwa import PWATable, input_rows

# nearest-state metric: positions in centimetres, angles in tens of degrees,
# velocities weighted by a tenth of their position scale
_DEG10 = 180.0 / math.pi / 10.0
DEFAULT_SCALE = np.array([100.0, 100.0, _DEG10, 10.0, 10.0, 0.1 * _DEG10, _DEG10, 100.0])
# tracking-LP cost: unit weight per state channel, velocities down-weighted
DEFAULT_ALPHA = np.array([1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 1.0, 1.0])


class Strategy(str, enum.Enum):
    FUNNEL_TRACK = "FunnelTrack"
    POINT_TRACK = "PointTrack"


class BranchKind(str, enum.Enum):
    FUNNEL_LAW = "FunnelLaw"
    TRACK_POLYTOPE = "TrackPolytope"
    TRACK_POINT = "TrackPoint"
    GOAL_REACHED = "GoalReached"
    FALLBACK = "Fallback"


class ConfigError(ValueError):
    pass


@dataclass
class ControllerConfig:
    strategy: Strategy = Strategy.FUNNEL_TRACK
    weights: np.ndarray = field(default_factory=lambda: DEFAULT_SCALE**2)  # diagonal of W
    alpha: np.ndarray = field(default_factory=lambda: DEFAULT_ALPHA.copy())
    c: float = 0.08
    tol_goal: float = math.radians(2.0)
    membership_tol: float = 1e-9
    fallback_gain: float = 20.0
    debug: bool = False

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.weights = np.asarray(self.weights, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.validate()

    def validate(self):
        if self.weights.shape != (dyn.N_STATE,) or np.any(self.weights <= 0):
            raise ConfigError("weights must be 8 positive numbers (diagonal of W)")
        if self.alpha.shape != (dyn.N_STATE,) or np.any(self.alpha < 0) or not np.any(self.alpha > 0):
            raise ConfigError("alpha must be 8 non-negative numbers, not all zero")
        if not self.c > 0:
            raise ConfigError("c must be positive")
        if not self.tol_goal > 0:
            raise ConfigError("tol_goal must be positive")

    def to_dict(self):
        return {"strategy": self.strategy.value, "weights": self.weights.tolist(),
                "alpha": self.alpha.tolist(), "c": self.c, "tol_goal": self.tol_goal,
                "membership_tol": self.membership_tol, "fallback_gain": self.fallback_gain}


@dataclass
class ControlDecision:
    u: np.ndarray
    branch: BranchKind
    closest_index: int = None
    mode_id: int = None
    target: int = None
    lp_objective: float = None

    @property
    def label(self) -> str:
        if self.branch == BranchKind.FUNNEL_LAW:
            return f"FunnelLaw({self.closest_index})"
        if self.branch in (BranchKind.TRACK_POLYTOPE, BranchKind.TRACK_POINT, BranchKind.FALLBACK):
            return f"{self.branch.value}({self.closest_index}->{self.target})"
        return self.branch.value


def goal_reached(x, cfg: ControllerConfig) -> bool:
    x = np.asarray(x, float)
    return bool(abs(x[PHI] - x[TH]) <= cfg.tol_goal and x[W] <= cfg.c)


def closest_index(x, states, weights) -> int:
    """argmin_i (x - x_i)' W (x - x_i); ties go to the largest index."""
    d = np.asarray(states) - np.asarray(x, float)
    dist = (d * d) @ np.asarray(weights, float)
    return int(np.flatnonzero(dist == dist.min())[-1])


class Controller:
    """Stateless decision rule bound to one plan, funnel and PWA table."""

    def __init__(self, policy: FunnelPolicy, table: PWATable, params: PlantParams,
                 cfg: ControllerConfig = None):
        self.policy = policy
        self.table = table
        self.params = params
        self.cfg = cfg or ControllerConfig()
        self.N = policy.horizon
        self._Ginv = policy.G_inv
        self._rows = {m.id: input_rows(m, params) for m in dyn.enumerate_modes(1)}

    # --- branches -----------------------------------------------------------
    def _funnel_member(self, x):
        """Largest i < N whose slice contains x, with its coordinate p."""
        P = np.einsum("ijk,ik->ij", self._Ginv[: self.N], x - self.policy.centers[: self.N])
        inside = np.flatnonzero(np.max(np.abs(P), axis=1) <= 1.0 + self.cfg.membership_tol)
        if inside.size == 0:
            return None, None
        i0 = int(inside[-1])
        return i0, P[i0]

    def _hold(self, x, i):
        u = np.array(self.policy.controls[min(i, self.N - 1)], dtype=float)
        u[PHID] = 0.0
        u[WD] = 0.0
        return u

    def tracking_lp(self, x, i, mode: ContactMode, v, strategy: Strategy) -> LPProblem:
        """LP (u, [p], gamma):  min alpha.gamma  s.t. |target - h_ij(x, u)| <= gamma.

        The target is x_v + G_v p with p in the unit cube for the funnel
        variant and x_v for the point variant.
        """
        dynm = self.table.dynamics(i, mode.id)
        n, m = dyn.N_STATE, dyn.N_CONTROL
        use_p = strategy == Strategy.FUNNEL_TRACK
        k = n if use_p else 0
        nv = m + k + n
        # rows are expressed in the controller's units (sqrt of W); gamma is
        # kept in state units so the cost stays alpha.gamma
        s = np.sqrt(self.cfg.weights)
        base = s * (dynm.A @ x + dynm.c - self.policy.centers[v])
        # +(x_v + G_v p - A x - B u - c) - gamma <= 0 and the mirrored row
        blocks = []
        for sgn in (1.0, -1.0):
            row = np.zeros((n, nv))
            row[:, :m] = -sgn * s[:, None] * dynm.B
            if use_p:
                row[:, m:m + k] = sgn * s[:, None] * self.policy.G[v]
            row[:, m + k:] = -np.diag(s)
            blocks.append((row, sgn * base))
        Gu, gu = self._rows[mode.id]
        urow = np.zeros((Gu.shape[0], nv))
        urow[:, :m] = Gu
        A_in = np.vstack([blocks[0][0], blocks[1][0], urow])
        b_in = np.concatenate([blocks[0][1], blocks[1][1], gu])
        cost = np.concatenate([np.zeros(m + k), self.cfg.alpha])
        lb = np.concatenate([np.full(m, -np.inf), -np.ones(k), np.zeros(n)])
        ub = np.concatenate([np.full(m, np.inf), np.ones(k), np.full(n, np.inf)])
        return LPProblem(cost, A_in, b_in, None, None, lb, ub)

    def _fallback(self, x, i, v, mode):
        """Saturated proportional recovery on the gripper channels."""
        b = self.params.bounds
        u = self._hold(x, i)
        if not mode.right_active:
            u[dyn.F2] = u[dyn.F2T] = 0.0
        g = self.cfg.fallback_gain
        u[PHID] = np.clip(g * (self.policy.centers[v, PHI] - x[PHI]), -b.phid_max, b.phid_max)
        u[WD] = np.clip(g * (self.policy.centers[v, W] - x[W]), -b.wd_max, b.wd_max)
        return u

    # --- main entry ---------------------------------------------------------
    def decide(self, x) -> ControlDecision:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite state")
        cfg = self.cfg
        if goal_reached(x, cfg):
            i = closest_index(x, self.policy.centers, cfg.weights)
            return ControlDecision(self._hold(x, i), BranchKind.GOAL_REACHED, i)
        i0, p = self._funnel_member(x)
        if i0 is not None:
            u = self.policy.law(i0, p)
            if cfg.debug:
                nxt = self.table.dynamics(i0, 1)(x, u)
                q = self._Ginv[i0 + 1] @ (nxt - self.policy.centers[i0 + 1])
                assert np.max(np.abs(q)) <= 1.0 + 1e-6, "funnel law left the next slice"
            return ControlDecision(u, BranchKind.FUNNEL_LAW, i0, 1, i0 + 1)
        i = closest_index(x, self.policy.centers, cfg.weights)
        mode = dyn.detect_mode(x, self.params)
        v = min(i + 1, self.N)
        # at i = N the last linearisation is the nearest one available
        lp = self.tracking_lp(x, min(i, self.N - 1), mode, v, cfg.strategy)
        try:
            sol = lp_solve(lp, method="simplex")
        except NumericalFailure:
            sol = lp_solve(lp, method="highs")
        if sol.status != LPStatus.OPTIMAL:
            u = self._fallback(x, min(i, self.N - 1), v, mode)
            return ControlDecision(u, BranchKind.FALLBACK, i, mode.id, v)
        kind = BranchKind.TRACK_POLYTOPE if cfg.strategy == Strategy.FUNNEL_TRACK else BranchKind.TRACK_POINT
        u = sol.point[: dyn.N_CONTROL].copy()
        return ControlDecision(u, kind, i, mode.id, v, float(sol.objective))
