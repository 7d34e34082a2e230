"""Polytopic funnel synthesis along the nominal linearisation.

Each funnel slice is a zonotope Y_i = x_i + G_i [-1, 1]^n with an affine law
u_i(x) = u_i + theta_i p(x).  All G_i and theta_i come from one sparse LP:
the recursion G_{i+1} = A_i G_i + B_i theta_i enters as equalities, the
containment of each slice (jointly with its induced input set) in the
linearised constraint cell is written with support functions and
absolute-value epigraph variables, and the sum of diagonals is maximised.

We parametrise G_i = D S_i with a fixed diagonal scaling D, keep the diagonal
of every S_i above a small floor and check the smallest singular value of
each G_i after the solve.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.stats import qmc

from . import dynamics as dyn
from .dynamics import PHI, TH, W, PlantParams
from .lp_core import LPProblem, LPStatus, lp_solve
from .pwa import HPolytope, PWATable, linearize_constraints

log = logging.getLogger(__name__)

NX = dyn.N_STATE
NU = dyn.N_CONTROL
SIGMA_MIN = 1e-6
# default generator scaling: metres, radians, m/s, rad/s
DEFAULT_SCALE = (0.01, 1e-4, 0.05, 0.01, 0.01, 0.05, 0.01, 1e-4)
# weighted column diagonal dominance  w_j G_jj - sum_{r != j} w_r |G_rj| >= w_j m_j.
# Positions carry a smaller weight than velocities (units of seconds): a
# velocity generator necessarily drifts into its position entry by dt per step.
DOMINANCE_WEIGHTS = (0.3, 0.3, 0.3, 1.0, 1.0, 1.0, 1.0, 1.0)
DOMINANCE_MARGIN = (1e-4, 1e-5, 1e-3, 1e-3, 1e-5, 1e-3, 1e-3, 1e-5)


class SynthesisInfeasible(RuntimeError):
    def __init__(self, message, family=None, step=None):
        super().__init__(message)
        self.family = family
        self.step = step


class RankDeficient(RuntimeError):
    pass


class CertificationFailed(RuntimeError):
    def __init__(self, message, step=None, worst=None):
        super().__init__(message)
        self.step = step
        self.worst = worst


def zonotope_in_hpolytope(center, G, poly: HPolytope, tol=1e-9) -> bool:
    """Exact containment test of  center + G [-1,1]^k  in  {z : H z <= h}."""
    return bool(np.all(support_margin(center, G, poly) >= -tol))


def support_margin(center, G, poly: HPolytope):
    """h - (H center + sum |H G|) per row; non-negative rows are satisfied."""
    H = poly.H
    G = np.atleast_2d(np.asarray(G, float))
    return poly.h - (H @ np.asarray(center, float) + np.abs(H @ G).sum(axis=1))


@dataclass
class FunnelOptions:
    scale: tuple = DEFAULT_SCALE
    shrink: float = 0.9  # fraction of each constraint's nominal slack the funnel may use
    dominance_weights: tuple = DOMINANCE_WEIGHTS
    dominance_margin: tuple = DOMINANCE_MARGIN
    offdiag_weight: float = 0.1
    sigma_min: float = SIGMA_MIN
    containment_tol: float = 1e-7

    def to_dict(self):
        return {"scale": list(self.scale), "shrink": self.shrink, "dominance_weights": list(self.dominance_weights),
                "dominance_margin": list(self.dominance_margin),
                "offdiag_weight": self.offdiag_weight,
                "sigma_min": self.sigma_min, "containment_tol": self.containment_tol}


@dataclass
class FunnelPolicy:
    centers: np.ndarray  # (N+1, n)
    controls: np.ndarray  # (N, m)
    G: np.ndarray  # (N+1, n, n)
    theta: np.ndarray  # (N+1, m, n); the last gain is unused and zero
    goal: HPolytope
    schedule: list = None
    config_hash: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self._inv = None

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def G_inv(self):
        if self._inv is None:
            self._inv = np.linalg.inv(self.G)
        return self._inv

    def law(self, i, p):
        return self.controls[i] + self.theta[i] @ np.asarray(p, float)

    def to_dict(self):
        return {
            "centers": self.centers.tolist(),
            "controls": self.controls.tolist(),
            "G": self.G.tolist(),
            "theta": self.theta.tolist(),
            "goal": self.goal.to_dict(),
            "schedule": None if self.schedule is None else list(map(float, self.schedule)),
            "config_hash": self.config_hash,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["centers"], float), np.array(d["controls"], float),
                   np.array(d["G"], float), np.array(d["theta"], float),
                   HPolytope.from_dict(d["goal"]), d.get("schedule"), d.get("config_hash", ""),
                   d.get("diagnostics", {}))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def recursion_residual(policy: FunnelPolicy, table: PWATable) -> float:
    A, B, _ = table.stacked(1)
    pred = A @ policy.G[:-1] + B @ policy.theta[:-1]
    return float(np.max(np.abs(policy.G[1:] - pred)))


def goal_region(goal_angle=math.pi / 2, tol=math.radians(2.0)) -> HPolytope:
    """Thickened goal: theta and phi within ``tol`` of ``goal_angle``."""
    lo = np.full(NX, -np.inf)
    hi = np.full(NX, np.inf)
    lo[[TH, PHI]] = goal_angle - tol
    hi[[TH, PHI]] = goal_angle + tol
    return HPolytope.box(lo, hi)


def default_state_bounds(params: PlantParams) -> HPolytope:
    lo = np.full(NX, -np.inf)
    hi = np.full(NX, np.inf)
    lo[[TH, PHI]] = -math.pi / 2
    hi[[TH, PHI]] = math.pi / 2
    lo[W], hi[W] = 0.0, 0.1
    return HPolytope.box(lo, hi)


class _Layout:
    """Variable offsets: S_0..S_N, Th_0..Th_{N-1}, |S| epigraph variables,
    then one block of containment auxiliaries per step."""

    def __init__(self, N, rows_per_step):
        self.N = N
        self.s0 = 0
        self.t0 = self.s0 + (N + 1) * NX * NX
        self.o0 = self.t0 + N * NU * NX
        off = self.o0 + (N + 1) * NX * NX
        self.aux = []
        for r in rows_per_step:
            self.aux.append(off)
            off += r * NX
        self.n = off

    def S(self, i):
        return self.s0 + i * NX * NX + np.arange(NX * NX).reshape(NX, NX)

    def Th(self, i):
        return self.t0 + i * NU * NX + np.arange(NU * NX).reshape(NU, NX)

    def O(self, i):
        return self.o0 + i * NX * NX + np.arange(NX * NX).reshape(NX, NX)

    def T(self, i, rows):
        return self.aux[i] + np.arange(rows * NX).reshape(rows, NX)


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []
        self.n = 0

    def add(self, rows, cols, vals, rhs):
        """Append a block; ``rows`` are local indices into ``rhs``."""
        rows = np.asarray(rows).ravel()
        self.r.append(rows + self.n)
        self.c.append(np.asarray(cols).ravel())
        self.v.append(np.broadcast_to(vals, np.shape(cols)).ravel().astype(float))
        self.b.append(np.asarray(rhs, float).ravel())
        self.n += len(self.b[-1])

    def matrix(self, n_vars):
        if not self.r:
            return sp.csr_matrix((0, n_vars)), np.zeros(0)
        return (sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
                              shape=(self.n, n_vars)), np.concatenate(self.b))


def _step_cells(traj, table, params, goal, state_bounds):
    """Constraint rows over (x, u) per step, with family names for diagnosis."""
    N = traj.horizon
    sb = HPolytope(np.hstack([state_bounds.H, np.zeros((state_bounds.H.shape[0], NU))]), state_bounds.h)
    cells = []
    for i in range(N + 1):
        fam = []
        if i < N:
            fam.append(("constraint cell", table.polytope(i, 1)))
        else:
            poly = linearize_constraints(traj, N, dyn.NOMINAL, params)
            xonly = np.all(poly.H[:, NX:] == 0, axis=1)
            fam.append(("constraint cell", HPolytope(poly.H[xonly], poly.h[xonly])))
            fam.append(("goal", HPolytope(np.hstack([goal.H, np.zeros((goal.H.shape[0], NU))]), goal.h)))
        fam.append(("state bounds", sb))
        H = np.vstack([p.H for _, p in fam])
        h = np.concatenate([p.h for _, p in fam])
        names = sum([[n] * p.H.shape[0] for n, p in fam], [])
        cells.append((H, h, names))
    return cells


def synthesize(table: PWATable, traj, goal: HPolytope, state_bounds: HPolytope, params: PlantParams,
               opts: FunnelOptions = None) -> FunnelPolicy:
    opts = opts or FunnelOptions()
    N = traj.horizon
    if table.horizon != N:
        raise ValueError("PWA table and trajectory have different horizons")
    D = np.asarray(opts.scale, float)
    A, B, _ = table.stacked(1)
    X, U = traj.states, traj.controls
    cells = _step_cells(traj, table, params, goal, state_bounds)

    # the nominal point itself must satisfy every row
    for i, (H, h, names) in enumerate(cells):
        z = np.concatenate([X[i], U[i] if i < N else np.zeros(NU)])
        slack = h - H @ z
        if np.any(slack < -1e-9):
            k = int(np.argmin(slack))
            raise SynthesisInfeasible(f"nominal point violates {names[k]} at step {i}", names[k], i)
    lay = _Layout(N, [c[0].shape[0] for c in cells])
    eq, ineq = _Rows(), _Rows()
    idx = np.arange(NX)

    # recursion, scaled per output row by 1/D_r:
    # S_{i+1}[r,c] - sum_q A[r,q] D_q / D_r S_i[q,c] - sum_q B[r,q] / D_r Th_i[q,c] = 0
    for i in range(N):
        S1, S0, Th = lay.S(i + 1), lay.S(i), lay.Th(i)
        rr = np.arange(NX * NX).reshape(NX, NX)  # row id (r, c)
        Ai = A[i] * D[None, :] / D[:, None]
        Bi = B[i] / D[:, None]
        rows = [rr, np.broadcast_to(rr[:, :, None], (NX, NX, NX)), np.broadcast_to(rr[:, :, None], (NX, NX, NU))]
        cols = [S1, np.broadcast_to(S0.T[None, :, :], (NX, NX, NX)), np.broadcast_to(Th.T[None, :, :], (NX, NX, NU))]
        # S0.T[c, q] = index of S_i[q, c]
        vals = [np.ones((NX, NX)), np.broadcast_to(-Ai[:, None, :], (NX, NX, NX)),
                np.broadcast_to(-Bi[:, None, :], (NX, NX, NU))]
        eq_r = np.concatenate([x.ravel() for x in rows])
        eq_c = np.concatenate([x.ravel() for x in cols])
        eq_v = np.concatenate([x.ravel() for x in vals])
        keep = eq_v != 0
        eq.r.append(eq_r[keep] + eq.n)
        eq.c.append(eq_c[keep])
        eq.v.append(eq_v[keep])
        eq.b.append(np.zeros(NX * NX))
        eq.n += NX * NX

    # O >= |S| entrywise; the off-diagonal part is lightly penalised so the
    # generators stay close to axis aligned, and it carries the dominance rows
    wd = np.asarray(opts.dominance_weights, float) * D
    rho = np.asarray(opts.dominance_weights, float) * np.asarray(opts.dominance_margin, float)
    off_mask = ~np.eye(NX, dtype=bool)
    for i in range(N + 1):
        S, O = lay.S(i), lay.O(i)
        k = np.arange(NX * NX)
        for sign in (1.0, -1.0):
            ineq.add(np.stack([k, k], 1), np.stack([S.ravel(), O.ravel()], 1), np.array([sign, -1.0]),
                     np.zeros(k.size))
        # -w_j D_j S_jj + sum_{r != j} w_r D_r O_rj <= -rho_j
        cols = np.concatenate([S[idx, idx][:, None], O.T], axis=1)
        vals = np.concatenate([-wd[:, None], np.where(off_mask.T, wd[None, :], 0.0)], axis=1)
        ineq.add(np.broadcast_to(idx[:, None], cols.shape), cols, vals, -rho)

    # support-function containment of (x_i + G_i p, u_i + theta_i p)
    for i, (H, h, names) in enumerate(cells):
        R = H.shape[0]
        z = np.concatenate([X[i], U[i] if i < N else np.zeros(NU)])
        budget = opts.shrink * (h - H @ z)
        Hx = H[:, :NX] * D[None, :]  # acts on S_i
        Hu = H[:, NX:] if i < N else np.zeros((R, NU))
        # unit row scaling keeps the LP well conditioned
        rs = 1.0 / np.maximum(np.max(np.abs(np.hstack([Hx, Hu])), axis=1), 1e-300)
        Hx, Hu, budget = Hx * rs[:, None], Hu * rs[:, None], budget * rs
        T = lay.T(i, R)
        S = lay.S(i)
        for sign in (1.0, -1.0):
            # sign * (Hx S[:, c] + Hu Th[:, c]) - T[k, c] <= 0
            rows = np.arange(R * NX).reshape(R, NX)
            cols_s = np.broadcast_to(S.T[None, :, :], (R, NX, NX))  # [k, c, q] -> S[q, c]
            vals_s = np.broadcast_to(sign * Hx[:, None, :], (R, NX, NX))
            r_all = [np.broadcast_to(rows[:, :, None], (R, NX, NX)), rows]
            c_all = [cols_s, T]
            v_all = [vals_s, -np.ones((R, NX))]
            if i < N:
                Th = lay.Th(i)
                r_all.append(np.broadcast_to(rows[:, :, None], (R, NX, NU)))
                c_all.append(np.broadcast_to(Th.T[None, :, :], (R, NX, NU)))
                v_all.append(np.broadcast_to(sign * Hu[:, None, :], (R, NX, NU)))
            rr = np.concatenate([x.ravel() for x in r_all])
            cc = np.concatenate([x.ravel() for x in c_all])
            vv = np.concatenate([np.asarray(x, float).ravel() for x in v_all])
            keep = vv != 0
            ineq.r.append(rr[keep] + ineq.n)
            ineq.c.append(cc[keep])
            ineq.v.append(vv[keep])
            ineq.b.append(np.zeros(R * NX))
            ineq.n += R * NX
        ineq.add(np.broadcast_to(np.arange(R)[:, None], (R, NX)), T, 1.0, budget)

    n = lay.n
    cost = np.zeros(n)
    for i in range(N + 1):
        cost[lay.S(i)[idx, idx]] = -1.0
        cost[lay.O(i)[~np.eye(NX, dtype=bool)]] = opts.offdiag_weight
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for i in range(N + 1):
        ub[lay.S(i)[idx, idx]] = 1.0
    lb[lay.o0:] = 0.0
    ub[lay.o0:lay.o0 + (N + 1) * NX * NX] = 1.0
    Ae, be = eq.matrix(n)
    Ai_, bi = ineq.matrix(n)
    log.debug("funnel LP: %d variables, %d equalities, %d inequalities", n, Ae.shape[0], Ai_.shape[0])
    sol = lp_solve(LPProblem(cost, Ai_, bi, Ae, be, lb, ub), method="highs-ipm")
    if sol.status != LPStatus.OPTIMAL:
        raise SynthesisInfeasible(f"funnel LP {sol.status.value}", family="funnel LP")
    zsol = sol.point

    theta = np.zeros((N + 1, NU, NX))
    for i in range(N):
        theta[i] = zsol[lay.Th(i)]
    G = np.zeros((N + 1, NX, NX))
    G[0] = D[:, None] * zsol[lay.S(0)]
    # propagate the recursion exactly so it holds to round-off
    for i in range(N):
        G[i + 1] = A[i] @ G[i] + B[i] @ theta[i]
    policy = FunnelPolicy(X.copy(), U.copy(), G, theta, goal)
    _certify(policy, cells, opts)
    policy.diagnostics.update(
        lp_objective=float(-sol.objective),
        recursion_residual=recursion_residual(policy, table),
        sigma_min=float(min(np.linalg.svd(g, compute_uv=False)[-1] for g in G)),
        lp_size=[int(n), int(Ae.shape[0]), int(Ai_.shape[0])],
    )
    return policy


def _certify(policy: FunnelPolicy, cells, opts: FunnelOptions):
    N = policy.horizon
    for i, (H, h, names) in enumerate(cells):
        center = np.concatenate([policy.centers[i], policy.controls[i] if i < N else np.zeros(NU)])
        gens = np.vstack([policy.G[i], policy.theta[i]])
        m = support_margin(center, gens, HPolytope(H, h))
        if np.any(m < -opts.containment_tol):
            k = int(np.argmin(m))
            raise SynthesisInfeasible(f"{names[k]} containment fails at step {i} by {-m[k]:.2e}",
                                      names[k], i)
    for i, g in enumerate(policy.G):
        s = np.linalg.svd(g, compute_uv=False)[-1]
        if s < opts.sigma_min:
            raise RankDeficient(f"G_{i} has smallest singular value {s:.2e}")


def membership(policy: FunnelPolicy, i: int, x, tol=1e-9):
    """The coordinate p with x = x_i + G_i p when it lies in [-1, 1]^n, else None."""
    s = np.linalg.svd(policy.G[i], compute_uv=False)[-1]
    if s < SIGMA_MIN:
        raise RankDeficient(f"G_{i} is numerically singular")
    p = policy.G_inv[i] @ (np.asarray(x, float) - policy.centers[i])
    return p if np.max(np.abs(p)) <= 1.0 + tol else None


@dataclass
class ShrinkSchedule:
    a: np.ndarray
    samples: int
    failures: list  # per step: samples rejected at a_{i+1} (before shrinking)
    margins: list  # per step: worst normalised image radius at the accepted a_i

    def to_dict(self):
        return {"a": self.a.tolist(), "samples": self.samples, "failures": self.failures,
                "margins": self.margins}


def _sample_cube(n, K, seed):
    pts = qmc.Sobol(d=n, scramble=True, seed=seed).random(K)
    verts = np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
    return np.vstack([2.0 * pts - 1.0, verts])


def verify_prop1(policy: FunnelPolicy, params: PlantParams, samples=4096, seed=0, plant=None,
                 tol=1e-3, a_floor=1e-3) -> ShrinkSchedule:
    """Empirical shrink schedule: backward bisection on the cube half-widths.

    The bisection stops once the bracket is below ``tol`` relative to
    a_{i+1}, so small half-widths are resolved as finely as large ones.

    ``plant(X, U, i)`` maps stacked states and controls to successors; it
    defaults to the simulation plant.
    """
    if plant is None:
        def plant(Xs, Us, i):
            return dyn.plant_step(Xs, Us, params)
    N = policy.horizon
    P = _sample_cube(NX, samples, seed)
    a = np.ones(N + 1)
    failures, margins = [0] * N, [0.0] * N

    def image_radius(i, ai):
        Xs = policy.centers[i] + (ai * P) @ policy.G[i].T
        Us = policy.controls[i] + (ai * P) @ policy.theta[i].T
        nxt = plant(Xs, Us, i)
        q = (nxt - policy.centers[i + 1]) @ policy.G_inv[i + 1].T
        return np.max(np.abs(q), axis=1)

    for i in range(N - 1, -1, -1):
        target = a[i + 1] * (1.0 + 1e-9)
        rad = image_radius(i, a[i + 1])
        failures[i] = int(np.sum(rad > target))
        if failures[i] == 0:
            a[i] = a[i + 1]
            margins[i] = float(rad.max() / a[i + 1])
            continue
        lo, hi = 0.0, a[i + 1]
        while hi - lo > tol * a[i + 1]:
            mid = 0.5 * (lo + hi)
            if np.all(image_radius(i, mid) <= target):
                lo = mid
            else:
                hi = mid
        if lo < a_floor:
            worst = int(np.argmax(image_radius(i, max(hi, a_floor))))
            raise CertificationFailed(f"no cube half-width >= {a_floor} certifies step {i}",
                                      step=i, worst=(P[worst] * max(hi, a_floor)).tolist())
        a[i] = lo
        margins[i] = float(image_radius(i, lo).max() / a[i + 1])
    return ShrinkSchedule(a, len(P), failures, margins)


def recheck_schedule(policy: FunnelPolicy, schedule: ShrinkSchedule, params: PlantParams, samples=4096,
                     seed=0) -> bool:
    """Independent check of the certificate with per-point membership calls."""
    P = _sample_cube(NX, samples, seed)
    for i in range(policy.horizon):
        ai = schedule.a[i]
        for p in P[:: max(1, len(P) // 64)]:
            x = policy.centers[i] + policy.G[i] @ (ai * p)
            u = policy.law(i, ai * p)
            nxt = dyn.plant_step(x, u, params)
            q = np.linalg.solve(policy.G[i + 1], nxt - policy.centers[i + 1])
            if np.max(np.abs(q)) > schedule.a[i + 1] * (1.0 + 1e-9) + 1e-12:
                return False
    return True
