"""Direct-transcription trajectory optimisation for the flip task.

The NLP has all states, controls and the two contact-gap variables per knot as
decision variables.  It is solved with an augmented-Lagrangian outer loop
around a projected Gauss-Newton inner solver, then a force-consistency polish re-derives velocities from
the configuration path and fits the contact forces per step with a small LP,
so the returned trajectory satisfies the integration map to round-off.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import dynamics as dyn
from .dynamics import (F1, F1T, F2, F2T, FN, FT, PHI, PHID, TH, W, WD, XD, Y,
                       InputBounds, PlantParams)
from .lp_core import LPProblem, lp_solve

log = logging.getLogger(__name__)

N_GAPS = 2  # ground, right finger

_SX = np.array([0.01, 0.01, 1.0, 0.1, 0.1, 1.0, 1.0, 0.01])
_SU = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1])
_SG = 1e-3


class SpecInvalid(ValueError):
    pass


class TrajOptFailure(RuntimeError):
    """Solver failure carrying the best iterate and a residual breakdown."""

    def __init__(self, message, best=None, residuals=None):
        super().__init__(message)
        self.best = best
        self.residuals = residuals or {}


class Infeasible(TrajOptFailure):
    pass


class IterationLimit(TrajOptFailure):
    pass


class ParseError(ValueError):
    pass


class InvariantViolation(ValueError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class TrajOptSpec:
    horizon: int = 100
    dt: float = 0.01
    initial_state: np.ndarray = None
    goal_angle: float = math.pi / 2
    tol_goal: float = math.radians(2.0)
    goal_margin: float = math.radians(0.5)
    angle_max: float = math.radians(89.5)
    eps_comp: float = 1e-4
    tol_dyn: float = 1e-6
    bounds: InputBounds = field(default_factory=InputBounds)
    # fraction of the friction cone / actuator range the plan may use
    cone_margin: float = 0.85
    range_margin: float = 0.95
    # bound on the planned object spin rate (rad/s); without it the tiny
    # inertia lets the plan snap the object into alignment within a few steps
    thetad_max: float = 2.0
    # contact gaps of the nominal plan stay inside this band (fractions of contact_tol)
    gap_band: tuple = (0.05, 0.5)
    abs_smoothing: float = 1e-3
    reg_control: float = 1e-3
    reg_smooth: float = 1e-2

    def __post_init__(self):
        if isinstance(self.bounds, dict):
            self.bounds = InputBounds(**self.bounds)
        if self.initial_state is not None:
            self.initial_state = np.asarray(self.initial_state, dtype=float)

    def validate(self, params: PlantParams):
        if self.horizon < 1:
            raise SpecInvalid("horizon must be >= 1")
        if not self.eps_comp > 0 or not self.tol_goal > 0:
            raise SpecInvalid("eps_comp and tol_goal must be positive")
        if self.goal_margin >= self.tol_goal:
            raise SpecInvalid("goal_margin must be smaller than tol_goal")
        lo, hi = self.gap_band
        if not 0 <= lo < hi <= 1:
            raise SpecInvalid("gap_band must satisfy 0 <= lo < hi <= 1")
        if abs(self.dt - params.dt) > 1e-15:
            raise SpecInvalid("trajopt dt differs from plant dt")
        if self.initial_state is None or self.initial_state.shape != (8,):
            raise SpecInvalid("initial_state must have 8 entries")
        g = dyn.contact_geometry(self.initial_state, params)
        tol = params.contact_tol
        for name, gap in (("ground", g.gap_ground), ("right finger", g.gap_right)):
            if not lo * tol - 1e-12 <= gap <= hi * tol + 1e-12:
                raise SpecInvalid(f"initial {name} gap {gap:.3e} outside the planning band")

    def goal_box(self):
        lo = self.goal_angle - self.tol_goal + self.goal_margin
        hi = min(self.goal_angle + self.tol_goal - self.goal_margin, self.angle_max)
        if lo > hi:
            raise SpecInvalid("goal box is empty under angle_max")
        return lo, hi

    def to_dict(self):
        d = asdict(self)
        d["initial_state"] = None if self.initial_state is None else self.initial_state.tolist()
        d["gap_band"] = list(self.gap_band)
        return d


def default_initial_state(params: PlantParams, phi0=math.radians(60.0)):
    """Resting flat face up with the fingers tilted at ``phi0``.

    Both gaps are chosen so that the relaxed complementarity bound
    ``gap * F <= eps`` still admits a normal force above the weight; a larger
    gap would force the body to drop on the first step.
    """
    g = min(0.25 * params.contact_tol, 0.75 * params.eps_comp / (params.mass * params.gravity))
    return dyn.rest_state(params, theta=0.0, phi=phi0, ground_gap=g, right_gap=g)


@dataclass
class NominalTrajectory:
    states: np.ndarray
    controls: np.ndarray
    dt: float
    mode_id: int = 1
    diagnostics: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


def phi_theta_cost(states) -> float:
    """Sum over all knots of |phi_t - theta_t|."""
    s = np.asarray(states)
    total = 0.0
    for row in s:
        total += abs(float(row[PHI]) - float(row[TH]))
    return total


# ---------------------------------------------------------------------------
# transcription
# ---------------------------------------------------------------------------


class TranscribedNLP:
    """Decision vector z = [states (N+1)x8, controls Nx8, gaps (N+1)x2].

    Equality residuals: integration defects x_{t+1} - step(x_t, u_t) and
    gap-variable consistency.  Inequalities (<= 0): friction cones and relaxed
    complementarity gap * normal force <= eps.  Simple bounds carry the rest
    (initial state, goal box, force signs, rate limits, gap band).
    """

    def __init__(self, spec: TrajOptSpec, params: PlantParams):
        spec.validate(params)
        self.spec = spec
        self.params = params
        N = self.N = spec.horizon
        self.nx = (N + 1) * 8
        self.nu = N * 8
        self.ng = (N + 1) * N_GAPS
        self.n_vars = self.nx + self.nu + self.ng
        self.n_defect = 8 * N
        self.n_eq = self.n_defect + self.ng
        self.n_ineq = 6 * N + 2 * N
        self.scale = np.concatenate([np.tile(_SX, N + 1), np.tile(_SU, N), np.full(self.ng, _SG)])
        self._build_bounds()

    # layout -----------------------------------------------------------------
    def unpack(self, z):
        N = self.N
        X = z[: self.nx].reshape(N + 1, 8)
        U = z[self.nx : self.nx + self.nu].reshape(N, 8)
        G = z[self.nx + self.nu :].reshape(N + 1, N_GAPS)
        return X, U, G

    def pack(self, X, U, G):
        return np.concatenate([np.ravel(X), np.ravel(U), np.ravel(G)])

    def _build_bounds(self):
        spec, p = self.spec, self.params
        N = self.N
        big = 1e3
        td = spec.thetad_max
        xl = np.tile([-big, -big, -math.pi / 2, -big, -big, -td, -math.pi / 2, 0.0], (N + 1, 1))
        xu = np.tile([big, big, spec.angle_max, big, big, td, spec.angle_max, 0.1], (N + 1, 1))
        xl[0] = xu[0] = spec.initial_state
        glo, ghi = spec.goal_box()
        xl[N, [TH, PHI]] = glo
        xu[N, [TH, PHI]] = ghi
        ul, uu = spec.bounds.box()
        ul, uu = ul * spec.range_margin, uu * spec.range_margin
        UL, UU = np.tile(ul, (N, 1)), np.tile(uu, (N, 1))
        lo, hi = spec.gap_band
        GL = np.full((N + 1, N_GAPS), lo * p.contact_tol)
        GU = np.full((N + 1, N_GAPS), hi * p.contact_tol)
        g0 = dyn.contact_geometry(spec.initial_state, p)
        GL[0] = GU[0] = (g0.gap_ground, g0.gap_right)
        self.lb = self.pack(xl, UL, GL)
        self.ub = self.pack(xu, UU, GU)
        if np.any(self.lb > self.ub):
            raise SpecInvalid("inconsistent bounds in trajectory optimisation spec")

    # pieces -----------------------------------------------------------------
    def step(self, X, U):
        return dyn.integrate(X, U, self.params)

    def gap_fun(self, X):
        g = dyn.contact_geometry(X, self.params)
        return np.stack([g.gap_ground, g.gap_right], axis=-1)

    def _jacobians(self, X, U, h=1e-6):
        """Batched central differences of the step map and the gap map."""
        N = self.N
        Xt, Ut = X[:-1], U
        E = np.eye(8) * h
        xs = np.concatenate([Xt[None] + E[:, None], Xt[None] - E[:, None],
                             np.broadcast_to(Xt, (16, N, 8))], axis=0)
        us = np.concatenate([np.broadcast_to(Ut, (16, N, 8)), Ut[None] + E[:, None],
                             Ut[None] - E[:, None]], axis=0)
        out = self.step(xs, us)
        Fx = ((out[:8] - out[8:16]) / (2 * h)).transpose(1, 2, 0)  # (N, 8 out, 8 in)
        Fu = ((out[16:24] - out[24:32]) / (2 * h)).transpose(1, 2, 0)
        gx = np.concatenate([X[None] + E[:, None], X[None] - E[:, None]], axis=0)
        gv = self.gap_fun(gx)
        Gx = ((gv[:8] - gv[8:]) / (2 * h)).transpose(1, 2, 0)  # (N+1, 2, 8)
        return Fx, Fu, Gx

    def objective(self, z):
        X, U, _ = self.unpack(z)
        s = self.spec
        diff = X[:, PHI] - X[:, TH]
        eta = s.abs_smoothing
        J = np.sum(np.sqrt(diff**2 + eta**2) - eta)
        Us = U / _SU
        J += s.reg_control * np.sum(Us[:, :6] ** 2)
        J += s.reg_smooth * np.sum(np.diff(Us, axis=0) ** 2)
        return float(J)

    def objective_grad(self, z):
        X, U, _ = self.unpack(z)
        s = self.spec
        gX = np.zeros_like(X)
        gU = np.zeros_like(U)
        diff = X[:, PHI] - X[:, TH]
        dd = diff / np.sqrt(diff**2 + s.abs_smoothing**2)
        gX[:, PHI] += dd
        gX[:, TH] -= dd
        Us = U / _SU
        gU[:, :6] += 2 * s.reg_control * Us[:, :6] / _SU[:6]
        dU = np.diff(Us, axis=0)
        gs = np.zeros_like(U)
        gs[1:] += 2 * s.reg_smooth * dU
        gs[:-1] -= 2 * s.reg_smooth * dU
        gU += gs / _SU
        return self.pack(gX, gU, np.zeros((self.N + 1, N_GAPS)))

    def equality(self, z):
        X, U, G = self.unpack(z)
        dt = self.spec.dt
        defect = (X[1:] - self.step(X[:-1], U)) / (_SX * dt)
        gapres = (G - self.gap_fun(X)) / _SG
        return np.concatenate([defect.ravel(), gapres.ravel()])

    def _cone_rows(self, U):
        c = self.spec.cone_margin
        mg, mf = c * self.params.mu_ground, c * self.params.mu_finger
        return np.stack([
            U[:, FT] - mg * U[:, FN], -U[:, FT] - mg * U[:, FN],
            U[:, F1T] - mf * U[:, F1], -U[:, F1T] - mf * U[:, F1],
            U[:, F2T] - mf * U[:, F2], -U[:, F2T] - mf * U[:, F2],
        ], axis=-1)

    def inequality(self, z):
        X, U, G = self.unpack(z)
        eps = self.spec.eps_comp
        comp = np.stack([G[:-1, 0] * U[:, FN] - eps, G[:-1, 1] * U[:, F2] - eps], axis=-1) / eps
        return np.concatenate([self._cone_rows(U).ravel(), comp.ravel()])

    def constraint_vjp(self, z, y_eq, y_in, jac=None):
        """Gradient of y_eq . equality(z) + y_in . inequality(z)."""
        X, U, G = self.unpack(z)
        N, dt = self.N, self.spec.dt
        Fx, Fu, Gx = jac if jac is not None else self._jacobians(X, U)
        yd = y_eq[: self.n_defect].reshape(N, 8) / (_SX * dt)
        yg = y_eq[self.n_defect :].reshape(N + 1, N_GAPS) / _SG
        gX = np.zeros_like(X)
        gX[1:] += yd
        gX[:-1] -= np.einsum("ti,tij->tj", yd, Fx)
        gU = -np.einsum("ti,tij->tj", yd, Fu)
        gG = yg.copy()
        gX -= np.einsum("ti,tij->tj", yg, Gx)

        yc = y_in[: 6 * N].reshape(N, 6)
        c = self.spec.cone_margin
        mg, mf = c * self.params.mu_ground, c * self.params.mu_finger
        gU[:, FT] += yc[:, 0] - yc[:, 1]
        gU[:, FN] -= mg * (yc[:, 0] + yc[:, 1])
        gU[:, F1T] += yc[:, 2] - yc[:, 3]
        gU[:, F1] -= mf * (yc[:, 2] + yc[:, 3])
        gU[:, F2T] += yc[:, 4] - yc[:, 5]
        gU[:, F2] -= mf * (yc[:, 4] + yc[:, 5])
        yk = y_in[6 * N :].reshape(N, 2) / self.spec.eps_comp
        gU[:, FN] += yk[:, 0] * G[:-1, 0]
        gG[:-1, 0] += yk[:, 0] * U[:, FN]
        gU[:, F2] += yk[:, 1] * G[:-1, 1]
        gG[:-1, 1] += yk[:, 1] * U[:, F2]
        return self.pack(gX, gU, gG)

    # sparse derivatives for the Newton-type inner solver ----------------------
    def _ix(self, t, k):
        return t * 8 + k

    def _iu(self, t, k):
        return self.nx + t * 8 + k

    def _ig(self, t, k):
        return self.nx + self.nu + t * N_GAPS + k

    def jacobian_eq(self, z, jac=None):
        X, U, G = self.unpack(z)
        N, dt = self.N, self.spec.dt
        Fx, Fu, Gx = jac if jac is not None else self._jacobians(X, U)
        t = np.arange(N)[:, None, None]
        i = np.arange(8)[None, :, None]
        j = np.arange(8)[None, None, :]
        rows = np.broadcast_to(t * 8 + i, (N, 8, 8))
        sc = (1.0 / (_SX * dt))[None, :, None]
        r_all = [np.broadcast_to(t * 8 + i, (N, 8, 1)).ravel(), rows.ravel(), rows.ravel()]
        c_all = [np.broadcast_to((t + 1) * 8 + i, (N, 8, 1)).ravel(),
                 np.broadcast_to(t * 8 + j, (N, 8, 8)).ravel(),
                 np.broadcast_to(self.nx + t * 8 + j, (N, 8, 8)).ravel()]
        v_all = [np.broadcast_to(sc, (N, 8, 1)).ravel(), (-Fx * sc).ravel(), (-Fu * sc).ravel()]
        # gap consistency rows
        tg = np.arange(N + 1)[:, None, None]
        kg = np.arange(N_GAPS)[None, :, None]
        rows_g = self.n_defect + tg * N_GAPS + kg
        r_all += [np.broadcast_to(rows_g, (N + 1, N_GAPS, 1)).ravel(),
                  np.broadcast_to(rows_g, (N + 1, N_GAPS, 8)).ravel()]
        c_all += [np.broadcast_to(self.nx + self.nu + tg * N_GAPS + kg, (N + 1, N_GAPS, 1)).ravel(),
                  np.broadcast_to(tg * 8 + j, (N + 1, N_GAPS, 8)).ravel()]
        v_all += [np.full((N + 1) * N_GAPS, 1.0 / _SG), (-Gx / _SG).ravel()]
        return sp.csr_matrix((np.concatenate(v_all), (np.concatenate(r_all), np.concatenate(c_all))),
                             shape=(self.n_eq, self.n_vars))

    def jacobian_ineq(self, z):
        X, U, G = self.unpack(z)
        N = self.N
        c = self.spec.cone_margin
        mg, mf = c * self.params.mu_ground, c * self.params.mu_finger
        rows, cols, vals = [], [], []
        pattern = [((FT, 1.0), (FN, -mg)), ((FT, -1.0), (FN, -mg)),
                   ((F1T, 1.0), (F1, -mf)), ((F1T, -1.0), (F1, -mf)),
                   ((F2T, 1.0), (F2, -mf)), ((F2T, -1.0), (F2, -mf))]
        t = np.arange(N)
        for r, entries in enumerate(pattern):
            for k, v in entries:
                rows.append(t * 6 + r)
                cols.append(self.nx + t * 8 + k)
                vals.append(np.full(N, v))
        eps = self.spec.eps_comp
        base = 6 * N
        for gi, fk in ((0, FN), (1, F2)):
            rows += [base + t * 2 + gi, base + t * 2 + gi]
            cols += [self.nx + t * 8 + fk, self.nx + self.nu + t * N_GAPS + gi]
            vals += [G[:-1, gi] / eps, U[:, fk] / eps]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_ineq, self.n_vars))

    def objective_hessian(self, z):
        X, U, _ = self.unpack(z)
        s = self.spec
        N = self.N
        diff = X[:, PHI] - X[:, TH]
        h = s.abs_smoothing**2 / (diff**2 + s.abs_smoothing**2) ** 1.5
        t = np.arange(N + 1)
        ip, it = t * 8 + PHI, t * 8 + TH
        rows = [ip, it, ip, it]
        cols = [ip, it, it, ip]
        vals = [h, h, -h, -h]
        # control regularisation and smoothness (diagonal in scaled units)
        w = np.zeros(8)
        w[:6] = 2 * s.reg_control
        iu = self.nx + np.arange(N)[:, None] * 8 + np.arange(8)[None, :]
        diag = np.broadcast_to(w / _SU**2, (N, 8)).copy()
        cnt = np.full(N, 2.0)
        cnt[0] = cnt[-1] = 1.0
        if N == 1:
            cnt[:] = 0.0
        diag += 2 * s.reg_smooth * cnt[:, None] / _SU**2
        rows.append(iu.ravel())
        cols.append(iu.ravel())
        vals.append(diag.ravel())
        if N > 1:
            off = np.broadcast_to(-2 * s.reg_smooth / _SU**2, (N - 1, 8)).ravel()
            rows += [iu[:-1].ravel(), iu[1:].ravel()]
            cols += [iu[1:].ravel(), iu[:-1].ravel()]
            vals += [off, off]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_vars, self.n_vars))

    def warm_start(self):
        """Rolling kinematics with theta and phi interpolated linearly to the goal."""
        spec, p = self.spec, self.params
        N, dt = self.N, spec.dt
        x0 = spec.initial_state
        glo, ghi = spec.goal_box()
        target = 0.5 * (glo + ghi)
        s = np.linspace(0.0, 1.0, N + 1)
        th = x0[TH] + (target - x0[TH]) * s
        ph = x0[PHI] + (target - x0[PHI]) * s
        r, d = p.radius, p.com_offset
        g0 = dyn.contact_geometry(x0, p)
        lo, hi = spec.gap_band
        band = 0.5 * (lo + hi) * p.contact_tol
        gap_g = np.full(N + 1, band)
        gap_g[0] = g0.gap_ground
        Ox0 = g0.center[0]
        Ox = Ox0 - r * (th - th[0])
        X = np.zeros((N + 1, 8))
        X[:, TH] = th
        X[:, PHI] = ph
        X[:, 0] = Ox + d * np.sin(th)
        X[:, Y] = r - d * np.cos(th) + gap_g
        X[:, W] = x0[W]
        X[1:, XD:XD + 3] = np.diff(X[:, :3], axis=0) / dt
        X[0] = x0
        U = np.zeros((N, 8))
        U[:, FN] = p.mass * p.gravity
        U[:, PHID] = np.diff(ph) / dt
        G = self.gap_fun(X)
        return np.clip(self.pack(X, U, G), self.lb, self.ub)


def transcribe(spec: TrajOptSpec, params: PlantParams) -> TranscribedNLP:
    return TranscribedNLP(spec, params)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


@dataclass
class SolveOptions:
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    max_outer: int = 20
    max_inner: int = 60
    inner_gtol: float = 1e-7
    al_tol: float = 1e-4
    merit_weight: float = 100.0
    tol_dyn: float = 1e-6


def _merit(nlp, z, weight):
    ce, ci = nlp.equality(z), nlp.inequality(z)
    return nlp.objective(z) + weight * (np.sum(np.abs(ce)) + np.sum(np.maximum(ci, 0.0)))


def _violation(nlp, z):
    ce, ci = nlp.equality(z), nlp.inequality(z)
    return max(float(np.max(np.abs(ce), initial=0.0)), float(np.max(np.maximum(ci, 0.0), initial=0.0)))


def _al_value(nlp, z, lam_e, lam_i, rho, jac=None, with_grad=True):
    ce, ci = nlp.equality(z), nlp.inequality(z)
    mult_i = np.maximum(0.0, lam_i + rho * ci)
    val = nlp.objective(z) + lam_e @ ce + 0.5 * rho * ce @ ce
    val += (mult_i @ mult_i - lam_i @ lam_i) / (2 * rho)
    if not with_grad:
        return val
    grad = nlp.objective_grad(z) + nlp.constraint_vjp(z, lam_e + rho * ce, mult_i, jac)
    return val, grad, mult_i


def _inner_newton(nlp, z, lam_e, lam_i, rho, opts):
    """Projected Gauss-Newton minimisation of the augmented Lagrangian.

    Works in scaled variables.  Variables sitting on a bound with the gradient
    pushing outward are frozen; the remaining block is solved with a
    Levenberg-Marquardt damped Gauss-Newton model and a projected backtracking
    line search.
    """
    sc = nlp.scale
    lb, ub = nlp.lb, nlp.ub
    fixed_always = lb == ub
    D = sp.diags(sc)
    mu = 1e-6
    X, U, _ = nlp.unpack(z)
    jac = nlp._jacobians(X, U)
    val, grad, mult_i = _al_value(nlp, z, lam_e, lam_i, rho, jac)
    it = 0
    for it in range(1, opts.max_inner + 1):
        gs = grad * sc
        tol_b = 1e-12 * np.maximum(1.0, np.abs(z))
        at_lo = (z <= lb + tol_b) & (gs > 0)
        at_hi = (z >= ub - tol_b) & (gs < 0)
        free = ~(fixed_always | at_lo | at_hi)
        pg = np.where(free, gs, 0.0)
        if np.max(np.abs(pg)) < opts.inner_gtol:
            break
        Je = nlp.jacobian_eq(z, jac) @ D
        Ji = nlp.jacobian_ineq(z) @ D
        act = mult_i > 0
        H = D @ nlp.objective_hessian(z) @ D + rho * (Je.T @ Je) + rho * (Ji[act].T @ Ji[act])
        Hf = H[free][:, free].tocsc()
        n_f = Hf.shape[0]
        accepted = False
        for _ in range(12):
            K = Hf + sp.identity(n_f, format="csc") * (mu * (1.0 + Hf.diagonal().max()))
            try:
                ds = spla.spsolve(K, -gs[free])
            except RuntimeError:
                ds = np.full(n_f, np.nan)
            if not np.all(np.isfinite(ds)) or ds @ gs[free] >= 0:
                mu *= 10.0
                continue
            step = np.zeros_like(z)
            step[free] = ds * sc[free]
            alpha = 1.0
            while alpha > 1e-4:
                z_try = np.clip(z + alpha * step, lb, ub)
                v_try = _al_value(nlp, z_try, lam_e, lam_i, rho, with_grad=False)
                if v_try <= val + 1e-4 * (grad @ (z_try - z)):
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                mu = max(mu / 3.0, 1e-12) if alpha == 1.0 else mu
                break
            mu *= 10.0
        if not accepted:
            break
        rel = abs(val - v_try) / max(1.0, abs(val))
        z = z_try
        X, U, _ = nlp.unpack(z)
        jac = nlp._jacobians(X, U)
        val, grad, mult_i = _al_value(nlp, z, lam_e, lam_i, rho, jac)
        if rel < 1e-14:
            break
    return z, it


def solve_nlp(nlp: TranscribedNLP, init=None, opts: SolveOptions = None) -> NominalTrajectory:
    """Augmented Lagrangian with a projected Gauss-Newton inner loop, then polish."""
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    z = nlp.warm_start() if init is None else np.clip(np.asarray(init, float), nlp.lb, nlp.ub)
    lam_e = np.zeros(nlp.n_eq)
    lam_i = np.zeros(nlp.n_ineq)
    rho = opts.rho0

    best_z = z.copy()
    best_merit = _merit(nlp, z, opts.merit_weight)
    merits = [best_merit]
    viol_prev = _violation(nlp, z)
    polish_error = None
    for outer in range(opts.max_outer):
        z_new, n_inner = _inner_newton(nlp, z, lam_e, lam_i, rho, opts)
        viol = _violation(nlp, z_new)
        merit = _merit(nlp, z_new, opts.merit_weight)
        log.debug("outer %d: rho=%.1e viol=%.3e merit=%.6f inner=%d", outer, rho, viol, merit, n_inner)
        if merit <= best_merit:
            best_z, best_merit = z_new.copy(), merit
            merits.append(merit)
        z = z_new
        ce, ci = nlp.equality(z), nlp.inequality(z)
        lam_e = lam_e + rho * ce
        lam_i = np.maximum(0.0, lam_i + rho * ci)
        if viol <= opts.al_tol:
            try:
                traj = _polish(nlp, z, opts)
            except TrajOptFailure as exc:
                polish_error = exc
                log.debug("polish failed: %s", exc)
            else:
                traj.diagnostics.update(outer_iterations=outer + 1, merit_history=merits,
                                        solve_time=time.perf_counter() - t0,
                                        al_violation=viol)
                return traj
        if viol > 0.25 * viol_prev:
            rho = min(rho * opts.rho_growth, opts.rho_max)
        viol_prev = viol
    residuals = {"violation": _violation(nlp, best_z), "merit": best_merit}
    if polish_error is not None:
        raise Infeasible(f"force-consistency polish failed: {polish_error}", best_z, residuals)
    raise IterationLimit("augmented Lagrangian did not reach the feasibility tolerance", best_z, residuals)


def _polish(nlp: TranscribedNLP, z, opts: SolveOptions) -> NominalTrajectory:
    """Re-derive velocities, rates and forces from the configuration path."""
    spec, p = nlp.spec, nlp.params
    N, dt = nlp.N, spec.dt
    X, U, _ = nlp.unpack(z.copy())
    X = X.copy()
    U = U.copy()
    lo, hi = np.array(spec.gap_band) * p.contact_tol
    for t in range(1, N + 1):
        for _ in range(3):
            g = dyn.contact_geometry(X[t], p)
            X[t, Y] += np.clip(g.gap_ground, lo, hi) - g.gap_ground
            X[t, W] += np.clip(g.gap_right, lo, hi) - g.gap_right
    q = X[:, 0:3]
    X[1:, XD:XD + 3] = np.diff(q, axis=0) / dt
    U[:, PHID] = np.diff(X[:, PHI]) / dt
    U[:, WD] = np.diff(X[:, W]) / dt
    ul, uu = spec.bounds.box()
    if np.any(U[:, 6:] < ul[6:] - 1e-12) or np.any(U[:, 6:] > uu[6:] + 1e-12):
        raise TrajOptFailure("gripper rate bound violated after polish")
    # reproduce positions exactly from the rate form used by the integrator
    for t in range(N):
        X[t + 1, PHI] = X[t, PHI] + dt * U[t, PHID]
        X[t + 1, W] = X[t, W] + dt * U[t, WD]
        X[t + 1, 0:3] = X[t, 0:3] + dt * X[t + 1, XD:XD + 3]

    c_lp = 0.5 * (1.0 + spec.cone_margin)
    fmax = spec.bounds.force_max * 0.5 * (1.0 + spec.range_margin)
    for t in range(N):
        acc = (X[t + 1, XD:XD + 3] - X[t, XD:XD + 3]) / dt
        Wm, base = dyn.wrench_matrix(X[t], p)
        g = dyn.contact_geometry(X[t], p)
        U[t, :6] = _fit_forces(Wm, acc - base, U[t, :6], p, c_lp, fmax, spec.eps_comp,
                               float(g.gap_ground), float(g.gap_right), t)
    traj = NominalTrajectory(X, U, dt, 1)
    traj.diagnostics = trajectory_residuals(traj, p, spec.eps_comp)
    traj.diagnostics["objective"] = phi_theta_cost(X)
    if traj.diagnostics["max_defect"] > opts.tol_dyn:
        raise TrajOptFailure(f"defect {traj.diagnostics['max_defect']:.2e} above tol_dyn")
    return traj


def _fit_forces(Wm, rhs, f_ref, p, cone, fmax, eps, gap_g, gap_r, t):
    """Contact forces closest (L1) to ``f_ref`` producing acceleration ``rhs``."""
    # variables: f (6), e (6) with e >= |f - f_ref|
    mg, mf = cone * p.mu_ground, cone * p.mu_finger
    A = []
    b = []
    for tan, nor, mu in ((FT, FN, mg), (F1T, F1, mf), (F2T, F2, mf)):
        for sgn in (1.0, -1.0):
            row = np.zeros(12)
            row[tan] = sgn
            row[nor] = -mu
            A.append(row)
            b.append(0.0)
    for k in range(6):
        for sgn in (1.0, -1.0):
            row = np.zeros(12)
            row[k] = sgn
            row[6 + k] = -1.0
            A.append(row)
            b.append(sgn * f_ref[k])
    lb = np.concatenate([[0.0, -fmax, 0.0, -fmax, 0.0, -fmax], np.zeros(6)])
    ub = np.concatenate([[fmax] * 6, np.full(6, np.inf)])
    if gap_g > 0:
        ub[FN] = min(ub[FN], 0.999 * eps / gap_g)
    if gap_r > 0:
        ub[F2] = min(ub[F2], 0.999 * eps / gap_r)
    # Newton-Euler rows in force/torque units keep the simplex well scaled
    rs = 1.0 / np.maximum(np.max(np.abs(Wm), axis=1), 1e-12)
    E = np.hstack([Wm * rs[:, None], np.zeros((3, 6))])
    rhs = rhs * rs
    cost = np.concatenate([np.zeros(6), np.ones(6)])
    sol = lp_solve(LPProblem(cost, np.array(A), np.array(b), E, rhs, lb, ub), method="simplex")
    if not sol.optimal:
        raise TrajOptFailure(f"no admissible contact forces at step {t} ({sol.status.value})")
    return sol.point[:6]


# ---------------------------------------------------------------------------
# audit and I/O
# ---------------------------------------------------------------------------


def trajectory_residuals(traj: NominalTrajectory, params: PlantParams, eps_comp=None) -> dict:
    """Independent re-check of defects, cones and complementarity.

    Defects are measured against ``plant_step`` (the simulation truth), which
    shares no code with the transcription beyond the contact model.
    """
    X, U = traj.states, traj.controls
    defects = np.array([np.max(np.abs(X[t + 1] - dyn.plant_step(X[t], U[t], params))) for t in range(len(U))])
    comp = []
    cone = []
    for t in range(len(U)):
        g = dyn.contact_geometry(X[t], params)
        comp.append(max(g.gap_ground * U[t, FN], g.gap_right * U[t, F2]))
        cone.append(max(abs(U[t, FT]) - params.mu_ground * U[t, FN],
                        abs(U[t, F1T]) - params.mu_finger * U[t, F1],
                        abs(U[t, F2T]) - params.mu_finger * U[t, F2],
                        -U[t, FN], -U[t, F1], -U[t, F2]))
    return {
        "max_defect": float(defects.max(initial=0.0)),
        "defect_by_step": defects.tolist(),
        "max_complementarity": float(max(comp, default=0.0)),
        "max_cone_violation": float(max(cone, default=0.0)),
        "objective": phi_theta_cost(X),
    }


def check_trajectory(traj: NominalTrajectory, params: PlantParams, tol_dyn=1e-6, eps_comp=None,
                     goal=None, tol_cone=1e-9):
    """Raise InvariantViolation naming the first failing step."""
    X, U = traj.states, traj.controls
    if X.ndim != 2 or X.shape[1] != 8 or U.ndim != 2 or U.shape[1] != 8:
        raise InvariantViolation("states and controls must be 8 columns wide")
    if X.shape[0] != U.shape[0] + 1:
        raise InvariantViolation(f"{X.shape[0]} states for {U.shape[0]} controls")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
        raise InvariantViolation("non-finite entries")
    eps = params.eps_comp if eps_comp is None else eps_comp
    for t in range(U.shape[0]):
        u = U[t]
        if min(u[FN], u[F1], u[F2]) < -tol_cone:
            raise InvariantViolation("negative normal force", t)
        if (abs(u[FT]) > params.mu_ground * u[FN] + tol_cone or abs(u[F1T]) > params.mu_finger * u[F1] + tol_cone
                or abs(u[F2T]) > params.mu_finger * u[F2] + tol_cone):
            raise InvariantViolation("friction cone violated", t)
        d = np.max(np.abs(X[t + 1] - dyn.plant_step(X[t], u, params)))
        if d > tol_dyn:
            raise InvariantViolation(f"dynamics defect {d:.3e} above {tol_dyn:.1e}", t)
        g = dyn.contact_geometry(X[t], params)
        if max(g.gap_ground * u[FN], g.gap_right * u[F2]) > eps * (1 + 1e-9):
            raise InvariantViolation("complementarity residual above eps", t)
    if goal is not None:
        lo, hi = goal
        for k in (TH, PHI):
            if not lo - 1e-12 <= X[-1, k] <= hi + 1e-12:
                raise InvariantViolation("final state outside goal region", X.shape[0] - 1)


def save_trajectory(traj: NominalTrajectory, path, params: PlantParams = None):
    # wall-clock fields would make the file differ between identical runs
    diag = {k: v for k, v in traj.diagnostics.items() if k not in ("defect_by_step", "solve_time")}
    doc = {
        "n": int(traj.horizon),
        "dt": traj.dt,
        "mode": traj.mode_id,
        "states": traj.states.tolist(),
        "controls": traj.controls.tolist(),
        "diagnostics": diag,
        "config_hash": traj.config_hash,
    }
    if params is not None:
        doc["params"] = params.to_dict()
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_trajectory(path, params: PlantParams = None, tol_dyn=1e-6, goal=None) -> NominalTrajectory:
    try:
        with open(path) as f:
            doc = json.load(f)
        n = int(doc["n"])
        X = np.array(doc["states"], dtype=float)
        U = np.array(doc["controls"], dtype=float)
        dt = float(doc["dt"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ParseError(f"cannot parse trajectory file {path}: {exc}") from exc
    if U.ndim != 2 or U.shape[0] != n or X.shape[0] != n + 1:
        raise InvariantViolation(f"declared n={n} but found {len(X)} states and {len(U)} controls")
    if params is None and "params" in doc:
        params = PlantParams.from_dict(doc["params"])
    traj = NominalTrajectory(X, U, dt, int(doc.get("mode", 1)), doc.get("diagnostics", {}),
                             doc.get("config_hash", ""))
    if params is not None:
        if abs(params.dt - dt) > 1e-15:
            raise InvariantViolation("trajectory dt differs from plant dt")
        check_trajectory(traj, params, tol_dyn, goal=goal)
    return traj
