"""Piecewise-affine approximation of the contact dynamics along a nominal plan.

For every nominal point (x_i, u_i) and every contact mode j we keep

* an affine one-step map  x+ = A x + B u + c  obtained from central finite
  differences of the mode's continuous dynamics, discretised with the same
  semi-implicit Euler rule as the plant, and
* an H-polytope over z = (x, u) with the linearised constraints of that mode
  (friction cones, force signs and limits, rate limits, contact gaps).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .dynamics import (F1, F1T, F2, F2T, FN, FT, PHID, WD, XD, ContactMode,
                       PlantParams)

FD_STEP = 1e-6


@dataclass
class AffineDynamics:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    step_index: int
    mode_id: int
    dt: float

    def __call__(self, x, u):
        return self.A @ np.asarray(x, float) + self.B @ np.asarray(u, float) + self.c

    def apply(self, X, U):
        """Row-wise evaluation for stacked states and controls."""
        return np.asarray(X) @ self.A.T + np.asarray(U) @ self.B.T + self.c


@dataclass
class HPolytope:
    """The set {z : H z <= h}."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if self.H.shape[0] != self.h.shape[0]:
            raise ValueError(f"{self.H.shape[0]} rows in H but {self.h.shape[0]} in h")
        if np.isnan(self.H).any() or np.isnan(self.h).any():
            raise ValueError("polytope rows contain NaN")

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def residual(self, z):
        return self.H @ np.asarray(z, float) - self.h

    def contains(self, z, tol=1e-9) -> bool:
        return bool(np.all(self.residual(z) <= tol))

    def to_dict(self):
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["H"], float).reshape(len(d["h"]), -1), np.asarray(d["h"], float))

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        n = lo.size
        H = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([hi, -lo])
        keep = np.isfinite(h)
        return cls(H[keep], h[keep])


def _kinematic_lift(dt):
    """M with  x+ = x + dt * M f  reproducing the semi-implicit Euler step."""
    M = np.eye(dyn.N_STATE)
    for k in range(3):
        M[k, XD + k] = dt
    return M


def fd_jacobians(x, u, mode: ContactMode, params: PlantParams, step=FD_STEP):
    """Central-difference Jacobians (A_c, B_c) of the continuous dynamics."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    E = np.eye(8) * step
    xs = np.concatenate([x + E, x - E, np.broadcast_to(x, (16, 8))])
    us = np.concatenate([np.broadcast_to(u, (16, 8)), u + E, u - E])
    f = dyn.continuous_dynamics(xs, us, mode, params)
    Ac = ((f[:8] - f[8:16]) / (2 * step)).T
    Bc = ((f[16:24] - f[24:32]) / (2 * step)).T
    return Ac, Bc


def linearize_mode(traj, i: int, mode: ContactMode, params: PlantParams) -> AffineDynamics:
    """Affine map of mode ``mode`` around the i-th nominal point.

    The offset is fixed so the map reproduces the mode's semi-implicit step at
    the expansion point exactly.
    """
    if not 0 <= i < traj.horizon:
        raise IndexError(f"step {i} outside 0..{traj.horizon - 1}")
    x, u = traj.states[i], traj.controls[i]
    dt = params.dt
    Ac, Bc = fd_jacobians(x, u, mode, params)
    # force columns of contacts that are off in this mode are exactly zero
    if not mode.right_active:
        Bc[:, [F2, F2T]] = 0.0
    M = _kinematic_lift(dt)
    A = np.eye(8) + dt * (M @ Ac)
    B = dt * (M @ Bc)
    c = dyn.integrate(x, u, params, mode) - A @ x - B @ u
    return AffineDynamics(A, B, c, i, mode.id, dt)


def _gap_gradients(x, params, step=FD_STEP):
    E = np.eye(8) * step
    g = dyn.contact_geometry(np.concatenate([x + E, x - E]), params)
    gg = (g.gap_ground[:8] - g.gap_ground[8:]) / (2 * step)
    gr = (g.gap_right[:8] - g.gap_right[8:]) / (2 * step)
    g0 = dyn.contact_geometry(x, params)
    return float(g0.gap_ground), gg, float(g0.gap_right), gr


def input_rows(mode: ContactMode, params: PlantParams):
    """Rows (G, g) with G u <= g: cones, force signs and limits, rate limits."""
    b = params.bounds
    mg, mf = params.mu_ground, params.mu_finger
    rows, rhs = [], []

    def row(entries, val):
        r = np.zeros(8)
        for k, v in entries:
            r[k] = v
        rows.append(r)
        rhs.append(val)

    contacts = [(FN, FT, mg, True), (F1, F1T, mf, True), (F2, F2T, mf, mode.right_active)]
    for n, t, mu, on in contacts:
        if on:
            row([(t, 1.0), (n, -mu)], 0.0)
            row([(t, -1.0), (n, -mu)], 0.0)
            row([(n, -1.0)], 0.0)
            row([(n, 1.0)], b.force_max)
        else:
            for k in (n, t):
                row([(k, 1.0)], 0.0)
                row([(k, -1.0)], 0.0)
    row([(PHID, 1.0)], b.phid_max)
    row([(PHID, -1.0)], b.phid_max)
    row([(WD, 1.0)], b.wd_max)
    row([(WD, -1.0)], b.wd_max)
    return np.array(rows), np.array(rhs)


def linearize_constraints(traj, i: int, mode: ContactMode, params: PlantParams) -> HPolytope:
    """Linearised constraint cell of ``mode`` at step i, over z = (x, u).

    A contact counts as closed when its gap is within ``contact_tol`` (the
    plant's activation threshold), so the active side is 0 <= gap <= tol and
    the free side is gap >= tol.
    """
    if not 0 <= i <= traj.horizon:
        raise IndexError(f"step {i} outside 0..{traj.horizon}")
    x = traj.states[i]
    tol = params.contact_tol
    Gu, gu = input_rows(mode, params)
    H = [np.hstack([np.zeros((Gu.shape[0], 8)), Gu])]
    h = [gu]
    g0, dg, r0, dr = _gap_gradients(x, params)
    # linearised gap  l(x) = g0 + dg.(x - x_bar)
    gap_rows = [(dg, g0, 0.0, tol)]
    if mode.right_active:
        gap_rows.append((dr, r0, 0.0, tol))
    else:
        gap_rows.append((dr, r0, tol, np.inf))
    for grad, val, lo, hi in gap_rows:
        off = val - grad @ x
        if np.isfinite(hi):
            H.append(np.concatenate([grad, np.zeros(8)])[None])
            h.append(np.array([hi - off]))
        H.append(np.concatenate([-grad, np.zeros(8)])[None])
        h.append(np.array([off - lo]))
    return HPolytope(np.vstack(H), np.concatenate(h))


class PWATable:
    """Cells (i, j) for i = 0..N-1 and mode ids j = 1..2^p."""

    def __init__(self, cells: dict, horizon: int, n_modes: int, dt: float, config_hash: str = ""):
        self.cells = cells
        self.horizon = horizon
        self.n_modes = n_modes
        self.dt = dt
        self.config_hash = config_hash

    def __len__(self):
        return len(self.cells)

    def dynamics(self, i, j=1) -> AffineDynamics:
        return self.cells[(i, j)][0]

    def polytope(self, i, j=1) -> HPolytope:
        return self.cells[(i, j)][1]

    def nominal_row(self):
        return [self.dynamics(i, 1) for i in range(self.horizon)]

    def stacked(self, j=1):
        """(A, B, c) stacked over steps for mode j."""
        dyns = [self.dynamics(i, j) for i in range(self.horizon)]
        return (np.stack([d.A for d in dyns]), np.stack([d.B for d in dyns]),
                np.stack([d.c for d in dyns]))

    def to_dict(self):
        cells = []
        for (i, j), (d, poly) in sorted(self.cells.items()):
            cells.append({"i": i, "j": j, "A": d.A.tolist(), "B": d.B.tolist(), "c": d.c.tolist(),
                          "H": poly.H.tolist(), "h": poly.h.tolist()})
        return {"horizon": self.horizon, "n_modes": self.n_modes, "dt": self.dt,
                "config_hash": self.config_hash, "cells": cells}

    @classmethod
    def from_dict(cls, doc):
        cells = {}
        dt = float(doc["dt"])
        for cell in doc["cells"]:
            i, j = int(cell["i"]), int(cell["j"])
            d = AffineDynamics(np.array(cell["A"], float), np.array(cell["B"], float),
                               np.array(cell["c"], float), i, j, dt)
            poly = HPolytope(np.array(cell["H"], float).reshape(len(cell["h"]), -1),
                             np.array(cell["h"], float))
            cells[(i, j)] = (d, poly)
        table = cls(cells, int(doc["horizon"]), int(doc["n_modes"]), dt, doc.get("config_hash", ""))
        table.validate()
        return table

    def validate(self):
        for i in range(self.horizon):
            for j in range(1, self.n_modes + 1):
                if (i, j) not in self.cells:
                    raise ValueError(f"missing PWA cell ({i}, {j})")
                d = self.cells[(i, j)][0]
                if d.A.shape != (8, 8) or d.B.shape != (8, 8) or d.c.shape != (8,):
                    raise ValueError(f"bad dimensions in cell ({i}, {j})")

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def build_pwa(traj, params: PlantParams, p: int = 1) -> PWATable:
    cells = {}
    modes = dyn.enumerate_modes(p)
    for i in range(traj.horizon):
        for mode in modes:
            cells[(i, mode.id)] = (linearize_mode(traj, i, mode, params),
                                   linearize_constraints(traj, i, mode, params))
    return PWATable(cells, traj.horizon, len(modes), params.dt, getattr(traj, "config_hash", ""))


def one_step_error(table: PWATable, traj, params: PlantParams, i: int, direction, delta, j=1):
    """Gap between the affine prediction and the plant at a perturbed point.

    ``direction`` is a 16-vector over (x, u); the perturbation is
    ``delta * direction``.
    """
    d = np.asarray(direction, float) * delta
    x = traj.states[i] + d[:8]
    u = traj.controls[i] + d[8:]
    pred = table.dynamics(i, j)(x, u)
    return float(np.max(np.abs(pred - dyn.plant_step(x, u, params))))


def error_slope(table, traj, params, i, direction, deltas=None, j=1):
    """Slope of log(error) against log(delta); about 2 for a first-order model."""
    deltas = np.logspace(-5, -2, 7) if deltas is None else np.asarray(deltas, float)
    errs = np.array([one_step_error(table, traj, params, i, direction, dl, j) for dl in deltas])
    slope = np.polyfit(np.log(deltas), np.log(np.maximum(errs, 1e-300)), 1)[0]
    return float(slope), errs
