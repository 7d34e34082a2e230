"""Planar half-cylinder manipulated by a two-finger gripper.

State ``x = [x, y, theta, xd, yd, thetad, phi, w]``: centre-of-mass position
and orientation of the half-disc, their rates, the finger angle ``phi`` and
the finger separation ``w``.  Control
``u = [FN, Ft, F1, F1t, F2, F2t, phid, wd]``: ground normal/friction force,
left and right finger normal/tangential forces, and the two gripper rates.

Body frame: origin at the circle centre ``O``, flat face along the body x
axis, the arc on the body -y side.  ``theta`` rotates body to world.  The left
fingertip sits on the flat face at ``finger_offset`` from ``O``; the right
fingertip is the left one shifted by ``w`` along ``-n(phi)`` where
``n(a) = (-sin a, cos a)``.  Everything here is vectorised over leading axes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

N_STATE = 8
N_CONTROL = 8

# state indices
X, Y, TH, XD, YD, THD, PHI, W = range(8)
# control indices
FN, FT, F1, F1T, F2, F2T, PHID, WD = range(8)

STATE_NAMES = ("x", "y", "theta", "xd", "yd", "thetad", "phi", "w")
CONTROL_NAMES = ("FN", "Ft", "F1", "F1t", "F2", "F2t", "phid", "wd")

ANGLE_TOL = 1e-9


class GeometryDegenerate(ValueError):
    """The ground support point is not unique (flat face lying on the table)."""


def half_disc_inertia(mass: float, radius: float) -> float:
    """Moment of inertia of a uniform half-disc about its centroid."""
    return (0.5 - 16.0 / (9.0 * math.pi**2)) * mass * radius**2


def centroid_offset(radius: float) -> float:
    return 4.0 * radius / (3.0 * math.pi)


@dataclass
class InputBounds:
    force_max: float = 5.0
    phid_max: float = 2.0
    wd_max: float = 0.5

    def box(self):
        """(lower, upper) arrays over the 8 control channels."""
        f = self.force_max
        lo = np.array([0.0, -f, 0.0, -f, 0.0, -f, -self.phid_max, -self.wd_max])
        hi = np.array([f, f, f, f, f, f, self.phid_max, self.wd_max])
        return lo, hi


@dataclass
class PlantParams:
    radius: float = 0.036
    length: float = 0.11
    mass: float = 0.1
    inertia: float = None
    mu_ground: float = 0.3
    mu_finger: float = 0.5
    gravity: float = 9.81
    dt: float = 0.01
    contact_tol: float = 1e-3
    eps_comp: float = 1e-4
    finger_offset: float = 0.0
    bounds: InputBounds = field(default_factory=InputBounds)

    def __post_init__(self):
        if isinstance(self.bounds, dict):
            self.bounds = InputBounds(**self.bounds)
        if self.inertia is None:
            self.inertia = half_disc_inertia(self.mass, self.radius)
        for name in ("radius", "length", "mass", "inertia", "dt", "contact_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PlantParams.{name} must be positive")

    @property
    def com_offset(self) -> float:
        return centroid_offset(self.radius)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlantParams":
        return cls(**d)


@dataclass(frozen=True)
class ContactMode:
    """Flags over the togglable contacts (here only the right finger)."""

    flags: tuple

    @property
    def id(self) -> int:
        # id 1 is all-active; inactive contacts count up in binary
        k = 0
        for bit, on in enumerate(self.flags):
            if not on:
                k |= 1 << bit
        return k + 1

    @property
    def right_active(self) -> bool:
        return bool(self.flags[0]) if self.flags else True

    @classmethod
    def from_id(cls, mode_id: int, p: int = 1) -> "ContactMode":
        k = mode_id - 1
        if not 0 <= k < 2**p:
            raise ValueError(f"mode id {mode_id} out of range for p={p}")
        return cls(tuple(not (k >> bit) & 1 for bit in range(p)))


def enumerate_modes(p: int = 1) -> list:
    """All 2**p contact modes, the all-active (nominal) mode first."""
    if p < 0:
        raise ValueError("p must be non-negative")
    return [ContactMode.from_id(j, p) for j in range(1, 2**p + 1)]


NOMINAL = ContactMode((True,))
RIGHT_FREE = ContactMode((False,))


class ContactGeometry(NamedTuple):
    """Contact points, force directions and gaps.

    ``normal_*`` is the unit direction a positive normal force pushes the body;
    the matching tangential direction is ``(n_y, -n_x)``.
    """

    com: np.ndarray
    center: np.ndarray
    point_ground: np.ndarray
    normal_ground: np.ndarray
    point_left: np.ndarray
    normal_left: np.ndarray
    point_right: np.ndarray
    normal_right: np.ndarray
    fingertip_right: np.ndarray
    gap_ground: np.ndarray
    gap_right: np.ndarray


def _rot(theta, v):
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def _vec(a, b):
    a, b = np.broadcast_arrays(a, b)
    return np.stack([a, b], axis=-1)


def _circle_center(state, r):
    d = centroid_offset(r)
    th = state[..., TH]
    return _vec(state[..., X] - d * np.sin(th), state[..., Y] + d * np.cos(th))


def _half_disc_distance(qb, r):
    """Signed distance from body-frame points ``qb`` to the half-disc, with the
    nearest boundary point and the outward unit normal there."""
    zx, zy = qb[..., 0], qb[..., 1]
    rho = np.hypot(zx, zy)
    safe = np.where(rho > 0, rho, 1.0)
    ux, uy = zx / safe, zy / safe
    below = zy <= 0
    # arc region (below the face, outside or nearer the arc than the face)
    arc_dist = rho - r
    face_depth = -zy
    inside = below & (rho <= r)
    on_arc = below & ((rho > r) | (r - rho <= face_depth))
    # above the face, within its extent
    above_face = (~below) & (np.abs(zx) <= r)
    corner_x = np.where(zx >= 0, r, -r)
    cdx, cdy = zx - corner_x, zy
    cdist = np.hypot(cdx, cdy)
    csafe = np.where(cdist > 0, cdist, 1.0)

    dist = np.where(on_arc, arc_dist, np.where(inside, -face_depth, np.where(above_face, zy, cdist)))
    nx = np.where(on_arc, ux, np.where(inside | above_face, 0.0, cdx / csafe))
    ny = np.where(on_arc, uy, np.where(inside | above_face, 1.0, cdy / csafe))
    px = np.where(on_arc, r * ux, np.where(inside | above_face, np.clip(zx, -r, r), corner_x))
    py = np.where(on_arc, r * uy, 0.0)
    return dist, _vec(px, py), _vec(nx, ny)


def ground_support(state, params: PlantParams, check: bool = False):
    """Lowest body point (world frame) and the ground gap."""
    r = params.radius
    th = np.asarray(state)[..., TH]
    O = _circle_center(np.asarray(state, float), r)
    # arc bottom is in the arc's span iff |theta| <= pi/2 (mod 2 pi)
    thw = np.mod(th + np.pi, 2 * np.pi) - np.pi
    if check and np.any(np.abs(np.abs(thw) - np.pi) < 1e-6):
        raise GeometryDegenerate("flat face lies on the ground; support point not unique")
    in_span = np.abs(thw) <= np.pi / 2
    arc_pt = O + _vec(0.0 * th, -r + 0.0 * th)
    # lower of the two face corners; ties (face vertical) resolve to the lower edge point
    c1 = O + _rot(th, _vec(r + 0 * th, 0 * th))
    c2 = O + _rot(th, _vec(-r + 0 * th, 0 * th))
    corner = np.where((c1[..., 1] <= c2[..., 1])[..., None], c1, c2)
    pt = np.where(in_span[..., None], arc_pt, corner)
    return pt, pt[..., 1]


def contact_geometry(state, params: PlantParams, check: bool = False) -> ContactGeometry:
    state = np.asarray(state, dtype=float)
    r = params.radius
    d = params.com_offset
    th, phi, w = state[..., TH], state[..., PHI], state[..., W]
    O = _circle_center(state, r)
    com = state[..., X:Y + 1]

    p_ground, gap_ground = ground_support(state, params, check)
    n_ground = np.broadcast_to(np.array([0.0, 1.0]), p_ground.shape).copy()

    t_th = _vec(np.cos(th), np.sin(th))
    n_th = _vec(-np.sin(th), np.cos(th))
    p_left = O + params.finger_offset * t_th
    n_left = -n_th

    n_phi = _vec(-np.sin(phi), np.cos(phi))
    tip = p_left - w[..., None] * n_phi
    qb = _rot(-th, tip - O)
    gap_right, pb, nb = _half_disc_distance(qb, r)
    p_right = O + _rot(th, pb)
    n_right = -_rot(th, nb)
    del d
    return ContactGeometry(com, O, p_ground, n_ground, p_left, n_left, p_right, n_right, tip,
                           gap_ground, gap_right)


def detect_mode(state, params: PlantParams) -> ContactMode:
    g = contact_geometry(state, params)
    return ContactMode((bool(g.gap_right <= params.contact_tol),))


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _tangent(n):
    return _vec(n[..., 1], -n[..., 0])


def _wrench_accel(geom: ContactGeometry, u, params: PlantParams, ground_on, right_on):
    """(xdd, ydd, thetadd) from contact forces plus gravity."""
    m, inertia = params.mass, params.inertia
    forces = []
    for pt, n, fn, ft, on in (
        (geom.point_ground, geom.normal_ground, u[..., FN], u[..., FT], ground_on),
        (geom.point_left, geom.normal_left, u[..., F1], u[..., F1T], 1.0),
        (geom.point_right, geom.normal_right, u[..., F2], u[..., F2T], right_on),
    ):
        F = (fn[..., None] * n + ft[..., None] * _tangent(n)) * np.asarray(on, float)[..., None]
        forces.append((pt, F))
    total = sum(F for _, F in forces)
    torque = sum(_cross(pt - geom.com, F) for pt, F in forces)
    xdd = total[..., 0] / m
    ydd = total[..., 1] / m - params.gravity
    return np.stack([xdd, ydd, torque / inertia], axis=-1)


def continuous_dynamics(state, u, mode: ContactMode, params: PlantParams):
    """Time derivative of the state with the contacts of ``mode`` active.

    The ground contact is not togglable and always contributes.
    """
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    geom = contact_geometry(state, params)
    acc = _wrench_accel(geom, u, params, 1.0, 1.0 if mode.right_active else 0.0)
    out = np.empty(np.broadcast_shapes(state.shape, u.shape))
    out[..., X:TH + 1] = state[..., XD:THD + 1]
    out[..., XD:THD + 1] = acc
    out[..., PHI] = u[..., PHID]
    out[..., W] = u[..., WD]
    return out


def wrench_matrix(state, params: PlantParams, right_on: bool = True):
    """3x6 map from the six contact force components to (xdd, ydd, thetadd),
    and the gravity offset, at a single state."""
    geom = contact_geometry(state, params)
    cols = []
    base = _wrench_accel(geom, np.zeros(8), params, 1.0, float(right_on))
    for k in range(6):
        e = np.zeros(8)
        e[k] = 1.0
        cols.append(_wrench_accel(geom, e, params, 1.0, float(right_on)) - base)
    return np.stack(cols, axis=-1), base


def integrate(state, u, params: PlantParams, mode: ContactMode = NOMINAL, ground_on=1.0):
    """One semi-implicit Euler step of the mode dynamics (no projection, no clamping).

    Velocities update first and positions use the new velocities; the gripper
    channels integrate their rate commands exactly.
    """
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    dt = params.dt
    geom = contact_geometry(state, params)
    right_on = 1.0 if mode.right_active else 0.0
    acc = _wrench_accel(geom, u, params, ground_on, right_on)
    nxt = np.empty(np.broadcast_shapes(state.shape, u.shape))
    nxt[..., XD:THD + 1] = state[..., XD:THD + 1] + dt * acc
    nxt[..., X:TH + 1] = state[..., X:TH + 1] + dt * nxt[..., XD:THD + 1]
    nxt[..., PHI] = state[..., PHI] + dt * u[..., PHID]
    nxt[..., W] = state[..., W] + dt * u[..., WD]
    return nxt


def project_command(state, u, params: PlantParams, ground_on=None, right_on=None):
    """Project a commanded control onto the feasible contact/actuator set.

    Inactive contacts get zero force, normals are clipped to ``[0, force_max]``,
    tangential forces to their friction cones and rates to their limits.
    """
    state = np.asarray(state, dtype=float)
    u = np.array(u, dtype=float, copy=True)
    if ground_on is None or right_on is None:
        geom = contact_geometry(state, params)
        if ground_on is None:
            ground_on = geom.gap_ground <= params.contact_tol
        if right_on is None:
            right_on = geom.gap_right <= params.contact_tol
    b = params.bounds
    fmax = b.force_max
    u[..., FN] = np.clip(u[..., FN], 0.0, fmax) * ground_on
    u[..., F1] = np.clip(u[..., F1], 0.0, fmax)
    u[..., F2] = np.clip(u[..., F2], 0.0, fmax) * right_on
    u[..., FT] = np.clip(u[..., FT], -params.mu_ground * u[..., FN], params.mu_ground * u[..., FN])
    u[..., F1T] = np.clip(u[..., F1T], -params.mu_finger * u[..., F1], params.mu_finger * u[..., F1])
    u[..., F2T] = np.clip(u[..., F2T], -params.mu_finger * u[..., F2], params.mu_finger * u[..., F2])
    u[..., PHID] = np.clip(u[..., PHID], -b.phid_max, b.phid_max)
    u[..., WD] = np.clip(u[..., WD], -b.wd_max, b.wd_max)
    return u


@dataclass
class StepDiagnostic:
    ground_clamped: np.ndarray
    finger_clamped: np.ndarray
    penetration: np.ndarray
    command: np.ndarray


def plant_step(state, command, params: PlantParams, return_diagnostic: bool = False):
    """Simulation truth: project the command, integrate, resolve penetration."""
    state = np.asarray(state, dtype=float)
    geom = contact_geometry(state, params)
    ground_on = geom.gap_ground <= params.contact_tol
    right_on = geom.gap_right <= params.contact_tol
    u = project_command(state, command, params, ground_on, right_on)
    acc = _wrench_accel(geom, u, params, ground_on, right_on)
    dt = params.dt
    nxt = np.empty(np.broadcast_shapes(state.shape, u.shape))
    nxt[..., XD:THD + 1] = state[..., XD:THD + 1] + dt * acc
    nxt[..., X:TH + 1] = state[..., X:TH + 1] + dt * nxt[..., XD:THD + 1]
    nxt[..., PHI] = state[..., PHI] + dt * u[..., PHID]
    nxt[..., W] = state[..., W] + dt * u[..., WD]

    # ground penetration: lift the body and remove the approaching velocity of
    # the support point
    pt, gap = ground_support(nxt, params)
    pen = np.minimum(gap, 0.0)
    hit = gap < 0
    nxt[..., Y] = nxt[..., Y] - pen
    vc_y = nxt[..., YD] + nxt[..., THD] * (pt[..., 0] - nxt[..., X])
    nxt[..., YD] = nxt[..., YD] + np.where(hit, np.maximum(-vc_y, 0.0), 0.0)

    # fingers cannot penetrate: open the gripper until the right tip touches
    gap_r = contact_geometry(nxt, params).gap_right
    fhit = gap_r < 0
    nxt[..., W] = np.maximum(nxt[..., W] - np.minimum(gap_r, 0.0), 0.0)
    if return_diagnostic:
        return nxt, StepDiagnostic(hit, fhit, pen, u)
    return nxt


def energy(state, params: PlantParams):
    """Kinetic plus gravitational potential energy of the half-disc."""
    state = np.asarray(state, dtype=float)
    m, inertia = params.mass, params.inertia
    ke = 0.5 * m * (state[..., XD] ** 2 + state[..., YD] ** 2) + 0.5 * inertia * state[..., THD] ** 2
    return ke + m * params.gravity * state[..., Y]


def rest_state(params: PlantParams, theta=0.0, phi=0.0, ground_gap=0.0, right_gap=0.0, x=0.0):
    """Static state resting on the table at angle ``theta`` (|theta| <= pi/2)."""
    r, d = params.radius, params.com_offset
    s = np.zeros(8)
    s[X] = x
    s[TH] = theta
    s[Y] = r - d * math.cos(theta) + ground_gap
    s[PHI] = phi
    s[W] = r + right_gap if params.finger_offset == 0.0 else _right_contact_w(params, theta, phi) + right_gap
    return s


def _right_contact_w(params, theta, phi):
    # |s t_th - w n_phi| = r  ->  w^2 - 2 s w sin(theta - phi) + s^2 - r^2 = 0
    s, r = params.finger_offset, params.radius
    b = s * math.sin(theta - phi)
    return b + math.sqrt(r * r - s * s + b * b)


def mirror_state(state):
    s = np.array(state, dtype=float, copy=True)
    s[..., [X, TH, XD, THD, PHI]] *= -1
    return s


def mirror_control(u):
    u = np.array(u, dtype=float, copy=True)
    u[..., [FT, F1T, F2T, PHID]] *= -1
    return u
