"""Brute-force reference implementations used by the tests.

Nothing here imports the package's solvers; each function recomputes its
answer from first principles so it can serve as an independent oracle.
"""

import itertools
import math

import numpy as np


def lp_vertex_enumeration(c, A=None, b=None, E=None, f=None, lb=None, ub=None, tol=1e-9):
    """Minimum of c.z over a bounded polyhedron by visiting every vertex.

    Returns (objective, point) or (None, None) when the set is empty.
    All variables must have finite bounds.
    """
    c = np.asarray(c, float)
    n = c.size
    rows, rhs = [], []
    if A is not None and len(A):
        rows += list(np.asarray(A, float))
        rhs += list(np.asarray(b, float))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        rows.append(e)
        rhs.append(ub[j])
        rows.append(-e)
        rhs.append(-lb[j])
    rows, rhs = np.array(rows), np.array(rhs)
    E = np.zeros((0, n)) if E is None or not len(E) else np.asarray(E, float)
    f = np.zeros(0) if E.shape[0] == 0 else np.asarray(f, float)
    k = n - E.shape[0]
    best, arg = None, None
    for combo in itertools.combinations(range(len(rows)), k):
        M = np.vstack([E, rows[list(combo)]])
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        z = np.linalg.solve(M, np.concatenate([f, rhs[list(combo)]]))
        if np.all(rows @ z <= rhs + tol) and np.allclose(E @ z, f, atol=tol):
            val = float(c @ z)
            if best is None or val < best:
                best, arg = val, z
    return best, arg


def zonotope_vertices(center, G):
    G = np.asarray(G, float)
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=G.shape[1])))
    return np.asarray(center, float) + signs @ G.T


def zonotope_contained_by_vertices(center, G, H, h, tol=1e-9):
    V = zonotope_vertices(center, G)
    return bool(np.all(V @ np.asarray(H).T <= np.asarray(h) + tol))


def half_disc_centroid_depth(r, n=2000):
    """Distance of the half-disc centroid below the flat face, by a midpoint
    rule over horizontal strips."""
    ys = (np.arange(n) + 0.5) / n * r
    widths = 2.0 * np.sqrt(r * r - ys * ys)
    return float(np.sum(ys * widths) / np.sum(widths))


def torque_about_com(com, points, forces):
    """Planar cross products sum_k (p_k - com) x F_k, written out longhand."""
    total = 0.0
    for p, F in zip(points, forces):
        rx, ry = p[0] - com[0], p[1] - com[1]
        total += rx * F[1] - ry * F[0]
    return total


def point_to_arc_distance(q, center, r):
    """Distance from q to a circle of radius r (point outside the disc)."""
    return math.hypot(q[0] - center[0], q[1] - center[1]) - r
