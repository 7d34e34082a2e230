"""Linear programs: a small dense two-phase simplex plus a sparse HiGHS path.

Every LP in the package goes through :func:`lp_solve`.  Small dense problems
(tracking LPs, membership tests, per-step force fits) use the in-house
simplex, which is deterministic and dependency free.  The funnel synthesis LP
has tens of thousands of sparse columns and is routed to HiGHS.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

TOL_FEAS = 1e-8

# problems at most this many columns (after standard-form expansion) go to
# the dense simplex when method="auto"
DENSE_LIMIT = 400


class NumericalFailure(RuntimeError):
    """The solver could not classify the problem."""


class LPStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass
class LPProblem:
    """minimize cost @ z  s.t.  ineq_lhs @ z <= ineq_rhs,  eq_lhs @ z == eq_rhs,  lb <= z <= ub.

    ``lb``/``ub`` may contain -inf/+inf.  Constraint matrices may be dense
    arrays or scipy sparse matrices (the latter only make sense for HiGHS).
    """

    cost: np.ndarray
    ineq_lhs: object = None
    ineq_rhs: np.ndarray = None
    eq_lhs: object = None
    eq_rhs: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float).ravel()
        n = self.cost.size
        self.ineq_lhs, self.ineq_rhs = _rows(self.ineq_lhs, self.ineq_rhs, n, "ineq")
        self.eq_lhs, self.eq_rhs = _rows(self.eq_lhs, self.eq_rhs, n, "eq")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float).copy()
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bound vectors must have one entry per variable")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise ValueError("NaN bound")

    @property
    def num_vars(self) -> int:
        return self.cost.size

    def violation(self, z: np.ndarray) -> float:
        """Largest constraint violation of ``z`` (0 when feasible)."""
        v = 0.0
        if self.ineq_rhs.size:
            v = max(v, float(np.max(self.ineq_lhs @ z - self.ineq_rhs)))
        if self.eq_rhs.size:
            v = max(v, float(np.max(np.abs(self.eq_lhs @ z - self.eq_rhs))))
        v = max(v, float(np.max(self.lb - z, initial=0.0)), float(np.max(z - self.ub, initial=0.0)))
        return max(v, 0.0)


def _rows(lhs, rhs, n, name):
    if lhs is None:
        return np.zeros((0, n)), np.zeros(0)
    if not sp.issparse(lhs):
        lhs = np.atleast_2d(np.asarray(lhs, dtype=float))
        if lhs.size == 0:
            lhs = lhs.reshape(0, n)
    rhs = np.asarray(rhs, dtype=float).ravel()
    if lhs.shape[1] != n:
        raise ValueError(f"{name} matrix has {lhs.shape[1]} columns, expected {n}")
    if lhs.shape[0] != rhs.size:
        raise ValueError(f"{name} matrix has {lhs.shape[0]} rows but rhs has {rhs.size}")
    return lhs, rhs


@dataclass
class LPSolution:
    status: LPStatus
    point: np.ndarray = None
    objective: float = np.nan
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is LPStatus.OPTIMAL


# ---------------------------------------------------------------------------
# dense simplex
# ---------------------------------------------------------------------------


DROP_TOL = 1e-12  # entries below this fraction of their row maximum are noise


def _drop_negligible(M):
    """Dense copy of M with round-off sized entries set to zero.  Such entries
    (finite-difference noise, typically) otherwise end up as pivots."""
    M = np.array(M.todense() if sp.issparse(M) else M, dtype=float)
    if M.size:
        rmax = np.max(np.abs(M), axis=1, keepdims=True)
        M[np.abs(M) < DROP_TOL * rmax] = 0.0
    return M


def _standard_form(problem: LPProblem):
    """Rewrite as  min c@s, A s = b, s >= 0  and return a map back to z.

    z = offset + T @ s
    """
    n = problem.num_vars
    lb, ub = problem.lb, problem.ub
    cols = []  # (var index, sign) for each structural column
    offset = np.zeros(n)
    upper_rows = []  # (column index, bound) for doubly-bounded variables
    for j in range(n):
        lo, hi = lb[j], ub[j]
        if np.isfinite(lo):
            offset[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                upper_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ns = len(cols)
    T = np.zeros((n, ns))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s

    A_in = _drop_negligible(problem.ineq_lhs)
    A_eq = _drop_negligible(problem.eq_lhs)
    b_in = problem.ineq_rhs - A_in @ offset
    b_eq = problem.eq_rhs - A_eq @ offset
    A_in = A_in @ T
    A_eq = A_eq @ T
    if upper_rows:
        U = np.zeros((len(upper_rows), ns))
        for r, (k, _) in enumerate(upper_rows):
            U[r, k] = 1.0
        A_in = np.vstack([A_in, U])
        b_in = np.concatenate([b_in, [h for _, h in upper_rows]])

    m_in, m_eq = A_in.shape[0], A_eq.shape[0]
    A = np.zeros((m_in + m_eq, ns + m_in))
    A[:m_in, :ns] = A_in
    A[:m_in, ns:] = np.eye(m_in)
    A[m_in:, :ns] = A_eq
    b = np.concatenate([b_in, b_eq])
    c = np.concatenate([T.T @ problem.cost, np.zeros(m_in)])
    T_full = np.hstack([T, np.zeros((n, m_in))])
    const = float(problem.cost @ offset)
    return A, b, c, T_full, offset, const, m_in


PIVOT_TOL = 1e-9  # smallest admissible pivot element


def _pivot(tab, row, col):
    tab[row] /= tab[row, col]
    colv = tab[:, col].copy()
    colv[row] = 0.0
    tab -= colv[:, None] * tab[row]


def _simplex_iterate(tab, basis, ncols, max_iter, tol):
    """Minimise the last row of ``tab`` (reduced costs) over the first ncols columns.

    Dantzig pricing, switching permanently to Bland's rule after a run of
    degenerate pivots so cycling cannot occur.
    """
    it = 0
    degenerate_run = 0
    bland = False
    m = tab.shape[0] - 1
    while it < max_iter:
        rc = tab[-1, :ncols]
        if bland:
            cand = np.flatnonzero(rc < -tol)
            if cand.size == 0:
                return "optimal", it
            col = int(cand[0])
        else:
            col = int(np.argmin(rc))
            if rc[col] >= -tol:
                return "optimal", it
        colv = tab[:m, col]
        pos = colv > PIVOT_TOL
        if not np.any(pos):
            # only tiny pivots left: accept them rather than misreport unboundedness
            pos = colv > tol
            if not np.any(pos):
                return "unbounded", it
        ratios = np.full(m, np.inf)
        ratios[pos] = tab[:m, -1][pos] / colv[pos]
        rmin = ratios.min()
        ties = np.flatnonzero(ratios <= rmin + tol * max(1.0, abs(rmin)))
        row = int(ties[np.argmin(np.asarray(basis)[ties])]) if len(ties) > 1 else int(ties[0])
        if rmin <= tol:
            degenerate_run += 1
            if degenerate_run > 20:
                bland = True
        else:
            degenerate_run = 0
        _pivot(tab, row, col)
        basis[row] = col
        it += 1
    raise NumericalFailure(f"simplex iteration limit ({max_iter}) reached")


def _dense_simplex(problem: LPProblem, tol_feas: float, max_iter: int) -> LPSolution:
    A, b, c, T, offset, const, m_in = _standard_form(problem)
    m, ns = A.shape
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    tol = 1e-11

    # phase 1: inequality rows with b >= 0 start on their slack, every other
    # row gets an artificial column
    slack0 = ns - m_in
    art = [r for r in range(m) if r >= m_in or neg[r]]
    na = len(art)
    tab = np.zeros((m + 1, ns + na + 1))
    tab[:m, :ns] = A
    tab[art, ns + np.arange(na)] = 1.0
    tab[:m, -1] = b
    tab[-1, :ns] = -A[art].sum(axis=0)
    tab[-1, -1] = -b[art].sum()
    basis = [slack0 + r for r in range(m)]
    for k, r in enumerate(art):
        basis[r] = ns + k
    status, it1 = _simplex_iterate(tab, basis, ns + na, max_iter, tol)
    if status != "optimal":
        raise NumericalFailure("phase 1 reported unbounded")
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    if -tab[-1, -1] > tol_feas * scale:
        return LPSolution(LPStatus.INFEASIBLE, iterations=it1)

    # drive remaining artificials out of the basis; drop redundant rows
    keep = []
    for r in range(m):
        if basis[r] >= ns:
            k = int(np.argmax(np.abs(tab[r, :ns])))
            if abs(tab[r, k]) > PIVOT_TOL:
                _pivot(tab, r, k)
                basis[r] = k
                keep.append(r)
        else:
            keep.append(r)
    tab = np.vstack([tab[keep][:, list(range(ns)) + [-1]], np.zeros((1, ns + 1))])
    basis = [basis[r] for r in keep]

    # phase 2
    tab[-1, :ns] = c
    tab[-1, -1] = 0.0
    for r, bcol in enumerate(basis):
        if tab[-1, bcol] != 0.0:
            tab[-1] -= tab[-1, bcol] * tab[r]
    status, it2 = _simplex_iterate(tab, basis, ns, max_iter, tol)
    if status == "unbounded":
        return LPSolution(LPStatus.UNBOUNDED, iterations=it1 + it2)

    s = np.zeros(ns)
    s[basis] = tab[:-1, -1]
    s = np.maximum(s, 0.0)
    z = offset + T @ s
    # snap to active bounds so bound-active minima are exact
    z = np.clip(z, problem.lb, problem.ub)
    return LPSolution(LPStatus.OPTIMAL, z, float(problem.cost @ z), it1 + it2)


# ---------------------------------------------------------------------------
# HiGHS
# ---------------------------------------------------------------------------


def _highs(problem: LPProblem, tol_feas: float, solver: str = "choose") -> LPSolution:
    """Solve with HiGHS.  ``solver="ipm"`` runs the interior point method
    without crossover, which is much faster on large degenerate LPs."""
    import highspy

    inf = highspy.kHighsInf
    n = problem.num_vars
    blocks = [sp.csr_matrix(problem.ineq_lhs).reshape(-1, n) if problem.ineq_rhs.size else None,
              sp.csr_matrix(problem.eq_lhs).reshape(-1, n) if problem.eq_rhs.size else None]
    blocks = [b for b in blocks if b is not None]
    A = sp.vstack(blocks).tocsc() if blocks else sp.csc_matrix((0, n))
    row_lo = np.concatenate([np.full(problem.ineq_rhs.size, -inf), problem.eq_rhs])
    row_hi = np.concatenate([problem.ineq_rhs, problem.eq_rhs])

    lp = highspy.HighsLp()
    lp.num_col_ = n
    lp.num_row_ = A.shape[0]
    lp.col_cost_ = np.asarray(problem.cost, float)
    lp.col_lower_ = np.where(np.isfinite(problem.lb), problem.lb, -inf)
    lp.col_upper_ = np.where(np.isfinite(problem.ub), problem.ub, inf)
    lp.row_lower_ = row_lo
    lp.row_upper_ = row_hi
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr
    lp.a_matrix_.index_ = A.indices
    lp.a_matrix_.value_ = A.data
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("random_seed", 0)
    h.setOptionValue("threads", 1)
    h.setOptionValue("primal_feasibility_tolerance", min(1e-7, max(tol_feas, 1e-10)))
    h.setOptionValue("solver", solver)
    if solver == "ipm":
        h.setOptionValue("run_crossover", "off")
    h.passModel(lp)
    h.run()
    status = h.getModelStatus()
    iters = int(h.getInfo().simplex_iteration_count + h.getInfo().ipm_iteration_count)
    ms = highspy.HighsModelStatus
    if status == ms.kOptimal:
        x = np.array(h.getSolution().col_value)
        return LPSolution(LPStatus.OPTIMAL, x, float(problem.cost @ x), iters)
    if status == ms.kUnbounded:
        return LPSolution(LPStatus.UNBOUNDED, iterations=iters)
    if status in (ms.kInfeasible, ms.kUnboundedOrInfeasible):
        # presolve occasionally reports an unbounded problem as infeasible;
        # a zero-cost solve settles feasibility
        if np.any(problem.cost != 0.0):
            zero = replace(problem, cost=np.zeros(n))
            if _highs(zero, tol_feas, solver).status == LPStatus.OPTIMAL:
                return LPSolution(LPStatus.UNBOUNDED, iterations=iters)
        return LPSolution(LPStatus.INFEASIBLE, iterations=iters)
    raise NumericalFailure(f"HiGHS: {h.modelStatusToString(status)}")


def lp_solve(problem: LPProblem, tol_feas: float = TOL_FEAS, method: str = "auto",
             max_iter: int = 5000) -> LPSolution:
    """Solve ``problem``.  ``method`` is "simplex", "highs", "highs-ipm" or "auto"."""
    if method == "auto":
        sparse = sp.issparse(problem.ineq_lhs) or sp.issparse(problem.eq_lhs)
        method = "highs" if sparse or 2 * problem.num_vars + problem.ineq_rhs.size > DENSE_LIMIT else "simplex"
    if method == "simplex":
        sol = _dense_simplex(problem, tol_feas, max_iter)
    elif method == "highs":
        sol = _highs(problem, tol_feas)
    elif method == "highs-ipm":
        sol = _highs(problem, tol_feas, solver="ipm")
    else:
        raise ValueError(f"unknown LP method {method!r}")
    if sol.optimal:
        viol = problem.violation(sol.point)
        scale = 1.0 + float(np.max(np.abs(sol.point), initial=0.0))
        if viol > max(tol_feas, 1e-7 if method.startswith("highs") else tol_feas) * scale:
            raise NumericalFailure(f"{method} returned a point violating constraints by {viol:.3e}")
    return sol


def lp_feasible(problem: LPProblem, tol_feas: float = TOL_FEAS, method: str = "auto") -> bool:
    zero = LPProblem(np.zeros(problem.num_vars), problem.ineq_lhs, problem.ineq_rhs,
                     problem.eq_lhs, problem.eq_rhs, problem.lb, problem.ub)
    return lp_solve(zero, tol_feas, method).optimal
