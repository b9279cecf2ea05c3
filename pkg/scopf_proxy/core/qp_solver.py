"""Convex QP solver with dual extraction.

Problems are in the form::

    min  0.5 x'Qx + q'x   s.t.  E x = e,  G x <= h

with Lagrangian ``L = 0.5 x'Qx + q'x + lam'(Ex - e) + mu'(Gx - h)``, ``mu >= 0``.
The solver is a Mehrotra predictor-corrector interior-point method on the
reduced KKT system, followed by an active-set polish that solves the KKT
equations of the identified active set exactly. When the interior-point
method does not converge the problem is classified with a HiGHS LP.
Linear programs (``Q = 0``) are solved by HiGHS dual simplex directly, which
returns a vertex with exactly complementary duals.
"""

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy.optimize import linprog

from ..config import SolverConfig
from ..utils.logger import get_logger

logger = get_logger("scopf_proxy.qp")

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"

_DENSE_LIMIT = 400
_REG = 1e-12
_REFINE_STEPS = 3
_MAX_SCALING = 1e20


def _as_matrix(m: Any, rows: int, cols: int) -> np.ndarray | sp.csr_matrix:
    if m is None:
        return np.zeros((rows, cols))
    if sp.issparse(m):
        return sp.csr_matrix(m, dtype=np.float64)
    return np.atleast_2d(np.asarray(m, dtype=np.float64)).reshape(rows, cols)


def _as_vector(v: Any, size: int) -> np.ndarray:
    if v is None:
        return np.zeros(size)
    return np.asarray(v, dtype=np.float64).reshape(size)


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    Q: Any
    q: np.ndarray
    E: Any
    e: np.ndarray
    G: Any
    h: np.ndarray

    @classmethod
    def create(cls, Q=None, q=None, E=None, e=None, G=None, h=None) -> "QuadraticProgram":
        n = len(np.asarray(q)) if q is not None else int(Q.shape[0])
        m_e = len(np.asarray(e)) if e is not None else 0
        m_i = len(np.asarray(h)) if h is not None else 0
        qp = cls(
            Q=_as_matrix(Q, n, n),
            q=_as_vector(q, n),
            E=_as_matrix(E, m_e, n),
            e=_as_vector(e, m_e),
            G=_as_matrix(G, m_i, n),
            h=_as_vector(h, m_i),
        )
        qp.validate()
        return qp

    @property
    def n(self) -> int:
        return len(self.q)

    @property
    def m_eq(self) -> int:
        return len(self.e)

    @property
    def m_ineq(self) -> int:
        return len(self.h)

    @property
    def is_sparse(self) -> bool:
        return any(sp.issparse(m) for m in (self.Q, self.E, self.G))

    @property
    def is_linear(self) -> bool:
        Q = self.Q
        return (Q.count_nonzero() if sp.issparse(Q) else np.count_nonzero(Q)) == 0

    def validate(self):
        n = self.n
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {self.Q.shape}")
        if self.E.shape != (self.m_eq, n):
            raise ValueError(f"E must be {self.m_eq}x{n}, got {self.E.shape}")
        if self.G.shape != (self.m_ineq, n):
            raise ValueError(f"G must be {self.m_ineq}x{n}, got {self.G.shape}")
        asym = abs(self.Q - self.Q.T)
        if (asym.max() if asym.size else 0.0) > 1e-12:
            raise ValueError("Q must be symmetric")

    def dense(self, name: str) -> np.ndarray:
        m = getattr(self, name)
        return m.toarray() if sp.issparse(m) else m

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.q @ x)


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    complementarity: float
    dual_feasibility: float = 0.0

    def max(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_ineq, self.complementarity, self.dual_feasibility)

    def within(self, tol: float) -> bool:
        return self.max() <= tol

    def to_dict(self) -> dict[str, float]:
        return {
            "stationarity": self.stationarity,
            "primal_eq": self.primal_eq,
            "primal_ineq": self.primal_ineq,
            "complementarity": self.complementarity,
            "dual_feasibility": self.dual_feasibility,
        }


@dataclass(frozen=True, eq=False)
class QpSolution:
    x_star: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    objective: float
    status: str
    kkt_residuals: KktResiduals | None = None
    iterations: int = 0
    polished: bool = False
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def check_kkt(qp: QuadraticProgram, sol: QpSolution) -> KktResiduals:
    x, lam, mu = sol.x_star, sol.eq_duals, sol.ineq_duals
    grad = qp.Q @ x + qp.q
    if qp.m_eq:
        grad = grad + qp.E.T @ lam
    if qp.m_ineq:
        grad = grad + qp.G.T @ mu
    slack = qp.G @ x - qp.h if qp.m_ineq else np.zeros(0)
    return KktResiduals(
        stationarity=float(np.max(np.abs(grad))) if grad.size else 0.0,
        primal_eq=float(np.max(np.abs(qp.E @ x - qp.e))) if qp.m_eq else 0.0,
        primal_ineq=float(max(0.0, slack.max())) if slack.size else 0.0,
        complementarity=float(np.max(np.abs(mu * slack))) if slack.size else 0.0,
        dual_feasibility=float(max(0.0, -mu.min())) if mu.size else 0.0,
    )


def kkt_tolerance(qp: QuadraticProgram, tol: float) -> float:
    """Interior-point stopping tolerance, scaled by the cost magnitude.

    Only the stopping test is scaled; a returned ``optimal`` solution always
    meets ``tol`` itself on every residual.
    """
    scale = float(np.max(np.abs(qp.q))) if qp.n else 0.0
    return tol * max(1.0, scale)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


class _ReducedKkt:
    """Factorized ``[[Q + G'DG, E'], [E, 0]]`` with iterative refinement."""

    def __init__(self, qp: QuadraticProgram, d: np.ndarray):
        n, m_e = qp.n, qp.m_eq
        self.sparse_mode = qp.is_sparse and (n + m_e) > _DENSE_LIMIT
        if self.sparse_mode:
            G = sp.csr_matrix(qp.G)
            H = sp.csr_matrix(qp.Q) + G.T @ sp.diags(d) @ G
            E = sp.csr_matrix(qp.E)
            K = sp.bmat([[H, E.T], [E, None]], format="csc") if m_e else sp.csc_matrix(H)
            reg = sp.diags(np.concatenate([np.full(n, _REG), np.full(m_e, -_REG)]))
            self.K = K
            self._lu = scipy.sparse.linalg.splu(sp.csc_matrix(K + reg))
            self._solve = self._lu.solve
        else:
            G = qp.dense("G")
            H = qp.dense("Q") + G.T @ (d[:, None] * G)
            E = qp.dense("E")
            K = np.block([[H, E.T], [E, np.zeros((m_e, m_e))]]) if m_e else H
            self.K = K
            K_reg = K + np.diag(np.concatenate([np.full(n, _REG), np.full(m_e, -_REG)]))
            self._lu = scipy.linalg.lu_factor(K_reg, check_finite=True)
            self._solve = lambda rhs: scipy.linalg.lu_solve(self._lu, rhs)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._solve(rhs)
        for _ in range(_REFINE_STEPS):
            r = rhs - self.K @ x
            x = x + self._solve(r)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("non-finite KKT solution")
        return x


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _initial_point(qp: QuadraticProgram) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n, m_e = qp.n, qp.m_eq
    kkt = _ReducedKkt(qp, np.ones(qp.m_ineq))
    rhs = np.concatenate([-qp.q + qp.G.T @ qp.h, qp.e])
    sol = kkt.solve(rhs)
    x, y = sol[:n], sol[n:n + m_e]
    s = qp.h - qp.G @ x
    z = -s.copy()
    a_p = -float(s.min())
    if a_p >= 0:
        s = s + 1.0 + a_p
    a_d = -float(z.min())
    if a_d >= 0:
        z = z + 1.0 + a_d
    return x, y, s, z


# ---------------------------------------------------------------------------
# Interior point + polish
# ---------------------------------------------------------------------------


def _interior_point(qp: QuadraticProgram, tol: float, max_iter: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int, bool]:
    """Returns the last iterate ``(x, y, s, z, iterations, converged)``."""
    n, m_e, m = qp.n, qp.m_eq, qp.m_ineq
    x, y, s, z = _initial_point(qp)
    G, E, Q = qp.G, qp.E, qp.Q

    it = 0
    for it in range(1, max_iter + 1):
        rd = Q @ x + qp.q + E.T @ y + G.T @ z
        rp = E @ x - qp.e
        ri = G @ x + s - qp.h
        mu = float(s @ z) / m
        res = max(
            float(np.max(np.abs(rd))),
            float(np.max(np.abs(rp))) if m_e else 0.0,
            float(np.max(np.abs(ri))),
        )
        if res <= 0.1 * tol and float(np.max(s * z)) <= 0.1 * tol:
            return x, y, s, z, it, True
        if not np.isfinite(res) or np.max(np.abs(x)) > 1e14 or np.max(z) > 1e14:
            logger.debug(f"[QP] interior point diverging at iteration {it}")
            return x, y, s, z, it, False

        # capped so that vanishing slacks keep the KKT matrix finite
        d = np.minimum(z / s, _MAX_SCALING)
        kkt = _ReducedKkt(qp, d)

        def direction(r_cc: np.ndarray):
            rhs = np.concatenate([-rd - G.T @ (d * ri - r_cc / s), -rp])
            sol = kkt.solve(rhs)
            dx, dy = sol[:n], sol[n:n + m_e]
            dz = d * (G @ dx + ri) - r_cc / s
            ds = (-r_cc - s * dz) / z
            return dx, dy, ds, dz

        # predictor
        dx, dy, ds, dz = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        dx, dy, ds, dz = direction(s * z + ds * dz - sigma * mu)
        eta = max(0.99, 1.0 - mu)
        alpha = min(1.0, eta * min(_max_step(s, ds), _max_step(z, dz)))
        if alpha < 1e-12:
            logger.debug(f"[QP] interior point stalled at iteration {it}")
            return x, y, s, z, it, False

        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz
        s = np.maximum(s, 1e-200)
        z = np.maximum(z, 1e-200)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s)) and np.all(np.isfinite(z))):
            raise np.linalg.LinAlgError(f"non-finite iterate at iteration {it}")

    return x, y, s, z, it, False


def _polish(qp: QuadraticProgram, x: np.ndarray, s: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    """Solve the KKT equations of the active set {i : z_i > s_i} exactly."""
    n, m_e = qp.n, qp.m_eq
    active = np.flatnonzero(z > s) if qp.m_ineq else np.zeros(0, dtype=np.int64)
    Q, E, G = qp.dense("Q"), qp.dense("E"), qp.dense("G")
    Ga = G[active]
    k = len(active)
    K = np.block(
        [
            [Q, E.T, Ga.T],
            [E, np.zeros((m_e, m_e)), np.zeros((m_e, k))],
            [Ga, np.zeros((k, m_e)), np.zeros((k, k))],
        ]
    )
    rhs = np.concatenate([-qp.q, qp.e, qp.h[active]])
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=True)
        sol = scipy.linalg.lu_solve(lu, rhs)
        for _ in range(_REFINE_STEPS):
            sol = sol + scipy.linalg.lu_solve(lu, rhs - K @ sol)
        if not np.all(np.isfinite(sol)) or np.max(np.abs(K @ sol - rhs)) > 1e-9 * max(1.0, np.max(np.abs(rhs))):
            raise np.linalg.LinAlgError("inaccurate")
    except (np.linalg.LinAlgError, ValueError):
        sol = scipy.linalg.lstsq(K, rhs, cond=None, lapack_driver="gelsd")[0]
    x_p = sol[:n]
    lam = sol[n:n + m_e]
    mu = np.zeros(qp.m_ineq)
    mu[active] = sol[n + m_e:]
    return x_p, lam, mu


def _classify(qp: QuadraticProgram) -> str:
    E = qp.E if qp.m_eq else None
    G = qp.G if qp.m_ineq else None
    feas = linprog(
        np.zeros(qp.n),
        A_ub=G,
        b_ub=qp.h if qp.m_ineq else None,
        A_eq=E,
        b_eq=qp.e if qp.m_eq else None,
        bounds=(None, None),
        method="highs",
    )
    if feas.status == 2:
        return INFEASIBLE
    if feas.status != 0:
        return NUMERICAL_FAILURE
    # a recession direction with Qd = 0 and negative cost means the QP is unbounded
    Qd = qp.dense("Q")
    A_eq = np.vstack([qp.dense("E"), Qd]) if qp.m_eq else Qd
    ray = linprog(
        qp.q,
        A_ub=G,
        b_ub=np.zeros(qp.m_ineq) if qp.m_ineq else None,
        A_eq=A_eq,
        b_eq=np.zeros(A_eq.shape[0]),
        bounds=(-1.0, 1.0),
        method="highs",
    )
    if ray.status == 0 and ray.fun < -1e-9:
        return UNBOUNDED
    return NUMERICAL_FAILURE


def _solution(qp: QuadraticProgram, x, lam, mu, status: str, **kw) -> QpSolution:
    sol = QpSolution(x, lam, mu, qp.objective(x), status, **kw)
    return replace(sol, kkt_residuals=check_kkt(qp, sol))


def _failed(qp: QuadraticProgram, status: str, **diagnostics) -> QpSolution:
    nan_x = np.full(qp.n, np.nan)
    return QpSolution(nan_x, np.full(qp.m_eq, np.nan), np.full(qp.m_ineq, np.nan), float("nan"), status, diagnostics=diagnostics)


def _solve_lp(qp: QuadraticProgram, tol: float) -> QpSolution:
    """HiGHS dual simplex for ``Q = 0``; marginals are sensitivities, so both dual blocks flip sign."""
    hi_tol = max(1e-10, 0.1 * tol)
    res = linprog(
        qp.q,
        A_ub=qp.G if qp.m_ineq else None,
        b_ub=qp.h if qp.m_ineq else None,
        A_eq=qp.E if qp.m_eq else None,
        b_eq=qp.e if qp.m_eq else None,
        bounds=(None, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": hi_tol, "dual_feasibility_tolerance": hi_tol},
    )
    if res.status != 0:
        status = {2: INFEASIBLE, 3: UNBOUNDED}.get(res.status) or _classify(qp)
        return _failed(qp, status, reason=res.message, highs_status=int(res.status))
    lam = -np.asarray(res.eqlin.marginals, dtype=np.float64) if qp.m_eq else np.zeros(0)
    mu = -np.asarray(res.ineqlin.marginals, dtype=np.float64) if qp.m_ineq else np.zeros(0)
    sol = _solution(qp, np.asarray(res.x, dtype=np.float64), lam, mu, OPTIMAL, iterations=int(res.nit))
    if sol.kkt_residuals.within(tol):
        return sol
    return replace(sol, status=NUMERICAL_FAILURE, diagnostics={"residuals": sol.kkt_residuals.to_dict(), "tolerance": tol})


def solve(qp: QuadraticProgram, tol: float | None = None, max_iter: int | None = None, config: SolverConfig | None = None) -> QpSolution:
    config = config or SolverConfig()
    tol = config.tol if tol is None else tol
    max_iter = config.max_iter if max_iter is None else max_iter

    if qp.is_linear:
        return _solve_lp(qp, tol)

    if qp.m_ineq == 0:
        cand = _solution(qp, *_polish(qp, np.zeros(qp.n), np.zeros(0), np.zeros(0)), OPTIMAL, polished=True)
        if cand.kkt_residuals.within(tol):
            return cand
        return _failed(qp, _classify(qp), reason="equality-constrained KKT system has no solution")

    stop = kkt_tolerance(qp, tol)
    try:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            x, y, s, z, iters, converged = _interior_point(qp, stop, max_iter)
    except (np.linalg.LinAlgError, RuntimeError, ValueError, FloatingPointError) as e:
        logger.debug(f"[QP] interior point broke down: {e}")
        status = _classify(qp)
        return _failed(qp, status, reason=str(e), stage="interior_point")

    raw = _solution(qp, x, y, z, OPTIMAL, iterations=iters)
    try:
        polished = _polish(qp, x, s, z)
    except (np.linalg.LinAlgError, ValueError):
        polished = None
    if polished is not None:
        cand = _solution(qp, *polished, OPTIMAL, iterations=iters, polished=True)
        if cand.kkt_residuals.within(tol) and cand.objective <= raw.objective + stop:
            return cand

    if raw.kkt_residuals.within(tol):
        return raw

    if not converged:
        status = _classify(qp)
        if status != NUMERICAL_FAILURE:
            logger.debug(f"[QP] classified as {status} after {iters} iterations")
            return _failed(qp, status, iterations=iters, reason="interior point did not converge")

    return replace(
        raw,
        status=NUMERICAL_FAILURE,
        diagnostics={"iterations": iters, "converged": converged, "residuals": raw.kkt_residuals.to_dict(), "tolerance": tol},
    )
