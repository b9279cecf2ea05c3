"""Backward pass through the parametric DC-OPF.

Differentiating the KKT conditions with respect to ``h`` only gives::

    Gamma [dp; dlam; dmu] = [0; 0; diag(mu) dh]
    Gamma = [[Q, E', G'], [E, 0, 0], [diag(mu) G, 0, diag(Gp - h)]]

For an incoming cotangent ``g`` on ``p`` the adjoint ``Gamma u = [g; 0; 0]``
yields ``d loss / d h = u_mu`` directly: the ``diag(mu)`` factor of the
transposed system is absorbed into ``u_mu`` since
``Gamma' = S^-1 Gamma S`` with ``S = diag(I, I, diag(mu))``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ..utils.logger import get_logger
from .errors import ContractViolationError, DegeneratePointError
from .grid_model import Network
from .opf_problems import DispatchResult, flow_limit_jacobian
from .qp_solver import QpSolution, QuadraticProgram

logger = get_logger("scopf_proxy.diff")

CONDITION_LIMIT = 1e12
DAMPING = 1e-10
ACTIVE_THRESHOLD = 1e-9


@dataclass(frozen=True, eq=False)
class LayerTape:
    qp: QuadraticProgram
    sol: QpSolution
    dh_dalpha: sp.csr_matrix = field(repr=False)

    def __post_init__(self):
        if not self.sol.optimal:
            raise ContractViolationError("NOT_OPTIMAL", f"layer tape needs an optimal solution, got {self.sol.status}")

    @property
    def mu(self) -> np.ndarray:
        return self.sol.ineq_duals

    def active_set(self) -> np.ndarray:
        """Diagnostics only; Gamma always uses the raw duals."""
        return np.flatnonzero(self.mu > ACTIVE_THRESHOLD)


@dataclass(frozen=True, eq=False)
class GammaSystem:
    gamma: np.ndarray = field(repr=False)
    n: int
    m_eq: int
    m_ineq: int
    regularization_used: float = 0.0
    condition: float = float("nan")
    lu: tuple | None = field(default=None, repr=False)
    least_squares: bool = False

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.lu is not None:
            return scipy.linalg.lu_solve(self.lu, rhs)
        matrix = self._damped()
        sol = scipy.linalg.lstsq(matrix, rhs, lapack_driver="gelsd")[0]
        if not np.all(np.isfinite(sol)):
            raise DegeneratePointError("DEGENERATE_POINT", "least-squares adjoint solve produced non-finite values")
        return sol

    def _damped(self) -> np.ndarray:
        if not self.regularization_used:
            return self.gamma
        k = self.n + self.m_eq
        damped = self.gamma.copy()
        idx = np.arange(k, k + self.m_ineq)
        damped[idx, idx] += self.regularization_used
        return damped

    def split(self, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n, m_e = self.n, self.m_eq
        return vec[:n], vec[n:n + m_e], vec[n + m_e:]


def make_tape(net: Network, result: DispatchResult) -> LayerTape:
    return LayerTape(result.qp, result.solution, flow_limit_jacobian(net))


def grad_value_wrt_h(tape: LayerTape) -> np.ndarray:
    return -tape.mu


def grad_pre_wrt_alpha(tape: LayerTape) -> np.ndarray:
    return tape.dh_dalpha.T @ grad_value_wrt_h(tape)


def assemble_gamma(qp: QuadraticProgram, sol: QpSolution) -> np.ndarray:
    Q, E, G = qp.dense("Q"), qp.dense("E"), qp.dense("G")
    n, m_e, m_i = qp.n, qp.m_eq, qp.m_ineq
    mu = sol.ineq_duals
    slack = G @ sol.x_star - qp.h
    return np.block(
        [
            [Q, E.T, G.T],
            [E, np.zeros((m_e, m_e)), np.zeros((m_e, m_i))],
            [mu[:, None] * G, np.zeros((m_i, m_e)), np.diag(slack)],
        ]
    )


def _condition(matrix: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        c = float(np.linalg.cond(matrix))
    return c if np.isfinite(c) else float("inf")


def build_gamma(tape: LayerTape) -> GammaSystem:
    qp = tape.qp
    gamma = assemble_gamma(qp, tape.sol)
    dims = {"n": qp.n, "m_eq": qp.m_eq, "m_ineq": qp.m_ineq}

    cond = _condition(gamma)
    if cond <= CONDITION_LIMIT:
        return GammaSystem(gamma, **dims, condition=cond, lu=scipy.linalg.lu_factor(gamma))

    damped = GammaSystem(gamma, **dims, regularization_used=DAMPING)._damped()
    cond_d = _condition(damped)
    logger.info(f"[Diff] Gamma ill-conditioned ({cond:.2e}); damping complementarity block by {DAMPING:g}")
    if cond_d <= CONDITION_LIMIT:
        return GammaSystem(gamma, **dims, regularization_used=DAMPING, condition=cond_d, lu=scipy.linalg.lu_factor(damped))

    logger.warning(f"[Diff] damped Gamma still ill-conditioned ({cond_d:.2e}); using least squares")
    return GammaSystem(gamma, **dims, regularization_used=DAMPING, condition=cond_d, least_squares=True)


def solve_adjoint(gs: GammaSystem, incoming: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    incoming = np.asarray(incoming, dtype=np.float64)
    if incoming.shape != (gs.n,):
        raise ContractViolationError("DIMENSION_MISMATCH", f"incoming cotangent must have length {gs.n}")
    rhs = np.concatenate([incoming, np.zeros(gs.m_eq + gs.m_ineq)])
    u = gs._solve(rhs)
    if gs.least_squares:
        resid = np.max(np.abs(gs._damped() @ u - rhs), initial=0.0)
        if resid > 1e-6 * max(1.0, np.max(np.abs(rhs), initial=0.0)):
            raise DegeneratePointError("DEGENERATE_POINT", f"adjoint system unresolved after damping (residual {resid:.2e})")
    return gs.split(u)


def grad_post_wrt_alpha(tape: LayerTape, gs: GammaSystem, grad_p: np.ndarray) -> np.ndarray:
    _, _, u_mu = solve_adjoint(gs, grad_p)
    return tape.dh_dalpha.T @ u_mu


def forward_sensitivity(tape: LayerTape, gs: GammaSystem, dh: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directional derivative of (p, lam, mu) for a perturbation ``dh`` of the inequality bounds."""
    dh = np.asarray(dh, dtype=np.float64)
    rhs = np.concatenate([np.zeros(gs.n + gs.m_eq), tape.mu * dh])
    return gs.split(gs._solve(rhs))


def total_gradient(tape: LayerTape, gs: GammaSystem, grad_p: np.ndarray) -> np.ndarray:
    return grad_pre_wrt_alpha(tape) + grad_post_wrt_alpha(tape, gs, grad_p)
