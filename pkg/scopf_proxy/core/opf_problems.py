"""Optimization problems of the dispatch model, assembled as QuadraticPrograms.

Inequality block order of every dispatch problem (DC-OPF and parametric)::

    [ -p <= 0 ;  p <= pmax ;  M A p <= fmax*alpha + M d ;  -M A p <= fmax*alpha - M d ]

so ``mu`` has ``2(g+l)`` entries. The monolithic SC-DCOPF stacks variables as
``[p, (p^k, s^k) for k in K]`` with the pre-contingency block first and, per
contingency, ``[-p^k ; p^k ; +flow ; -flow ; -s^k ; p^k - p <= rup ; p - p^k <= rdn]``.
Post-contingency subproblems use the same per-contingency order with ``p``
replaced by the fixed dispatch.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp

from ..config import SolverConfig
from ..utils.logger import get_logger
from ..utils.parallel import ordered_map
from . import qp_solver
from .contingency import Contingency, ContingencySet
from .errors import ConfigError, ContractViolationError, InfeasibleError, NumericalError
from .grid_model import Network
from .qp_solver import QpSolution, QuadraticProgram

logger = get_logger("scopf_proxy.opf")

PRE_FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class DispatchResult:
    p_star: np.ndarray
    objective: float
    line_flows: np.ndarray
    mu_star: np.ndarray
    lambda_star: float
    status: str = qp_solver.OPTIMAL
    qp: QuadraticProgram | None = field(default=None, repr=False)
    solution: QpSolution | None = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class PostLossResult:
    loss_value: float
    grad_p: np.ndarray
    per_contingency_shed: np.ndarray
    status: tuple[str, ...]
    shed_vectors: tuple[np.ndarray, ...] = field(default=(), repr=False)
    fictitious_shed: bool = False

    @property
    def feasible(self) -> bool:
        return all(s == qp_solver.OPTIMAL for s in self.status)


@dataclass(frozen=True, eq=False)
class ScdcopfResult:
    p_star: np.ndarray
    objective: float
    base_cost: float
    shed_cost: float
    line_flows: np.ndarray
    per_contingency_shed: np.ndarray
    post_dispatch: tuple[np.ndarray, ...] = field(repr=False)
    shed_vectors: tuple[np.ndarray, ...] = field(repr=False)
    qp: QuadraticProgram | None = field(default=None, repr=False)
    solution: QpSolution | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Pre-contingency problems
# ---------------------------------------------------------------------------


def _check_demand(net: Network, demand: np.ndarray) -> np.ndarray:
    demand = np.asarray(demand, dtype=np.float64)
    if demand.shape != (net.n_bus,):
        raise ConfigError("DIMENSION_MISMATCH", f"demand must have length {net.n_bus}, got {demand.shape}")
    return demand


def _dispatch_qp(net: Network, demand: np.ndarray, flow_limits: np.ndarray) -> QuadraticProgram:
    g = net.n_gen
    ma = net.ptdf @ net.gen_incidence
    md = net.ptdf @ demand
    G = np.vstack([-np.eye(g), np.eye(g), ma, -ma])
    h = np.concatenate([np.zeros(g), net.p_max, flow_limits + md, flow_limits - md])
    return QuadraticProgram.create(
        Q=np.diag(net.cost_quadratic),
        q=np.array(net.cost_linear),
        E=np.ones((1, g)),
        e=np.array([demand.sum()]),
        G=G,
        h=h,
    )


def build_dcopf(net: Network, demand: np.ndarray) -> QuadraticProgram:
    return _dispatch_qp(net, _check_demand(net, demand), np.array(net.flow_limits))


def clamp_alpha(net: Network, alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (net.n_line,):
        raise ConfigError("DIMENSION_MISMATCH", f"alpha must have length {net.n_line}, got {alpha.shape}")
    clipped = np.clip(alpha, 0.0, 1.0)
    if np.any(clipped != alpha):
        logger.warning(f"[OPF] alpha outside [0, 1] clamped ({int(np.sum(clipped != alpha))} entries)")
    return clipped


def build_parametric_dcopf(net: Network, demand: np.ndarray, alpha: np.ndarray) -> QuadraticProgram:
    alpha = clamp_alpha(net, alpha)
    return _dispatch_qp(net, _check_demand(net, demand), net.flow_limits * alpha)


def flow_limit_jacobian(net: Network) -> sp.csr_matrix:
    """d h / d alpha: entries fmax_j at rows 2g+j and 2g+l+j."""
    g, l = net.n_gen, net.n_line
    cols = np.arange(l)
    rows = np.concatenate([2 * g + cols, 2 * g + l + cols])
    vals = np.concatenate([net.flow_limits, net.flow_limits])
    return sp.csr_matrix((vals, (rows, np.concatenate([cols, cols]))), shape=(2 * (g + l), l))


def _dispatch_result(net: Network, demand: np.ndarray, qp: QuadraticProgram, sol: QpSolution) -> DispatchResult:
    p = sol.x_star
    return DispatchResult(
        p_star=p,
        objective=sol.objective,
        line_flows=net.line_flows(p, demand),
        mu_star=sol.ineq_duals,
        lambda_star=float(sol.eq_duals[0]),
        status=sol.status,
        qp=qp,
        solution=sol,
    )


def _raise_for_status(sol: QpSolution, what: str):
    if sol.status in (qp_solver.INFEASIBLE, qp_solver.UNBOUNDED):
        raise InfeasibleError(sol.status.upper(), f"{what} is {sol.status}")
    if sol.status != qp_solver.OPTIMAL:
        raise NumericalError("SOLVER_FAILURE", f"{what} failed: {sol.status}", sol.diagnostics)


def solve_dcopf(net: Network, demand: np.ndarray, solver: SolverConfig | None = None) -> DispatchResult:
    demand = _check_demand(net, demand)
    qp = build_dcopf(net, demand)
    sol = qp_solver.solve(qp, config=solver)
    _raise_for_status(sol, "DC-OPF")
    return _dispatch_result(net, demand, qp, sol)


def solve_parametric_dcopf(net: Network, demand: np.ndarray, alpha: np.ndarray, solver: SolverConfig | None = None) -> DispatchResult:
    demand = _check_demand(net, demand)
    qp = build_parametric_dcopf(net, demand, alpha)
    sol = qp_solver.solve(qp, config=solver)
    _raise_for_status(sol, "parametric DC-OPF")
    return _dispatch_result(net, demand, qp, sol)


def pre_contingency_violation(net: Network, demand: np.ndarray, p: np.ndarray) -> float:
    """Largest violation of balance, generator bounds and line limits."""
    p = np.asarray(p, dtype=np.float64)
    flows = net.line_flows(p, demand)
    return float(
        max(
            abs(p.sum() - np.sum(demand)),
            np.max(-p, initial=0.0),
            np.max(p - net.p_max, initial=0.0),
            np.max(np.abs(flows) - net.flow_limits, initial=0.0),
        )
    )


def line_violations(net: Network, demand: np.ndarray, p: np.ndarray, tol: float = PRE_FEASIBILITY_TOL) -> np.ndarray:
    return np.abs(net.line_flows(p, demand)) > net.flow_limits + tol


def binding_constraints(net: Network, result: DispatchResult, tol: float = 1e-7) -> list[str]:
    slack = result.qp.h - result.qp.G @ result.p_star
    names = (
        [f"p_min:gen{gen.id}" for gen in net.generators]
        + [f"p_max:gen{gen.id}" for gen in net.generators]
        + [f"flow+:line{ln.id}" for ln in net.lines]
        + [f"flow-:line{ln.id}" for ln in net.lines]
    )
    return [name for name, s, mu in zip(names, slack, result.mu_star) if s <= tol and mu > tol]


def dispatch_frame(net: Network, p: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "generator_id": [gen.id for gen in net.generators],
            "bus": [gen.bus for gen in net.generators],
            "p_pu": np.asarray(p, dtype=np.float64),
            "p_mw": np.asarray(p, dtype=np.float64) * net.base_mva,
        }
    )


# ---------------------------------------------------------------------------
# SC-DCOPF
# ---------------------------------------------------------------------------


def _contingency_rows(net: Network, cont: Contingency, demand: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray, int]:
    """Per-contingency rows over local variables (p^k, s^k).

    Returns (G_local, G_pre_coupling, h, n_rows); ramp rows couple to p.
    """
    g, n = net.n_gen, net.n_bus
    mk = cont.ptdf_k
    lk = mk.shape[0]
    mka = mk @ net.gen_incidence
    mkd = mk @ demand
    eye_g = sp.identity(g, format="csr")
    zeros_gn = sp.csr_matrix((g, n))

    local = sp.vstack(
        [
            sp.hstack([-eye_g, zeros_gn]),
            sp.hstack([eye_g, zeros_gn]),
            sp.hstack([sp.csr_matrix(mka), sp.csr_matrix(mk)]),
            sp.hstack([sp.csr_matrix(-mka), sp.csr_matrix(-mk)]),
            sp.hstack([sp.csr_matrix((n, g)), -sp.identity(n, format="csr")]),
            sp.hstack([eye_g, zeros_gn]),
            sp.hstack([-eye_g, zeros_gn]),
        ],
        format="csr",
    )
    rows = 2 * g + 2 * lk + n + 2 * g
    coupling = sp.vstack([sp.csr_matrix((2 * g + 2 * lk + n, g)), -eye_g, eye_g], format="csr")
    h = np.concatenate(
        [
            np.zeros(g),
            net.p_max,
            cont.limits_k + mkd,
            cont.limits_k - mkd,
            np.zeros(n),
            net.ramp_up,
            net.ramp_down,
        ]
    )
    return local, coupling, h, rows


def build_scdcopf(net: Network, demand: np.ndarray, cset: ContingencySet, rho: float) -> QuadraticProgram:
    demand = _check_demand(net, demand)
    if len(cset) == 0:
        raise ConfigError("EMPTY_CONTINGENCY_SET", "SC-DCOPF needs at least one contingency")
    if rho < 0:
        raise ConfigError("INVALID_VALUE", f"rho must be non-negative, got {rho}")
    g, n, K = net.n_gen, net.n_bus, len(cset)
    nk = g + n
    nvar = g + K * nk

    base = build_dcopf(net, demand)
    q = np.concatenate([base.q] + [np.concatenate([np.zeros(g), np.full(n, rho / K)]) for _ in range(K)])
    Q = sp.block_diag([sp.diags(net.cost_quadratic), sp.csr_matrix((K * nk, K * nk))], format="csr")

    e_rows = [sp.hstack([sp.csr_matrix(np.ones((1, g))), sp.csr_matrix((1, K * nk))])]
    e_vals = [demand.sum()]
    g_rows = [sp.hstack([sp.csr_matrix(base.G), sp.csr_matrix((base.m_ineq, K * nk))])]
    h_vals = [base.h]
    for k, cont in enumerate(cset):
        local, coupling, h_k, rows = _contingency_rows(net, cont, demand)
        before, after = k * nk, (K - k - 1) * nk
        e_row = np.zeros((1, nvar))
        e_row[0, g + k * nk:g + (k + 1) * nk] = 1.0
        e_rows.append(sp.csr_matrix(e_row))
        e_vals.append(demand.sum())
        blocks = [coupling]
        if before:
            blocks.append(sp.csr_matrix((rows, before)))
        blocks.append(local)
        if after:
            blocks.append(sp.csr_matrix((rows, after)))
        g_rows.append(sp.hstack(blocks))
        h_vals.append(h_k)

    return QuadraticProgram.create(
        Q=Q,
        q=q,
        E=sp.vstack(e_rows, format="csr"),
        e=np.array(e_vals),
        G=sp.vstack(g_rows, format="csr"),
        h=np.concatenate(h_vals),
    )


def solve_scdcopf(net: Network, demand: np.ndarray, cset: ContingencySet, rho: float, solver: SolverConfig | None = None) -> ScdcopfResult:
    demand = _check_demand(net, demand)
    qp = build_scdcopf(net, demand, cset, rho)
    sol = qp_solver.solve(qp, config=solver)
    _raise_for_status(sol, "SC-DCOPF")

    g, n, K = net.n_gen, net.n_bus, len(cset)
    x = sol.x_star
    p = x[:g]
    post, shed = [], []
    for k in range(K):
        off = g + k * (g + n)
        post.append(x[off:off + g])
        shed.append(x[off + g:off + g + n])
    per_shed = np.array([s.sum() for s in shed])
    base_cost = net.generation_cost(p)
    return ScdcopfResult(
        p_star=p,
        objective=sol.objective,
        base_cost=base_cost,
        shed_cost=float(rho / K * per_shed.sum()),
        line_flows=net.line_flows(p, demand),
        per_contingency_shed=per_shed,
        post_dispatch=tuple(post),
        shed_vectors=tuple(shed),
        qp=qp,
        solution=sol,
    )


def model_size(net: Network, cset: ContingencySet) -> dict[str, int]:
    g, n, l, K = net.n_gen, net.n_bus, net.n_line, len(cset)
    per_k = sum(2 * g + 2 * c.ptdf_k.shape[0] + n + 2 * g for c in cset)
    return {
        "buses": n,
        "lines": l,
        "generators": g,
        "contingencies": K,
        "variables": g + K * (g + n),
        "equality_constraints": 1 + K,
        "inequality_constraints": 2 * (g + l) + per_k,
        "constraints": 1 + K + 2 * (g + l) + per_k,
    }


# ---------------------------------------------------------------------------
# Post-contingency loss
# ---------------------------------------------------------------------------


def build_post_contingency_lp(net: Network, demand: np.ndarray, cont: Contingency, weight: float, p_star: np.ndarray) -> QuadraticProgram:
    """LP over (p^k, s^k) with the pre-contingency dispatch fixed as data."""
    g, n = net.n_gen, net.n_bus
    local, coupling, h, _ = _contingency_rows(net, cont, demand)
    h = h - coupling @ p_star
    E = np.concatenate([np.ones(g), np.ones(n)])[None, :]
    return QuadraticProgram.create(
        Q=np.zeros((g + n, g + n)),
        q=np.concatenate([np.zeros(g), np.full(n, weight)]),
        E=E,
        e=np.array([demand.sum()]),
        G=local.toarray(),
        h=h,
    )


def _ramp_duals(net: Network, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = net.n_gen
    up = mu[-2 * g:-g]
    down = mu[-g:]
    return up, down


def post_contingency_loss(
    net: Network,
    demand: np.ndarray,
    cset: ContingencySet,
    rho: float,
    p_star: np.ndarray,
    *,
    solver: SolverConfig | None = None,
    workers: int = 1,
    check_pre: bool = True,
) -> PostLossResult:
    demand = _check_demand(net, demand)
    p_star = np.asarray(p_star, dtype=np.float64)
    if len(cset) == 0:
        raise ConfigError("EMPTY_CONTINGENCY_SET", "post-contingency loss needs at least one contingency")
    if check_pre:
        violation = pre_contingency_violation(net, demand, p_star)
        if violation > PRE_FEASIBILITY_TOL:
            raise ContractViolationError(
                "PRE_CONTINGENCY_INFEASIBLE",
                f"dispatch violates pre-contingency constraints by {violation:.3e}",
                {"violation": violation},
            )

    weight = rho / len(cset)

    def _solve_one(cont: Contingency):
        qp = build_post_contingency_lp(net, demand, cont, weight, p_star)
        return qp_solver.solve(qp, config=solver)

    sols = ordered_map(_solve_one, list(cset), workers)
    statuses = tuple(s.status for s in sols)
    g, n = net.n_gen, net.n_bus

    if any(s != qp_solver.OPTIMAL for s in statuses):
        bad = [c.outaged_line for c, s in zip(cset, statuses) if s != qp_solver.OPTIMAL]
        logger.warning(f"[OPF] post-contingency subproblem not solved for outages {bad}: {statuses}")
        return PostLossResult(
            loss_value=float("inf"),
            grad_p=np.full(g, np.nan),
            per_contingency_shed=np.array([s.x_star[g:].sum() if s.optimal else np.nan for s in sols]),
            status=statuses,
        )

    loss = 0.0
    grad = np.zeros(g)
    sheds = []
    # fixed summation order
    for cont, sol in zip(cset, sols):
        loss += sol.objective
        up, down = _ramp_duals(net, sol.ineq_duals)
        grad += down - up
        sheds.append(sol.x_star[g:g + n])

    fictitious = any(bool(np.any(s > demand + 1e-9)) for s in sheds)
    if fictitious:
        logger.warning("[OPF] shed exceeds nodal demand at some bus (fictitious negative demand)")
    return PostLossResult(
        loss_value=max(float(loss), 0.0),
        grad_p=grad,
        per_contingency_shed=np.array([s.sum() for s in sheds]),
        status=statuses,
        shed_vectors=tuple(sheds),
        fictitious_shed=fictitious,
    )


def post_contingency_loss_joint(
    net: Network,
    demand: np.ndarray,
    cset: ContingencySet,
    rho: float,
    p_star: np.ndarray,
    solver: SolverConfig | None = None,
) -> tuple[float, np.ndarray]:
    """Joint form with explicit fixing constraint ``p = p_star``; returns (loss, -nu)."""
    demand = _check_demand(net, demand)
    p_star = np.asarray(p_star, dtype=np.float64)
    g, n, K = net.n_gen, net.n_bus, len(cset)
    nk = g + n
    nvar = g + K * nk

    q = np.concatenate([np.zeros(g)] + [np.concatenate([np.zeros(g), np.full(n, rho / K)]) for _ in range(K)])
    E = np.zeros((g + K, nvar))
    E[:g, :g] = np.eye(g)
    e = np.concatenate([p_star, np.full(K, demand.sum())])
    g_rows, h_vals = [], []
    for k, cont in enumerate(cset):
        E[g + k, g + k * nk:g + (k + 1) * nk] = 1.0
        local, coupling, h_k, rows = _contingency_rows(net, cont, demand)
        block = np.zeros((rows, nvar))
        block[:, :g] = coupling.toarray()
        block[:, g + k * nk:g + (k + 1) * nk] = local.toarray()
        g_rows.append(block)
        h_vals.append(h_k)

    qp = QuadraticProgram.create(Q=np.zeros((nvar, nvar)), q=q, E=E, e=e, G=np.vstack(g_rows), h=np.concatenate(h_vals))
    sol = qp_solver.solve(qp, config=solver)
    _raise_for_status(sol, "joint post-contingency problem")
    return sol.objective, -sol.eq_duals[:g]

