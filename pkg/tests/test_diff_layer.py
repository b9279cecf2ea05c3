import numpy as np
import pytest

from helpers import central_difference, relative_error
from scopf_proxy.core import qp_solver
from scopf_proxy.core.contingency import build_contingency_set
from scopf_proxy.core.diff_layer import (
    LayerTape,
    build_gamma,
    forward_sensitivity,
    grad_post_wrt_alpha,
    grad_pre_wrt_alpha,
    make_tape,
    solve_adjoint,
    total_gradient,
)
from scopf_proxy.core.errors import ContractViolationError, InfeasibleError, NumericalError
from scopf_proxy.core.opf_problems import flow_limit_jacobian, post_contingency_loss, solve_dcopf, solve_parametric_dcopf

ALPHA_TRI = np.array([1.0, 0.5, 1.0])


def _tape(net, demand, alpha):
    return make_tape(net, solve_parametric_dcopf(net, demand, alpha))


def test_pre_gradient_is_negative_flow_dual(tri):
    tape = _tape(tri, tri.demand, ALPHA_TRI)
    np.testing.assert_allclose(grad_pre_wrt_alpha(tape), [0.0, -3.0, 0.0], atol=1e-6)


def test_pre_gradient_matches_objective_difference(tri):
    tape = _tape(tri, tri.demand, ALPHA_TRI)
    fd = central_difference(lambda a: solve_parametric_dcopf(tri, tri.demand, a).objective, ALPHA_TRI.copy(), 1e-6)
    # alpha = 1 sits on the clamp; only the interior coordinate is compared
    assert fd[1] == pytest.approx(grad_pre_wrt_alpha(tape)[1], rel=1e-5)


@pytest.mark.parametrize("weights, expected", [((1.0, 0.0), 3.0), ((0.0, 1.0), -3.0)])
def test_adjoint_gradient_of_linear_loss(tri, weights, expected):
    tape = _tape(tri, tri.demand, ALPHA_TRI)
    gs = build_gamma(tape)
    grad = grad_post_wrt_alpha(tape, gs, np.array(weights))
    assert grad[1] == pytest.approx(expected, abs=1e-6)
    assert grad[0] == pytest.approx(0.0, abs=1e-6)


def test_forward_sensitivity_agrees_with_adjoint(tri):
    tape = _tape(tri, tri.demand, ALPHA_TRI)
    gs = build_gamma(tape)
    dh = flow_limit_jacobian(tri).toarray()[:, 1]
    dp, _, _ = forward_sensitivity(tape, gs, dh)
    np.testing.assert_allclose(dp, [3.0, -3.0], atol=1e-6)
    w = np.array([0.3, -1.2])
    assert w @ dp == pytest.approx(grad_post_wrt_alpha(tape, gs, w)[1], abs=1e-6)


def _binding_alpha(net):
    """Unit alpha except the most utilized line, pulled 10% below its base flow."""
    base = solve_dcopf(net, net.demand)
    util = np.abs(base.line_flows) / net.flow_limits
    alpha = np.ones(net.n_line)
    j = int(np.argmax(util))
    alpha[j] = 0.9 * util[j]
    return alpha, j


def test_adjoint_matches_finite_difference_on_case14(case14):
    alpha, j = _binding_alpha(case14)
    tape = _tape(case14, case14.demand, alpha)
    gs = build_gamma(tape)
    w = np.random.default_rng(0).normal(size=case14.n_gen)
    grad = grad_post_wrt_alpha(tape, gs, w)

    def loss_j(x):
        a = alpha.copy()
        a[j] = x[0]
        return float(w @ solve_parametric_dcopf(case14, case14.demand, a).p_star)

    fd = central_difference(loss_j, np.array([alpha[j]]), 1e-6)
    assert relative_error(grad[j], fd[0]) < 1e-4


def test_total_gradient_is_sum_of_parts(tri):
    tape = _tape(tri, tri.demand, ALPHA_TRI)
    gs = build_gamma(tape)
    w = np.array([1.0, 2.0])
    np.testing.assert_allclose(total_gradient(tape, gs, w), grad_pre_wrt_alpha(tape) + grad_post_wrt_alpha(tape, gs, w))


def test_weakly_active_constraint_triggers_damping(tri):
    # line 1-3 carries exactly 7/12 at the unconstrained optimum
    alpha = np.array([1.0, 7 / 12, 1.0])
    tape = _tape(tri, tri.demand, alpha)
    gs = build_gamma(tape)
    assert gs.regularization_used > 0
    _, _, u_mu = solve_adjoint(gs, np.array([1.0, 0.0]))
    assert np.all(np.isfinite(u_mu))


def test_tape_requires_optimal_solution(tri):
    res = solve_dcopf(tri, tri.demand)
    failed = qp_solver.QpSolution(res.p_star, np.zeros(1), res.mu_star, res.objective, qp_solver.INFEASIBLE)
    with pytest.raises(ContractViolationError):
        LayerTape(res.qp, failed, flow_limit_jacobian(tri))


def test_adjoint_checks_cotangent_length(tri):
    tape = _tape(tri, tri.demand, ALPHA_TRI)
    with pytest.raises(ContractViolationError):
        solve_adjoint(build_gamma(tape), np.ones(3))


def test_active_set_reports_binding_rows(tri):
    tape = _tape(tri, tri.demand, ALPHA_TRI)
    assert tape.active_set().tolist() == [2 * tri.n_gen + 1]


def _local_instances(net, count, seed):
    """Demand above 1.2 p.u. with line 1-3 tightened 5-10% below its DC-OPF flow."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        demand = net.demand * rng.uniform(1.2, 1.3)
        flow = solve_dcopf(net, demand).line_flows[1]
        alpha = np.array([0.999, rng.uniform(0.90, 0.95) * abs(flow) / net.flow_limits[1], 0.999])
        yield demand, alpha


def test_end_to_end_gradient_matches_finite_differences(local3):
    cset = build_contingency_set(local3, [1, 2, 3])
    rho = 1e4

    def pre(demand, a):
        return solve_parametric_dcopf(local3, demand, a).objective

    def post(demand, a):
        return post_contingency_loss(local3, demand, cset, rho, solve_parametric_dcopf(local3, demand, a).p_star).loss_value

    for demand, alpha in _local_instances(local3, 20, seed=21):
        tape = _tape(local3, demand, alpha)
        gs = build_gamma(tape)
        res = post_contingency_loss(local3, demand, cset, rho, tape.sol.x_star)
        assert res.loss_value > 0

        fd_pre = central_difference(lambda a: pre(demand, a), alpha.copy(), 1e-6)
        fd_post = central_difference(lambda a: post(demand, a), alpha.copy(), 1e-6)
        assert relative_error(grad_pre_wrt_alpha(tape), fd_pre) < 1e-4
        assert relative_error(grad_post_wrt_alpha(tape, gs, res.grad_p), fd_post) < 1e-4
        assert relative_error(total_gradient(tape, gs, res.grad_p), fd_pre + fd_post) < 1e-4


def test_semi_loss_gradient_matches_finite_differences(local3):
    rng = np.random.default_rng(5)
    for demand, alpha in _local_instances(local3, 5, seed=6):
        label = solve_dcopf(local3, demand).p_star + rng.normal(scale=0.05, size=local3.n_gen)

        def mse(a):
            return float(np.mean((solve_parametric_dcopf(local3, demand, a).p_star - label) ** 2))

        tape = _tape(local3, demand, alpha)
        grad = grad_post_wrt_alpha(tape, build_gamma(tape), 2.0 * (tape.sol.x_star - label) / local3.n_gen)
        fd = central_difference(mse, alpha.copy(), 1e-6)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("fixture", ["tri", "ramp", "local3"])
def test_pre_objective_never_increases_with_alpha(request, fixture):
    net = request.getfixturevalue(fixture)
    rng = np.random.default_rng(9)
    compared = 0
    for _ in range(50):
        alpha = rng.uniform(0.3, 1.0, net.n_line)
        looser = np.minimum(alpha + rng.uniform(0.0, 0.2, net.n_line), 1.0)
        try:
            tight = solve_parametric_dcopf(net, net.demand, alpha)
        except (InfeasibleError, NumericalError):
            continue
        loose = solve_parametric_dcopf(net, net.demand, looser)
        assert loose.objective <= tight.objective + 1e-9
        assert np.all(grad_pre_wrt_alpha(make_tape(net, tight)) <= 1e-8)
        compared += 1
    assert compared > 0
