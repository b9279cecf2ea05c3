import numpy as np
import pytest

from scopf_proxy.config import GnnConfig, TrainConfig
from scopf_proxy.core import gnn
from scopf_proxy.core.contingency import build_contingency_set
from scopf_proxy.core.errors import ConfigError
from scopf_proxy.core.opf_problems import solve_dcopf, solve_parametric_dcopf
from scopf_proxy.core.optim import AdamW
from scopf_proxy.core.training import (
    Sample,
    balanced_dispatch,
    balanced_dispatch_vjp,
    e2e_step,
    generate_labels,
    read_dataset_csv,
    sample_demands,
    self_supervised_step,
    semi_supervised_step,
    train,
    train_self,
    train_semi,
    write_dataset_csv,
)

TINY_GNN = GnnConfig(hidden_dims=(4,), heads=1, dense_hidden=4)
RHO = 1e4


def _config(**kw) -> TrainConfig:
    base = {"seed": 0, "n_samples": 3, "epochs": 2, "lr": 1e-2, "gnn": TINY_GNN, "rho": RHO}
    return TrainConfig(**{**base, **kw})


def _params(readout: str = "line", seed: int = 0) -> gnn.ModelParams:
    dims = TINY_GNN.resolved()
    dims["readout"] = readout
    return gnn.init(seed, dims)


def _constant_alpha(logit: float) -> gnn.ModelParams:
    params = _params()
    params.tensors["dense2.w"][...] = 0.0
    params.tensors["dense2.b"][0] = logit
    return params


# -- data ------------------------------------------------------------------


def test_zero_range_reproduces_base_demand(case14):
    for s in sample_demands(case14, 4, 0.0, seed=1):
        np.testing.assert_array_equal(s.demand, case14.demand)


def test_samples_stay_within_range(case14):
    samples = sample_demands(case14, 50, 0.3, seed=2)
    scale = np.array([s.demand for s in samples])
    base = np.asarray(case14.demand)
    assert np.all(scale >= 0.7 * base - 1e-15)
    assert np.all(scale <= 1.3 * base + 1e-15)
    assert [s.sample_id for s in samples] == list(range(50))


def test_sampling_is_seeded(case14):
    a = sample_demands(case14, 5, 0.3, seed=3)
    b = sample_demands(case14, 5, 0.3, seed=3)
    c = sample_demands(case14, 5, 0.3, seed=4)
    assert all(np.array_equal(x.demand, y.demand) for x, y in zip(a, b))
    assert not np.array_equal(a[0].demand, c[0].demand)


@pytest.mark.parametrize("demand_range", [-0.1, 1.0])
def test_sampling_rejects_bad_range(tri, demand_range):
    with pytest.raises(ConfigError):
        sample_demands(tri, 1, demand_range, seed=0)


def test_labels_come_from_scdcopf(ramp):
    cset = build_contingency_set(ramp, [1, 2, 3])
    labeled = generate_labels(ramp, cset, RHO, sample_demands(ramp, 2, 0.0, seed=0))
    assert len(labeled) == 2
    np.testing.assert_allclose(labeled[0].label_dispatch, [0.7, 0.2, 0.1], atol=1e-6)
    assert labeled[0].labeled and np.isfinite(labeled[0].label_cost)


def test_infeasible_samples_are_dropped(tri, tri_outage_23):
    samples = [Sample(0, tri.demand), Sample(1, tri.demand * 10.0)]
    labeled = generate_labels(tri, tri_outage_23, RHO, samples)
    assert [s.sample_id for s in labeled] == [0]


def test_dataset_csv_round_trip(tri, tri_outage_23, tmp_path):
    samples = generate_labels(tri, tri_outage_23, RHO, sample_demands(tri, 3, 0.2, seed=5))
    path = write_dataset_csv(tri, samples, tmp_path / "dataset.csv")
    again = read_dataset_csv(tri, path)
    for a, b in zip(samples, again):
        np.testing.assert_array_equal(a.demand, b.demand)
        np.testing.assert_array_equal(a.label_dispatch, b.label_dispatch)
        assert a.label_cost == b.label_cost


def test_unlabeled_dataset_reads_without_labels(tri, tmp_path):
    path = write_dataset_csv(tri, sample_demands(tri, 2, 0.1, seed=0), tmp_path / "d.csv")
    assert not any(s.labeled for s in read_dataset_csv(tri, path))


def test_dataset_for_other_network_is_rejected(tri, case14, tmp_path):
    path = write_dataset_csv(tri, sample_demands(tri, 1, 0.1, seed=0), tmp_path / "d.csv")
    with pytest.raises(ConfigError) as exc:
        read_dataset_csv(case14, path)
    assert exc.value.code == "DATASET_MISMATCH"


# -- optimizer -------------------------------------------------------------


def test_adamw_zero_gradient_only_decays():
    params = _params()
    before = params.copy()
    AdamW(lr=0.1, weight_decay=0.0).step(params, params.zeros_like())
    for name in params.names():
        np.testing.assert_array_equal(params[name], before[name])
    assert params.version == before.version + 1

    AdamW(lr=0.1, weight_decay=0.5).step(params, params.zeros_like())
    np.testing.assert_allclose(params["dense1.W"], before["dense1.W"] * 0.95)


def test_adamw_first_step_moves_by_learning_rate():
    params = _params()
    before = params.copy()
    grads = {k: np.full_like(v, 3.0) for k, v in params.tensors.items()}
    AdamW(lr=0.01, weight_decay=0.0).step(params, grads)
    np.testing.assert_allclose(params["dense2.w"], before["dense2.w"] - 0.01, atol=1e-9)


# -- steps -----------------------------------------------------------------


def test_saturated_alpha_reproduces_dcopf_and_its_shed(ramp):
    cset = build_contingency_set(ramp, [1, 2, 3])
    params = _constant_alpha(20.0)
    out = self_supervised_step(ramp, cset, RHO, params, ramp.demand)
    assert out.skipped is None
    assert out.loss_pre == pytest.approx(solve_dcopf(ramp, ramp.demand).objective, rel=1e-6)
    assert out.loss_post == pytest.approx(2e3 / 3, rel=1e-5)
    assert out.loss == pytest.approx(out.loss_pre + out.loss_post)
    assert set(out.grads) == set(params.names())
    assert all(np.all(np.isfinite(g)) for g in out.grads.values())


def test_vanishing_alpha_is_skipped_not_raised(tri, tri_outage_23):
    out = self_supervised_step(tri, tri_outage_23, RHO, _constant_alpha(-12.0), tri.demand)
    assert out.skipped in ("INFEASIBLE", "SOLVER_FAILURE")
    assert out.grads is None
    assert np.isnan(out.loss)


def test_self_step_without_grad_returns_losses_only(ramp):
    cset = build_contingency_set(ramp, [2])
    out = self_supervised_step(ramp, cset, RHO, _params(), ramp.demand, with_grad=False)
    assert out.grads is None
    assert np.isfinite(out.loss)


def test_semi_step_at_its_own_prediction_has_zero_gradient(tri):
    # alpha = 0.55 everywhere binds line 1-3
    params = _constant_alpha(np.log(0.55 / 0.45))
    alpha, _ = gnn.predict(params, tri, tri.demand)
    p = solve_parametric_dcopf(tri, tri.demand, alpha).p_star
    out = semi_supervised_step(tri, params, Sample(0, tri.demand, p, 0.0))
    assert out.loss == pytest.approx(0.0, abs=1e-14)
    assert all(np.allclose(g, 0.0, atol=1e-10) for g in out.grads.values())


def test_balanced_dispatch_meets_demand():
    demand = np.array([0.2, 0.0, 1.1])
    p, fallback = balanced_dispatch(np.array([0.3, -1.0]), demand)
    assert not fallback
    assert p.sum() == pytest.approx(demand.sum())
    assert np.all(p > 0)


def test_balanced_dispatch_falls_back_to_uniform():
    p, fallback = balanced_dispatch(np.array([-1e4, -1e4]), np.array([1.0, 1.0]))
    assert fallback
    np.testing.assert_allclose(p, [1.0, 1.0])


def test_balanced_dispatch_vjp_matches_finite_difference():
    raw = np.array([0.4, -0.7, 1.3])
    demand = np.array([0.5, 0.9])
    cot = np.array([1.0, -2.0, 0.5])
    grad = balanced_dispatch_vjp(raw, demand, cot)
    eps = 1e-6
    for i in range(3):
        up, down = raw.copy(), raw.copy()
        up[i] += eps
        down[i] -= eps
        fd = (balanced_dispatch(up, demand)[0] @ cot - balanced_dispatch(down, demand)[0] @ cot) / (2 * eps)
        assert grad[i] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_e2e_step_gradient_matches_finite_difference(tri):
    params = _params("generator", seed=4)
    sample = Sample(0, tri.demand, np.array([0.6, 0.4]), 0.0)
    out = e2e_step(tri, params, sample)
    eps = 1e-6
    w = params.tensors["dense1.b"]
    keep = w[0]
    w[0] = keep + eps
    up = e2e_step(tri, params, sample, with_grad=False).loss
    w[0] = keep - eps
    down = e2e_step(tri, params, sample, with_grad=False).loss
    w[0] = keep
    assert out.grads["dense1.b"][0] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-10)


# -- loops -----------------------------------------------------------------


def test_self_training_is_deterministic(ramp):
    cset = build_contingency_set(ramp, [2, 3])
    a, log_a = train_self(ramp, cset, _config())
    b, log_b = train_self(ramp, cset, _config())
    assert log_a.losses() == log_b.losses()
    for name in a.names():
        np.testing.assert_array_equal(a[name], b[name])
    assert len(log_a.records) == 2
    assert set(log_a.records[0]) == {"epoch", "loss", "loss_pre", "loss_post", "skipped", "samples"}
    assert a.stats is not None


def test_validation_keeps_best_epoch(ramp):
    cset = build_contingency_set(ramp, [2, 3])
    _, log = train_self(ramp, cset, _config(epochs=3, n_validation=2))
    vals = [r["val_loss"] for r in log.records]
    assert log.best_epoch == int(np.argmin(vals))


def test_semi_training_requires_labels(tri):
    with pytest.raises(ConfigError) as exc:
        train_semi(tri, _config(mode="semi"))
    assert exc.value.code == "LABELS_REQUIRED"
    with pytest.raises(ConfigError):
        train_semi(tri, _config(mode="semi"), samples=sample_demands(tri, 2, 0.1, seed=0))


def test_train_dispatches_on_mode(tri, tri_outage_23):
    samples = generate_labels(tri, tri_outage_23, RHO, sample_demands(tri, 2, 0.1, seed=1))
    params, log = train(tri, tri_outage_23, _config(mode="e2e", epochs=1), samples=samples)
    assert params.dims["readout"] == "generator"
    assert log.mode == "e2e"
    params, log = train(tri, tri_outage_23, _config(mode="self", epochs=1), samples=samples)
    assert params.dims["readout"] == "line"
    assert log.records[0]["samples"] == 2


@pytest.mark.slow
def test_self_training_on_ramp_case_reduces_post_loss(ramp):
    cset = build_contingency_set(ramp, [1, 2, 3])
    config = _config(epochs=40, n_samples=5, lr=5e-2, n_validation=3)
    params, log = train_self(ramp, cset, config)
    assert log.best_epoch is not None
    assert log.records[log.best_epoch]["val_loss"] <= log.records[0]["val_loss"]
    out = self_supervised_step(ramp, cset, RHO, params, ramp.demand, with_grad=False)
    assert np.isfinite(out.loss)
