"""Dataset generation and the three training loops.

``self``  GNN -> alpha -> parametric DC-OPF -> pre cost + post-contingency loss,
          differentiated through the optimization layer; never sees labels.
``semi``  GNN -> alpha -> parametric DC-OPF -> MSE to labeled dispatch.
``e2e``   GNN with generator readout -> softplus -> balance rescale -> MSE.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from ..config import SolverConfig, TrainConfig
from ..utils.io import write_csv
from ..utils.logger import get_logger
from ..utils.parallel import ordered_map
from . import gnn
from .contingency import ContingencySet
from .diff_layer import build_gamma, grad_post_wrt_alpha, make_tape, total_gradient
from .errors import ConfigError, ContractViolationError, DegeneratePointError, InfeasibleError, NumericalError
from .gnn import ModelParams, Topology
from .grid_model import FeatureStats, Network
from .opf_problems import post_contingency_loss, solve_parametric_dcopf, solve_scdcopf
from .optim import AdamW

logger = get_logger("scopf_proxy.train")

SHUFFLE_STREAM = 1


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: int
    demand: np.ndarray
    label_dispatch: np.ndarray | None = None
    label_cost: float | None = None

    @property
    def labeled(self) -> bool:
        return self.label_dispatch is not None


@dataclass(frozen=True, eq=False)
class StepOutcome:
    loss: float
    loss_pre: float = float("nan")
    loss_post: float = float("nan")
    grads: dict[str, np.ndarray] | None = field(default=None, repr=False)
    skipped: str | None = None

    @classmethod
    def skip(cls, reason: str) -> "StepOutcome":
        return cls(float("nan"), skipped=reason)


@dataclass
class TrainingLog:
    mode: str
    records: list[dict[str, Any]] = field(default_factory=list)
    best_epoch: int | None = None

    def losses(self) -> list[float | None]:
        return [r["loss"] for r in self.records]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def sample_demands(net: Network, n_samples: int, demand_range: float, seed: int) -> list[Sample]:
    """Independent per-bus scaling ``u ~ U(1 - range, 1 + range)`` of the base demand, PCG64 stream."""
    if not 0.0 <= demand_range < 1.0:
        raise ConfigError("INVALID_VALUE", f"demand range must lie in [0, 1), got {demand_range}")
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = rng.uniform(1.0 - demand_range, 1.0 + demand_range, size=(n_samples, net.n_bus))
    base = net.demand
    return [Sample(i, base * scale[i]) for i in range(n_samples)]


def generate_labels(
    net: Network,
    cset: ContingencySet,
    rho: float,
    samples: Sequence[Sample],
    *,
    solver: SolverConfig | None = None,
    workers: int = 1,
) -> list[Sample]:
    def _label(sample: Sample):
        try:
            res = solve_scdcopf(net, sample.demand, cset, rho, solver)
        except (InfeasibleError, NumericalError) as exc:
            logger.warning(f"[Train] sample {sample.sample_id} dropped: {exc.code} {exc.message}")
            return None
        return Sample(sample.sample_id, sample.demand, res.p_star, res.objective)

    labeled = [s for s in ordered_map(_label, samples, workers) if s is not None]
    logger.info(f"[Train] labeled {len(labeled)} of {len(samples)} samples")
    return labeled


def write_dataset_csv(net: Network, samples: Sequence[Sample], path: str | Path) -> Path:
    """Columns: sample_id, d_bus<id> (p.u.) per bus, then p_gen<id> and label_cost when labeled."""
    frame = pd.DataFrame({"sample_id": [s.sample_id for s in samples]})
    demands = np.array([s.demand for s in samples]).reshape(len(samples), net.n_bus)
    for j, bus in enumerate(net.buses):
        frame[f"d_bus{bus.id}"] = demands[:, j]
    if samples and all(s.labeled for s in samples):
        dispatch = np.array([s.label_dispatch for s in samples])
        for j, gen in enumerate(net.generators):
            frame[f"p_gen{gen.id}"] = dispatch[:, j]
        frame["label_cost"] = [s.label_cost for s in samples]
    return write_csv(path, frame)


def read_dataset_csv(net: Network, path: str | Path) -> list[Sample]:
    frame = pd.read_csv(path, float_precision="round_trip")
    demand_cols = [f"d_bus{bus.id}" for bus in net.buses]
    missing = [c for c in ["sample_id", *demand_cols] if c not in frame.columns]
    if missing:
        raise ConfigError("DATASET_MISMATCH", f"{path} lacks columns {missing}", {"missing": missing})
    gen_cols = [f"p_gen{gen.id}" for gen in net.generators]
    has_labels = all(c in frame.columns for c in gen_cols)

    samples = []
    for row in frame.itertuples(index=False):
        rec = row._asdict()
        demand = np.array([rec[c] for c in demand_cols], dtype=np.float64)
        label = cost = None
        if has_labels:
            label = np.array([rec[c] for c in gen_cols], dtype=np.float64)
            if np.any(np.isnan(label)):
                label = None
            else:
                raw_cost = rec.get("label_cost")
                cost = None if raw_cost is None or pd.isna(raw_cost) else float(raw_cost)
        samples.append(Sample(int(rec["sample_id"]), demand, label, cost))
    return samples


# ---------------------------------------------------------------------------
# Per-sample steps
# ---------------------------------------------------------------------------


def self_supervised_step(
    net: Network,
    cset: ContingencySet,
    rho: float,
    params: ModelParams,
    demand: np.ndarray,
    *,
    topo: Topology | None = None,
    solver: SolverConfig | None = None,
    workers: int = 1,
    with_grad: bool = True,
) -> StepOutcome:
    alpha, tape = gnn.predict(params, net, demand, topo)
    try:
        res = solve_parametric_dcopf(net, demand, alpha, solver)
        post = post_contingency_loss(net, demand, cset, rho, res.p_star, solver=solver, workers=workers)
    except (InfeasibleError, NumericalError, ContractViolationError) as exc:
        return StepOutcome.skip(exc.code)
    if not post.feasible:
        return StepOutcome.skip("POST_CONTINGENCY_UNSOLVED")

    loss_pre, loss_post = res.objective, post.loss_value
    if not with_grad:
        return StepOutcome(loss_pre + loss_post, loss_pre, loss_post)
    layer = make_tape(net, res)
    try:
        dalpha = total_gradient(layer, build_gamma(layer), post.grad_p)
    except DegeneratePointError as exc:
        return StepOutcome.skip(exc.code)
    return StepOutcome(loss_pre + loss_post, loss_pre, loss_post, gnn.backward(params, tape, dalpha))


def semi_supervised_step(
    net: Network,
    params: ModelParams,
    sample: Sample,
    *,
    topo: Topology | None = None,
    solver: SolverConfig | None = None,
    with_grad: bool = True,
) -> StepOutcome:
    alpha, tape = gnn.predict(params, net, sample.demand, topo)
    try:
        res = solve_parametric_dcopf(net, sample.demand, alpha, solver)
    except (InfeasibleError, NumericalError) as exc:
        return StepOutcome.skip(exc.code)
    diff = res.p_star - sample.label_dispatch
    loss = float(np.mean(diff**2))
    if not with_grad:
        return StepOutcome(loss)
    layer = make_tape(net, res)
    try:
        dalpha = grad_post_wrt_alpha(layer, build_gamma(layer), 2.0 * diff / net.n_gen)
    except DegeneratePointError as exc:
        return StepOutcome.skip(exc.code)
    return StepOutcome(loss, grads=gnn.backward(params, tape, dalpha))


def balanced_dispatch(raw: np.ndarray, demand: np.ndarray) -> tuple[np.ndarray, bool]:
    """softplus(raw) rescaled to total demand; returns (dispatch, used_uniform_fallback)."""
    weights = gnn.softplus(raw)
    total = float(weights.sum())
    target = float(np.sum(demand))
    if not np.isfinite(total) or total <= np.finfo(float).tiny:
        logger.warning("[Train] generator readout is all zero after softplus; uniform dispatch used")
        return np.full(len(raw), target / len(raw)), True
    return weights * (target / total), False


def balanced_dispatch_vjp(raw: np.ndarray, demand: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    weights = gnn.softplus(raw)
    total = float(weights.sum())
    if not np.isfinite(total) or total <= np.finfo(float).tiny:
        return np.zeros_like(raw)
    scale = float(np.sum(demand)) / total
    dweights = scale * (cotangent - np.dot(cotangent, weights) / total)
    return dweights * expit(raw)


def e2e_step(net: Network, params: ModelParams, sample: Sample, *, topo: Topology | None = None, with_grad: bool = True) -> StepOutcome:
    raw, tape = gnn.predict(params, net, sample.demand, topo)
    p, _ = balanced_dispatch(raw, sample.demand)
    diff = p - sample.label_dispatch
    loss = float(np.mean(diff**2))
    if not with_grad:
        return StepOutcome(loss)
    draw = balanced_dispatch_vjp(raw, sample.demand, 2.0 * diff / net.n_gen)
    return StepOutcome(loss, grads=gnn.backward(params, tape, draw))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _fit(
    params: ModelParams,
    samples: Sequence[Any],
    validation: Sequence[Any],
    step: Callable[..., StepOutcome],
    config: TrainConfig,
    mode: str,
    workers: int,
) -> tuple[ModelParams, TrainingLog]:
    opt = AdamW(config.lr, tuple(config.adamw_betas), config.adamw_eps, config.weight_decay)
    rng = np.random.Generator(np.random.PCG64([int(config.seed or 0), SHUFFLE_STREAM]))
    log = TrainingLog(mode)
    best: ModelParams | None = None
    best_val = math.inf

    for epoch in range(config.epochs):
        losses, pres, posts, skipped = [], [], [], 0
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            outcomes = ordered_map(lambda s: step(params, s, True), batch, workers)
            grads = None
            used = 0
            for s, out in zip(batch, outcomes):
                if out.skipped:
                    skipped += 1
                    logger.warning(f"[Train] epoch {epoch} sample {getattr(s, 'sample_id', '?')} skipped: {out.skipped}")
                    continue
                losses.append(out.loss)
                if not math.isnan(out.loss_pre):
                    pres.append(out.loss_pre)
                    posts.append(out.loss_post)
                used += 1
                if grads is None:
                    grads = {k: v.copy() for k, v in out.grads.items()}
                else:
                    for k, v in out.grads.items():
                        grads[k] += v
            if used:
                opt.step(params, {k: v / used for k, v in grads.items()})

        record: dict[str, Any] = {
            "epoch": epoch,
            "loss": _mean(losses),
            "loss_pre": _mean(pres),
            "loss_post": _mean(posts),
            "skipped": skipped,
            "samples": len(samples),
        }
        if validation:
            outs = ordered_map(lambda s: step(params, s, False), validation, workers)
            val = _mean([o.loss for o in outs if not o.skipped])
            record["val_loss"] = val
            if val is not None and val < best_val:
                best_val, best = val, params.copy()
                log.best_epoch = epoch
        log.records.append(record)
        logger.info(
            f"[Train] {mode} epoch {epoch}: loss={record['loss']} pre={record['loss_pre']} "
            f"post={record['loss_post']} skipped={skipped}" + (f" val={record.get('val_loss')}" if validation else "")
        )

    return (best if best is not None else params), log


def _init_params(net: Network, config: TrainConfig, demands: Sequence[np.ndarray], readout: str) -> ModelParams:
    dims = config.gnn.resolved()
    dims["readout"] = readout
    params = gnn.init(int(config.seed or 0), dims)
    params.stats = FeatureStats.fit(net, demands)
    return params


def _validation_demands(net: Network, config: TrainConfig) -> list[Sample]:
    if not config.n_validation:
        return []
    seed = config.validation_seed if config.validation_seed is not None else int(config.seed or 0) + 1
    return sample_demands(net, config.n_validation, config.demand_range, seed)


def train_self(
    net: Network,
    cset: ContingencySet,
    config: TrainConfig,
    *,
    demands: Sequence[np.ndarray] | None = None,
    solver: SolverConfig | None = None,
    workers: int = 1,
) -> tuple[ModelParams, TrainingLog]:
    """Self-supervised training on unlabeled demands (sampled from ``config`` when not given)."""
    if demands is None:
        demands = [s.demand for s in sample_demands(net, config.n_samples, config.demand_range, int(config.seed or 0))]
    samples = [Sample(i, np.asarray(d, dtype=np.float64)) for i, d in enumerate(demands)]
    validation = _validation_demands(net, config)
    params = _init_params(net, config, [s.demand for s in samples], "line")
    topo = Topology.from_network(net)

    def step(p: ModelParams, sample: Sample, with_grad: bool) -> StepOutcome:
        return self_supervised_step(net, cset, config.rho, p, sample.demand, topo=topo, solver=solver, with_grad=with_grad)

    logger.info(f"[Train] self: {len(samples)} samples, {len(cset)} contingencies, {params.num_parameters()} parameters")
    return _fit(params, samples, validation, step, config, "self", workers)


def _labeled_inputs(
    net: Network,
    config: TrainConfig,
    samples: Sequence[Sample] | None,
    cset: ContingencySet | None,
    solver: SolverConfig | None,
    workers: int,
) -> tuple[list[Sample], list[Sample]]:
    if samples is None:
        if cset is None:
            raise ConfigError("LABELS_REQUIRED", f"{config.mode} training needs labeled samples or a contingency set to label them")
        raw = sample_demands(net, config.n_samples, config.demand_range, int(config.seed or 0))
        samples = generate_labels(net, cset, config.rho, raw, solver=solver, workers=workers)
    samples = [s for s in samples if s.labeled]
    if not samples:
        raise ConfigError("LABELS_REQUIRED", f"{config.mode} training found no labeled samples")
    validation = _validation_demands(net, config)
    if validation:
        if cset is None:
            raise ConfigError("LABELS_REQUIRED", "validation labels need a contingency set")
        validation = generate_labels(net, cset, config.rho, validation, solver=solver, workers=workers)
    return list(samples), validation


def train_semi(
    net: Network,
    config: TrainConfig,
    *,
    samples: Sequence[Sample] | None = None,
    cset: ContingencySet | None = None,
    solver: SolverConfig | None = None,
    workers: int = 1,
) -> tuple[ModelParams, TrainingLog]:
    samples, validation = _labeled_inputs(net, config, samples, cset, solver, workers)
    params = _init_params(net, config, [s.demand for s in samples], "line")
    topo = Topology.from_network(net)

    def step(p: ModelParams, sample: Sample, with_grad: bool) -> StepOutcome:
        return semi_supervised_step(net, p, sample, topo=topo, solver=solver, with_grad=with_grad)

    logger.info(f"[Train] semi: {len(samples)} labeled samples, {params.num_parameters()} parameters")
    return _fit(params, samples, validation, step, config, "semi", workers)


def train_e2e(
    net: Network,
    config: TrainConfig,
    *,
    samples: Sequence[Sample] | None = None,
    cset: ContingencySet | None = None,
    solver: SolverConfig | None = None,
    workers: int = 1,
) -> tuple[ModelParams, TrainingLog]:
    samples, validation = _labeled_inputs(net, config, samples, cset, solver, workers)
    params = _init_params(net, config, [s.demand for s in samples], "generator")
    topo = Topology.from_network(net)

    def step(p: ModelParams, sample: Sample, with_grad: bool) -> StepOutcome:
        return e2e_step(net, p, sample, topo=topo, with_grad=with_grad)

    logger.info(f"[Train] e2e: {len(samples)} labeled samples, {params.num_parameters()} parameters")
    return _fit(params, samples, validation, step, config, "e2e", workers)


def train(
    net: Network,
    cset: ContingencySet,
    config: TrainConfig,
    *,
    samples: Sequence[Sample] | None = None,
    solver: SolverConfig | None = None,
    workers: int = 1,
) -> tuple[ModelParams, TrainingLog]:
    """Dispatch on ``config.mode``; self mode strips any labels it is handed."""
    if config.mode == "self":
        demands = [s.demand for s in samples] if samples is not None else None
        if samples is not None and any(s.labeled for s in samples):
            logger.warning("[Train] self mode ignores dataset labels")
        return train_self(net, cset, config, demands=demands, solver=solver, workers=workers)
    if config.mode == "semi":
        return train_semi(net, config, samples=samples, cset=cset, solver=solver, workers=workers)
    return train_e2e(net, config, samples=samples, cset=cset, solver=solver, workers=workers)
