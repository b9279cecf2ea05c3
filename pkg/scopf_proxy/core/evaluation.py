import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from ..config import EVAL_MODELS, SolverConfig, TrainConfig
from ..utils.logger import get_logger
from ..utils.metrics import TimingCollector
from ..utils.parallel import ordered_map
from . import gnn
from .contingency import ContingencySet
from .errors import ConfigError, ContractViolationError, InfeasibleError, NumericalError
from .gnn import ModelParams, Topology
from .grid_model import Network
from .opf_problems import line_violations, post_contingency_loss, pre_contingency_violation, solve_dcopf, solve_parametric_dcopf
from .training import Sample, balanced_dispatch, generate_labels, sample_demands, train

logger = get_logger("scopf_proxy.eval")

CORRELATION_KIND = "pearson_over_stacked_dispatch_entries"
CONSISTENCY_TOL = 1e-9


@dataclass(frozen=True)
class DispatchMetrics:
    correlation: float
    mean_err: float
    max_err: float
    correlation_defined: bool = True


@dataclass(frozen=True)
class EvalRecord:
    model: str
    sample_id: int
    model_cost: float
    ref_cost: float
    cost_error: float
    dispatch_err_mean: float
    dispatch_err_max: float
    line_violations: int
    pre_violation: float
    status: str = "ok"


@dataclass
class EvalReport:
    records: list[EvalRecord]
    predictions: dict[str, list[np.ndarray]] = field(repr=False, default_factory=dict)
    labels: list[np.ndarray] = field(repr=False, default_factory=list)
    n_lines: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.records))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records])

    def aggregate(self, model: str) -> dict[str, Any]:
        recs = [r for r in self.records if r.model == model]
        errors = np.array([r.cost_error for r in recs])
        pred = self.predictions.get(model, [])
        ok = [i for i, p in enumerate(pred) if np.all(np.isfinite(p))]
        dm = dispatch_metrics([pred[i] for i in ok], [self.labels[i] for i in ok]) if ok else DispatchMetrics(float("nan"), float("nan"), float("nan"), False)
        return {
            "model": model,
            "n_samples": len(recs),
            "n_failed": int(sum(r.status != "ok" for r in recs)),
            "mean_cost_error_pct": float(errors.mean()) if len(errors) else float("nan"),
            "max_cost_error_pct": float(errors.max()) if len(errors) else float("nan"),
            "correlation": dm.correlation,
            "correlation_defined": dm.correlation_defined,
            "mean_error_pu": dm.mean_err,
            "max_error_pu": dm.max_err,
            "line_violation_rate": line_violation_rate([r.line_violations for r in recs], self.n_lines),
        }

    def aggregates(self) -> list[dict[str, Any]]:
        return [self.aggregate(m) for m in self.models]

    def check_consistency(self) -> bool:
        """Recompute the cost aggregates from the per-sample records."""
        frame = self.frame()
        if frame.empty:
            return True
        for agg in self.aggregates():
            sub = frame[frame["model"] == agg["model"]]
            for column, value in (("mean_cost_error_pct", sub["cost_error"].mean()), ("max_cost_error_pct", sub["cost_error"].max())):
                stored = agg[column]
                if math.isinf(stored) or math.isinf(value):
                    if stored != value:
                        return False
                elif abs(stored - value) > CONSISTENCY_TOL * max(1.0, abs(value)):
                    return False
        return True

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata": self.metadata,
            "aggregates": [_json_safe(a) for a in self.aggregates()],
            "records": [_json_safe(asdict(r)) for r in self.records],
        }


def _json_safe(data: dict[str, Any]) -> dict[str, Any]:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in data.items()}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def cost_error(
    net: Network,
    cset: ContingencySet,
    rho: float,
    p_model: np.ndarray,
    reference_total_cost: float,
    *,
    demand: np.ndarray | None = None,
    solver: SolverConfig | None = None,
    workers: int = 1,
    check_pre: bool = True,
) -> float:
    """Percent deviation of base cost plus post-contingency loss from the SC-DCOPF objective.

    ``demand`` defaults to the base demand of ``net``. An unsolvable post stage gives +inf.
    """
    total = model_total_cost(net, cset, rho, p_model, demand, solver=solver, workers=workers, check_pre=check_pre)
    return _percent(total, reference_total_cost)


def _percent(total: float, reference: float) -> float:
    if not math.isfinite(total):
        return float("inf")
    if reference == 0:
        raise ConfigError("INVALID_VALUE", "reference cost is zero; relative error undefined")
    return 100.0 * abs(total - reference) / abs(reference)


def model_total_cost(
    net: Network,
    cset: ContingencySet,
    rho: float,
    p_model: np.ndarray,
    demand: np.ndarray | None = None,
    *,
    solver: SolverConfig | None = None,
    workers: int = 1,
    check_pre: bool = True,
) -> float:
    demand = net.demand if demand is None else demand
    post = post_contingency_loss(net, demand, cset, rho, p_model, solver=solver, workers=workers, check_pre=check_pre)
    if not post.feasible:
        return float("inf")
    return net.generation_cost(np.asarray(p_model, dtype=np.float64)) + post.loss_value


def dispatch_metrics(pred: Sequence[np.ndarray], label: Sequence[np.ndarray]) -> DispatchMetrics:
    if len(pred) != len(label):
        raise ConfigError("DIMENSION_MISMATCH", f"{len(pred)} predictions for {len(label)} labels")
    if not pred:
        return DispatchMetrics(float("nan"), float("nan"), float("nan"), False)
    x = np.concatenate([np.ravel(p) for p in pred])
    y = np.concatenate([np.ravel(v) for v in label])
    err = np.abs(x - y)
    if x.std() == 0.0 or y.std() == 0.0:
        logger.warning("[Eval] zero-variance dispatch stack; correlation undefined")
        return DispatchMetrics(float("nan"), float(err.mean()), float(err.max()), False)
    corr = float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))
    return DispatchMetrics(corr, float(err.mean()), float(err.max()))


def line_violation_rate(violations: Sequence[int], n_lines: int) -> float:
    pairs = len(violations) * n_lines
    return float(sum(violations)) / pairs if pairs else 0.0


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_dispatch(
    model: str,
    net: Network,
    demand: np.ndarray,
    params: ModelParams | None = None,
    *,
    topo: Topology | None = None,
    solver: SolverConfig | None = None,
) -> np.ndarray:
    """Pre-contingency dispatch of one model; raises InfeasibleError when the model yields none."""
    if model == "untuned":
        return solve_dcopf(net, demand, solver).p_star
    if model not in EVAL_MODELS:
        raise ConfigError("UNKNOWN_MODEL", f"model must be one of {EVAL_MODELS}, got {model}")
    if params is None:
        raise ConfigError("CHECKPOINT_REQUIRED", f"model {model} needs trained parameters")
    out, _ = gnn.predict(params, net, demand, topo)
    if model == "e2e":
        return balanced_dispatch(out, demand)[0]
    return solve_parametric_dcopf(net, demand, out, solver).p_star


def _evaluate_one(
    model: str,
    net: Network,
    cset: ContingencySet,
    rho: float,
    sample: Sample,
    params: ModelParams | None,
    topo: Topology,
    solver: SolverConfig | None,
) -> tuple[EvalRecord, np.ndarray]:
    g = net.n_gen
    try:
        p = predict_dispatch(model, net, sample.demand, params, topo=topo, solver=solver)
    except (InfeasibleError, NumericalError) as exc:
        logger.warning(f"[Eval] {model} sample {sample.sample_id}: no dispatch ({exc.code})")
        nan = float("nan")
        return EvalRecord(model, sample.sample_id, float("inf"), sample.label_cost, float("inf"), nan, nan, 0, nan, exc.code), np.full(g, np.nan)

    status = "ok"
    try:
        total = model_total_cost(net, cset, rho, p, sample.demand, solver=solver, check_pre=model != "e2e")
    except ContractViolationError as exc:
        total, status = float("inf"), exc.code
    if not math.isfinite(total) and status == "ok":
        status = "POST_CONTINGENCY_UNSOLVED"
    err = np.abs(p - sample.label_dispatch)
    record = EvalRecord(
        model=model,
        sample_id=sample.sample_id,
        model_cost=total,
        ref_cost=sample.label_cost,
        cost_error=_percent(total, sample.label_cost),
        dispatch_err_mean=float(err.mean()),
        dispatch_err_max=float(err.max()),
        line_violations=int(line_violations(net, sample.demand, p).sum()),
        pre_violation=pre_contingency_violation(net, sample.demand, p),
        status=status,
    )
    return record, p


def evaluate_models(
    net: Network,
    cset: ContingencySet,
    rho: float,
    samples: Sequence[Sample],
    models: Mapping[str, ModelParams | None],
    *,
    solver: SolverConfig | None = None,
    workers: int = 1,
    metadata: dict[str, Any] | None = None,
) -> EvalReport:
    """Evaluate every model on every labeled sample; records ordered by model, then sample."""
    samples = [s for s in samples if s.labeled and s.label_cost is not None]
    if not samples:
        raise ConfigError("LABELS_REQUIRED", "evaluation needs samples with reference dispatch and cost")
    topo = Topology.from_network(net)
    records: list[EvalRecord] = []
    predictions: dict[str, list[np.ndarray]] = {}
    for model, params in models.items():
        outs = ordered_map(lambda s: _evaluate_one(model, net, cset, rho, s, params, topo, solver), samples, workers)
        records.extend(r for r, _ in outs)
        predictions[model] = [p for _, p in outs]

    meta = {
        "case": net.name,
        "contingency_rule": cset.selection_rule,
        "contingencies": cset.line_ids,
        "rho": rho,
        "correlation": CORRELATION_KIND,
        "reference_cost": "scdcopf_objective_including_shed_penalty",
    }
    meta.update(metadata or {})
    report = EvalReport(records, predictions, [s.label_dispatch for s in samples], net.n_line, meta)
    for agg in report.aggregates():
        logger.info(
            f"[Eval] {agg['model']}: cost error mean={agg['mean_cost_error_pct']:.4f}% max={agg['max_cost_error_pct']:.4f}% "
            f"corr={agg['correlation']:.4f} violation rate={agg['line_violation_rate']:.4f}"
        )
    return report


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def cost_error_table(report: EvalReport) -> pd.DataFrame:
    rows = [{k: a[k] for k in ("model", "mean_cost_error_pct", "max_cost_error_pct")} for a in report.aggregates()]
    return pd.DataFrame(rows, columns=["model", "mean_cost_error_pct", "max_cost_error_pct"])


def dispatch_table(report: EvalReport) -> pd.DataFrame:
    cols = ["model", "correlation", "mean_error_pu", "max_error_pu", "line_violation_rate"]
    return pd.DataFrame([{k: a[k] for k in cols} for a in report.aggregates()], columns=cols)


def emit_scatter(reports: EvalReport | Sequence[EvalReport]) -> pd.DataFrame:
    """(model, ref_cost, model_cost) per sample and model, for external plotting."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    rows = [(r.model, r.ref_cost, r.model_cost) for rep in reports for r in rep.records]
    return pd.DataFrame(rows, columns=["model", "ref_cost", "model_cost"])


def data_efficiency_sweep(
    net: Network,
    cset: ContingencySet,
    config: TrainConfig,
    sample_counts: Sequence[int],
    eval_samples: Sequence[Sample],
    *,
    modes: Sequence[str] = ("self", "semi", "e2e"),
    solver: SolverConfig | None = None,
    workers: int = 1,
    timings: TimingCollector | None = None,
) -> pd.DataFrame:
    """Train each mode at each sample count and score it on the fixed evaluation set.

    One row per sample count with ``<mode>_mean`` / ``<mode>_max`` cost errors (%).
    Training sets are prefixes of one sampled pool, so larger counts extend smaller ones.
    """
    counts = sorted({int(c) for c in sample_counts})
    if not counts or counts[0] < 1:
        raise ConfigError("INVALID_VALUE", f"sample counts must be positive, got {list(sample_counts)}")
    timings = timings if timings is not None else TimingCollector()
    pool = sample_demands(net, counts[-1], config.demand_range, int(config.seed or 0))
    labeled: list[Sample] | None = None
    if any(m != "self" for m in modes):
        with timings.measure("dataset", n_samples=counts[-1]):
            labeled = generate_labels(net, cset, config.rho, pool, solver=solver, workers=workers)

    rows = []
    for count in counts:
        row: dict[str, Any] = {"n_samples": count}
        cfg = config.model_copy(update={"n_samples": count})
        for mode in modes:
            data = pool[:count] if mode == "self" else [s for s in labeled if s.sample_id < count]
            cfg_mode = cfg.model_copy(update={"mode": mode})
            with timings.measure("training", mode=mode, n_samples=count):
                params, _ = train(net, cset, cfg_mode, samples=data, solver=solver, workers=workers)
            report = evaluate_models(net, cset, config.rho, eval_samples, {mode: params}, solver=solver, workers=workers)
            agg = report.aggregate(mode)
            row[f"{mode}_mean"] = agg["mean_cost_error_pct"]
            row[f"{mode}_max"] = agg["max_cost_error_pct"]
        rows.append(row)
        logger.info(f"[Eval] sweep n_samples={count}: {row}")
    return pd.DataFrame(rows)
