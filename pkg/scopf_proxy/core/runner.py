import platform
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import scipy

from .. import __version__
from ..config import TRAIN_MODES, RunConfig
from ..utils.io import write_csv, write_json, write_jsonl
from ..utils.logger import get_logger
from ..utils.metrics import TimingCollector
from . import evaluation, gnn
from .config_manager import config_manager
from .contingency import ContingencySet, screen_contingencies
from .errors import ConfigError
from .gnn import ModelParams
from .grid_model import Network, dump_network_json, parse_case
from .opf_problems import binding_constraints, dispatch_frame, model_size, solve_dcopf, solve_scdcopf
from .training import Sample, generate_labels, read_dataset_csv, sample_demands, train, write_dataset_csv

logger = get_logger("scopf_proxy.cli")


def load_demand_file(net: Network, path: str | Path) -> np.ndarray:
    """``bus_id,demand_pu`` rows, or the first row of a dataset CSV."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("PATH_NOT_FOUND", f"Demand file not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    if {"bus_id", "demand_pu"} <= set(frame.columns):
        by_bus = dict(zip(frame["bus_id"].astype(int), frame["demand_pu"].astype(float)))
        unknown = sorted(set(by_bus) - set(net.bus_index))
        if unknown:
            raise ConfigError("UNKNOWN_BUS", f"Demand file names buses not in {net.name}: {unknown}")
        return np.array([by_bus.get(b.id, 0.0) for b in net.buses])
    samples = read_dataset_csv(net, path)
    if not samples:
        raise ConfigError("DATASET_MISMATCH", f"Demand file {path} holds no rows")
    return samples[0].demand


class Runner:
    """Shared orchestration behind the CLI commands; every file goes under ``out_dir``."""

    def __init__(self, config: RunConfig, out_dir: str | Path | None = None):
        self.config = config
        self.out_dir = Path(out_dir or config.output_dir)
        self.timings = TimingCollector()

    @cached_property
    def net(self) -> Network:
        return parse_case(self.config.case_path, self.config.grid)

    @cached_property
    def cset(self) -> ContingencySet:
        return screen_contingencies(
            self.net,
            self.config.contingency_fraction,
            grid=self.config.grid,
            solver=self.config.solver,
            max_contingencies=self.config.max_contingencies,
            workers=self.config.workers,
        )

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_manifest(self, command: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        config_manager.write_config(self.config, self.path("config.resolved.toml"))
        manifest = {
            "command": command,
            "package_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "seed": self.config.seed,
            "config_hash": config_manager.config_hash(self.config),
        }
        return write_json(self.path("manifest.json"), manifest)

    # -- network ---------------------------------------------------------

    def parse(self) -> dict[str, Any]:
        net = self.net
        dump_network_json(net, self.path("network.json"))
        return {"case": net.name, "buses": net.n_bus, "lines": net.n_line, "generators": net.n_gen, "base_mva": net.base_mva}

    def ptdf(self) -> dict[str, Any]:
        net = self.net
        frame = pd.DataFrame(net.ptdf, columns=[f"bus{b.id}" for b in net.buses])
        frame.insert(0, "line_id", [ln.id for ln in net.lines])
        write_csv(self.path("ptdf.csv"), frame)
        return {"case": net.name, "rows": net.n_line, "columns": net.n_bus, "slack_bus": net.slack_bus}

    def screen(self) -> dict[str, Any]:
        cset = self.cset
        write_json(self.path("contingencies.json"), cset.to_dict())
        size = model_size(self.net, cset)
        write_csv(self.path("model_size.csv"), pd.DataFrame([{"system": self.net.name, **size}]))
        return {"selection_rule": cset.selection_rule, "line_ids": cset.line_ids, **size}

    # -- direct solves ---------------------------------------------------

    def solve(self, kind: str, demand_file: str | None = None) -> dict[str, Any]:
        net = self.net
        demand = load_demand_file(net, demand_file) if demand_file else net.demand
        if kind == "dcopf":
            res = solve_dcopf(net, demand, self.config.solver)
            summary = {"kind": kind, "objective": res.objective, "binding": binding_constraints(net, res)}
        elif kind == "scdcopf":
            cset = self.cset
            if len(cset) == 0:
                raise ConfigError("EMPTY_CONTINGENCY_SET", "scdcopf needs at least one screened contingency")
            res = solve_scdcopf(net, demand, cset, self.config.rho, self.config.solver)
            summary = {
                "kind": kind,
                "objective": res.objective,
                "base_cost": res.base_cost,
                "shed_cost": res.shed_cost,
                "contingencies": cset.line_ids,
                "per_contingency_shed": res.per_contingency_shed.tolist(),
            }
        else:
            raise ConfigError("INVALID_VALUE", f"solve kind must be dcopf or scdcopf, got {kind!r}")
        write_csv(self.path("dispatch.csv"), dispatch_frame(net, res.p_star))
        write_json(self.path("summary.json"), summary)
        return summary

    # -- data and training -----------------------------------------------

    def dataset(self, labeled: bool = True) -> dict[str, Any]:
        tc = self.config.train_settings()
        samples = sample_demands(self.net, tc.n_samples, tc.demand_range, int(tc.seed))
        if labeled:
            with self.timings.measure("dataset", n_samples=tc.n_samples):
                samples = generate_labels(self.net, self.cset, tc.rho, samples, solver=self.config.solver, workers=self.config.workers)
        write_dataset_csv(self.net, samples, self.path("dataset.csv"))
        return {"samples": len(samples), "labeled": labeled}

    def _training_samples(self, mode: str) -> list[Sample] | None:
        tc = self.config.train
        if not tc.labels_path or mode == "self":
            return None
        return read_dataset_csv(self.net, tc.labels_path)

    def train_mode(self, mode: str) -> tuple[ModelParams, dict[str, Any]]:
        tc = self.config.train_settings().model_copy(update={"mode": mode})
        with self.timings.measure("training", mode=mode, n_samples=tc.n_samples):
            params, log = train(self.net, self.cset, tc, samples=self._training_samples(mode), solver=self.config.solver, workers=self.config.workers)
        gnn.save_checkpoint(params, self.path(f"checkpoints/{mode}.json"))
        write_jsonl(self.path(f"train_log_{mode}.jsonl"), log.records)
        last = log.records[-1] if log.records else {}
        return params, {"mode": mode, "epochs": len(log.records), "best_epoch": log.best_epoch, "final_loss": last.get("loss")}

    def train(self) -> dict[str, Any]:
        _, summary = self.train_mode(self.config.train.mode)
        return summary

    # -- evaluation ------------------------------------------------------

    @cached_property
    def eval_samples(self) -> list[Sample]:
        ec, tc = self.config.eval, self.config.train_settings()
        raw = sample_demands(self.net, ec.n_samples, tc.demand_range, self.config.eval_seed())
        return generate_labels(self.net, self.cset, self.config.rho, raw, solver=self.config.solver, workers=self.config.workers)

    def _load_checkpoints(self) -> dict[str, ModelParams | None]:
        ckpt_dir = Path(self.config.eval.checkpoint_dir) if self.config.eval.checkpoint_dir else self.path("checkpoints")
        models: dict[str, ModelParams | None] = {}
        for name in self.config.eval.models:
            if name == "untuned":
                models[name] = None
                continue
            path = ckpt_dir / f"{name}.json"
            if not path.is_file():
                logger.warning(f"[Eval] no checkpoint for {name} at {path}; model skipped")
                continue
            models[name] = gnn.load_checkpoint(path)
        return models

    def _write_report(self, report: evaluation.EvalReport) -> dict[str, Any]:
        write_json(self.path("report.json"), report.to_dict())
        write_csv(self.path("cost_errors.csv"), evaluation.cost_error_table(report))
        write_csv(self.path("dispatch_accuracy.csv"), evaluation.dispatch_table(report))
        write_csv(self.path("scatter.csv"), evaluation.emit_scatter(report))
        if not report.check_consistency():
            logger.warning("[Eval] report aggregates disagree with per-sample records")
        return {"models": report.models, "aggregates": report.to_dict()["aggregates"]}

    def evaluate(self, models: dict[str, ModelParams | None] | None = None) -> dict[str, Any]:
        models = self._load_checkpoints() if models is None else models
        meta = {"seed": self.config.seed, "eval_seed": self.config.eval_seed()}
        report = evaluation.evaluate_models(
            self.net, self.cset, self.config.rho, self.eval_samples, models, solver=self.config.solver, workers=self.config.workers, metadata=meta
        )
        return self._write_report(report)

    def reproduce(self) -> dict[str, Any]:
        summary: dict[str, Any] = {"screen": self.screen()}
        models: dict[str, ModelParams | None] = {}
        for mode in TRAIN_MODES:
            if mode in self.config.eval.models:
                models[mode], _ = self.train_mode(mode)
        if "untuned" in self.config.eval.models:
            models["untuned"] = None
        ordered = {m: models[m] for m in self.config.eval.models if m in models}
        summary["eval"] = self.evaluate(ordered)

        sweep = evaluation.data_efficiency_sweep(
            self.net,
            self.cset,
            self.config.train_settings(),
            self.config.eval.sample_counts,
            self.eval_samples,
            modes=[m for m in TRAIN_MODES if m in self.config.eval.models],
            solver=self.config.solver,
            workers=self.config.workers,
            timings=self.timings,
        )
        write_csv(self.path("data_efficiency.csv"), sweep)
        write_csv(self.path("timings.csv"), self.timings.finalize())
        summary["data_efficiency_rows"] = len(sweep)
        return summary
