import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import networkx as nx
import numpy as np

from ..config import GridConfig, SolverConfig
from ..utils.logger import get_logger
from ..utils.parallel import ordered_map
from .errors import ConfigError, ContractViolationError
from .grid_model import Network, ptdf_from_arrays

logger = get_logger("scopf_proxy.contingency")

SCREENING_METRIC = "base_flow_utilization"


@dataclass(frozen=True, eq=False)
class Contingency:
    outaged_line: int
    ptdf_k: np.ndarray = field(repr=False)
    limits_k: np.ndarray = field(repr=False)
    islanding: bool
    # positions of the surviving lines in net.lines, aligned with ptdf_k rows
    surviving: np.ndarray = field(repr=False)
    score: float = float("nan")


@dataclass(frozen=True, eq=False)
class ContingencySet:
    contingencies: tuple[Contingency, ...]
    selection_rule: str

    def __post_init__(self):
        ids = [c.outaged_line for c in self.contingencies]
        if len(set(ids)) != len(ids):
            raise ContractViolationError("DUPLICATE_CONTINGENCY", f"Contingency set lists a line twice: {ids}")
        islanded = [c.outaged_line for c in self.contingencies if c.islanding]
        if islanded:
            raise ContractViolationError("ISLANDING_CONTINGENCY", f"Islanding outages cannot enter a set: {islanded}")

    def __len__(self) -> int:
        return len(self.contingencies)

    def __iter__(self) -> Iterator[Contingency]:
        return iter(self.contingencies)

    @property
    def line_ids(self) -> list[int]:
        return [c.outaged_line for c in self.contingencies]

    def to_dict(self) -> dict[str, Any]:
        return {
            "selection_rule": self.selection_rule,
            "line_ids": self.line_ids,
            "scores": [c.score for c in self.contingencies],
        }


def contingency_ptdf(net: Network, line_id: int, short_term_rating_factor: float = 1.0) -> Contingency:
    if line_id not in net.line_index:
        raise ConfigError("UNKNOWN_LINE", f"Line {line_id} is not an in-service line of {net.name}")
    j = net.line_index[line_id]
    surviving = np.array([i for i in range(net.n_line) if i != j], dtype=np.int64)

    graph = net.graph()
    outaged = net.lines[j]
    graph.remove_edge(outaged.from_bus, outaged.to_bus, key=line_id)
    if not nx.is_connected(graph):
        return Contingency(line_id, np.zeros((0, net.n_bus)), np.zeros(0), True, surviving)

    x = np.array([net.lines[i].reactance_x for i in surviving])
    ptdf_k = ptdf_from_arrays(net.n_bus, net.slack_index, net.line_from[surviving], net.line_to[surviving], x)
    limits_k = net.flow_limits[surviving] * short_term_rating_factor
    return Contingency(line_id, ptdf_k, limits_k, False, surviving)


def enumerate_contingencies(net: Network, short_term_rating_factor: float = 1.0, workers: int = 1) -> list[Contingency]:
    ids = [ln.id for ln in net.lines]
    return ordered_map(lambda lid: contingency_ptdf(net, lid, short_term_rating_factor), ids, workers)


def build_contingency_set(
    net: Network,
    line_ids: Sequence[int],
    selection_rule: str = "explicit",
    short_term_rating_factor: float = 1.0,
    workers: int = 1,
) -> ContingencySet:
    built = ordered_map(lambda lid: contingency_ptdf(net, int(lid), short_term_rating_factor), list(line_ids), workers)
    return ContingencySet(tuple(built), selection_rule)


def contingency_set_from_dict(net: Network, data: dict[str, Any], short_term_rating_factor: float = 1.0) -> ContingencySet:
    cset = build_contingency_set(net, data["line_ids"], data.get("selection_rule", "explicit"), short_term_rating_factor)
    scores = data.get("scores") or [float("nan")] * len(cset)
    return ContingencySet(
        tuple(
            Contingency(c.outaged_line, c.ptdf_k, c.limits_k, c.islanding, c.surviving, float(s))
            for c, s in zip(cset.contingencies, scores)
        ),
        cset.selection_rule,
    )


def screen_contingencies(
    net: Network,
    fraction: float,
    *,
    grid: GridConfig | None = None,
    solver: SolverConfig | None = None,
    max_contingencies: int | None = None,
    workers: int = 1,
) -> ContingencySet:
    """Keep the most utilized non-islanding outages (ties broken by ascending line id)."""
    from .opf_problems import solve_dcopf

    if not 0.0 < fraction <= 1.0:
        raise ConfigError("INVALID_VALUE", f"contingency fraction must lie in (0, 1], got {fraction}")
    grid = grid or GridConfig()

    base = solve_dcopf(net, net.demand, solver)
    utilization = np.abs(base.line_flows) / net.flow_limits

    candidates = [c for c in enumerate_contingencies(net, grid.short_term_rating_factor, workers) if not c.islanding]
    skipped = net.n_line - len(candidates)
    if skipped:
        logger.info(f"[Contingency] {skipped} islanding outages excluded")

    scored = [
        Contingency(c.outaged_line, c.ptdf_k, c.limits_k, False, c.surviving, float(utilization[net.line_index[c.outaged_line]]))
        for c in candidates
    ]
    scored.sort(key=lambda c: (-c.score, c.outaged_line))

    keep = math.ceil(fraction * len(scored) - 1e-9) if scored else 0
    if max_contingencies is not None:
        keep = min(keep, max_contingencies)
    rule = f"{SCREENING_METRIC};fraction={fraction:g}"
    if max_contingencies is not None:
        rule += f";max={max_contingencies}"

    cset = ContingencySet(tuple(scored[:keep]), rule)
    logger.info(f"[Contingency] kept {len(cset)} of {len(scored)} outages: {cset.line_ids}")
    return cset
