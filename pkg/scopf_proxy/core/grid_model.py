"""Network data: MATPOWER parsing, PTDF and GNN input features.

All power quantities are per-unit on ``base_mva``. Costs are converted so that
the generation cost reads ``0.5 * p @ C @ p + c @ p`` with ``p`` in p.u.
"""

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import networkx as nx
import numpy as np
import scipy.linalg

from ..config import GridConfig
from ..utils.io import read_json, write_json
from ..utils.logger import get_logger
from .errors import CaseParseError, TopologyError, UnsupportedCostError

logger = get_logger("scopf_proxy.grid")

NETWORK_FORMAT_VERSION = 1
REQUIRED_TABLES = ("bus", "gen", "branch", "gencost")

# MATPOWER 列索引 (0-based)
BUS_I, BUS_TYPE, PD = 0, 1, 2
F_BUS, T_BUS, BR_R, BR_X, RATE_A, BR_STATUS = 0, 1, 2, 3, 5, 10
GEN_BUS, GEN_STATUS, PMAX, RAMP_30 = 0, 7, 8, 18
COST_MODEL, COST_NCOST, COST_COEF = 0, 3, 4

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")
_FUNC_RE = re.compile(r"function\s+\w+\s*=\s*(\w+)")


@dataclass(frozen=True)
class Bus:
    id: int
    demand_mw: float
    bus_susceptance: float
    bus_type: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "bus_type": self.bus_type,
            "demand_mw": self.demand_mw,
            "bus_susceptance": self.bus_susceptance,
        }


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    resistance_r: float
    reactance_x: float
    flow_limit: float
    status: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "from_bus": self.from_bus,
            "to_bus": self.to_bus,
            "resistance_r": self.resistance_r,
            "reactance_x": self.reactance_x,
            "flow_limit": self.flow_limit,
            "status": self.status,
        }


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_max: float
    cost_quadratic: float
    cost_linear: float
    ramp_up: float
    ramp_down: float

    @property
    def zero_capacity(self) -> bool:
        return self.p_max == 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "bus": self.bus,
            "p_max": self.p_max,
            "cost_quadratic": self.cost_quadratic,
            "cost_linear": self.cost_linear,
            "ramp_up": self.ramp_up,
            "ramp_down": self.ramp_down,
        }


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Network:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    slack_bus: int
    gen_incidence: np.ndarray = field(repr=False)
    ptdf: np.ndarray = field(repr=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def line_index(self) -> dict[int, int]:
        return {ln.id: j for j, ln in enumerate(self.lines)}

    @property
    def slack_index(self) -> int:
        return self.bus_index[self.slack_bus]

    @cached_property
    def demand(self) -> np.ndarray:
        return _frozen([b.demand_mw / self.base_mva for b in self.buses])

    @cached_property
    def p_max(self) -> np.ndarray:
        return _frozen([g.p_max for g in self.generators])

    @cached_property
    def cost_quadratic(self) -> np.ndarray:
        return _frozen([g.cost_quadratic for g in self.generators])

    @cached_property
    def cost_linear(self) -> np.ndarray:
        return _frozen([g.cost_linear for g in self.generators])

    @cached_property
    def ramp_up(self) -> np.ndarray:
        return _frozen([g.ramp_up for g in self.generators])

    @cached_property
    def ramp_down(self) -> np.ndarray:
        return _frozen([g.ramp_down for g in self.generators])

    @cached_property
    def flow_limits(self) -> np.ndarray:
        return _frozen([ln.flow_limit for ln in self.lines])

    @cached_property
    def line_from(self) -> np.ndarray:
        return np.array([self.bus_index[ln.from_bus] for ln in self.lines], dtype=np.int64)

    @cached_property
    def line_to(self) -> np.ndarray:
        return np.array([self.bus_index[ln.to_bus] for ln in self.lines], dtype=np.int64)

    @cached_property
    def gen_bus_index(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=np.int64)

    def generation_cost(self, p: np.ndarray) -> float:
        p = np.asarray(p, dtype=np.float64)
        return float(0.5 * p @ (self.cost_quadratic * p) + self.cost_linear @ p)

    def line_flows(self, p: np.ndarray, demand: np.ndarray) -> np.ndarray:
        return self.ptdf @ (self.gen_incidence @ np.asarray(p, dtype=np.float64) - np.asarray(demand, dtype=np.float64))

    def graph(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        g.add_nodes_from(b.id for b in self.buses)
        g.add_edges_from((ln.from_bus, ln.to_bus, ln.id) for ln in self.lines)
        return g


# ---------------------------------------------------------------------------
# PTDF
# ---------------------------------------------------------------------------


def ptdf_from_arrays(n_bus: int, slack_index: int, from_idx: np.ndarray, to_idx: np.ndarray, reactance: np.ndarray) -> np.ndarray:
    """PTDF from branch data; positive flow runs from -> to, slack column is zero."""
    l = len(from_idx)
    incidence = np.zeros((l, n_bus))
    rows = np.arange(l)
    incidence[rows, from_idx] = 1.0
    incidence[rows, to_idx] = -1.0
    b = 1.0 / np.asarray(reactance, dtype=np.float64)

    keep = np.array([i for i in range(n_bus) if i != slack_index], dtype=np.int64)
    a_red = incidence[:, keep]
    b_red = a_red.T @ (b[:, None] * a_red)
    try:
        factor = scipy.linalg.cho_factor(b_red, lower=True, check_finite=True)
    except np.linalg.LinAlgError as e:
        raise TopologyError("SINGULAR_SUSCEPTANCE", f"Reduced susceptance matrix is singular: {e}") from e
    m_red = scipy.linalg.cho_solve(factor, (b[:, None] * a_red).T).T

    ptdf = np.zeros((l, n_bus))
    ptdf[:, keep] = m_red
    return ptdf


def compute_ptdf(net: Network) -> np.ndarray:
    x = np.array([ln.reactance_x for ln in net.lines])
    return ptdf_from_arrays(net.n_bus, net.slack_index, net.line_from, net.line_to, x)


def _bus_susceptances(bus_ids: Sequence[int], lines: Sequence[Line]) -> dict[int, float]:
    out = {bid: 0.0 for bid in bus_ids}
    for ln in lines:
        inv = 1.0 / ln.reactance_x
        out[ln.from_bus] += inv
        out[ln.to_bus] += inv
    return out


def _check_connected(bus_ids: Sequence[int], lines: Sequence[Line]):
    g = nx.MultiGraph()
    g.add_nodes_from(bus_ids)
    g.add_edges_from((ln.from_bus, ln.to_bus) for ln in lines)
    if nx.is_connected(g):
        return
    components = sorted(sorted(c) for c in nx.connected_components(g))
    raise TopologyError(
        "DISCONNECTED_NETWORK",
        f"Network is disconnected into {len(components)} components",
        {"components": components},
    )


def build_network(
    name: str,
    base_mva: float,
    buses: Sequence[Bus],
    lines: Sequence[Line],
    generators: Sequence[Generator],
    slack_bus: int,
) -> Network:
    """Assemble a Network, recomputing susceptances, incidence and PTDF."""
    bus_ids = [b.id for b in buses]
    if len(set(bus_ids)) != len(bus_ids):
        raise CaseParseError("DUPLICATE_BUS", "Bus ids must be unique")
    if slack_bus not in set(bus_ids):
        raise CaseParseError("NO_SLACK_BUS", f"Slack bus {slack_bus} is not a bus of the network")
    _check_connected(bus_ids, lines)

    susc = _bus_susceptances(bus_ids, lines)
    buses = tuple(Bus(b.id, b.demand_mw, susc[b.id], b.bus_type) for b in buses)
    index = {bid: i for i, bid in enumerate(bus_ids)}

    incidence = np.zeros((len(buses), len(generators)))
    for k, gen in enumerate(generators):
        if gen.bus not in index:
            raise CaseParseError("UNKNOWN_BUS", f"Generator {gen.id} sits on unknown bus {gen.bus}")
        incidence[index[gen.bus], k] = 1.0

    from_idx = np.array([index[ln.from_bus] for ln in lines], dtype=np.int64)
    to_idx = np.array([index[ln.to_bus] for ln in lines], dtype=np.int64)
    x = np.array([ln.reactance_x for ln in lines])
    ptdf = ptdf_from_arrays(len(buses), index[slack_bus], from_idx, to_idx, x)

    return Network(
        name=name,
        base_mva=float(base_mva),
        buses=buses,
        lines=tuple(lines),
        generators=tuple(generators),
        slack_bus=int(slack_bus),
        gen_incidence=_frozen(incidence),
        ptdf=_frozen(ptdf),
    )


# ---------------------------------------------------------------------------
# MATPOWER parsing
# ---------------------------------------------------------------------------


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_rows(body: str) -> list[list[float]]:
    rows = []
    for chunk in re.split(r"[;\n]", body):
        tokens = [t for t in re.split(r"[\s,]+", chunk.strip()) if t]
        if tokens:
            rows.append([float(t) for t in tokens])
    return rows


def _read_tables(text: str) -> dict[str, list[list[float]]]:
    tables: dict[str, list[list[float]]] = {}
    for name, body in _TABLE_RE.findall(text):
        try:
            tables[name] = _parse_rows(body)
        except ValueError:
            logger.debug(f"[Grid] ignoring non-numeric table mpc.{name}")
    return tables


def _require_columns(table: str, rows: list[list[float]], min_cols: int):
    for i, row in enumerate(rows, start=1):
        if len(row) < min_cols:
            raise CaseParseError(
                "MALFORMED_ROW", f"mpc.{table} row {i} has {len(row)} columns, expected at least {min_cols}"
            )


def parse_case(path: str | Path, grid: GridConfig | None = None) -> Network:
    grid = grid or GridConfig()
    path = Path(path)
    if not path.is_file():
        raise CaseParseError("CASE_NOT_FOUND", f"Case file not found: {path}")
    text = _strip_comments(path.read_text(encoding="utf-8"))

    m = _SCALAR_RE.search(text)
    if m is None:
        raise CaseParseError("MISSING_TABLE", "Case file has no mpc.baseMVA", {"table": "baseMVA"})
    base_mva = float(m.group(1))
    if base_mva <= 0:
        raise CaseParseError("INVALID_VALUE", f"baseMVA must be positive, got {base_mva}")

    tables = _read_tables(text)
    for name in REQUIRED_TABLES:
        if name not in tables:
            raise CaseParseError("MISSING_TABLE", f"Case file has no mpc.{name} table", {"table": name})
    for name in sorted(set(tables) - set(REQUIRED_TABLES)):
        logger.debug(f"[Grid] ignoring table mpc.{name}")

    bus_rows, gen_rows, branch_rows, cost_rows = (tables[t] for t in REQUIRED_TABLES)
    _require_columns("bus", bus_rows, PD + 1)
    _require_columns("gen", gen_rows, PMAX + 1)
    _require_columns("branch", branch_rows, RATE_A + 1)
    _require_columns("gencost", cost_rows, COST_COEF)
    if len(cost_rows) < len(gen_rows):
        raise CaseParseError("MALFORMED_ROW", f"mpc.gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")
    if len(cost_rows) > len(gen_rows):
        logger.debug("[Grid] ignoring reactive gencost rows")

    buses = [Bus(id=int(r[BUS_I]), demand_mw=float(r[PD]), bus_susceptance=0.0, bus_type=int(r[BUS_TYPE])) for r in bus_rows]
    slack = next((b.id for b in buses if b.bus_type == 3), None)
    if slack is None:
        raise CaseParseError("NO_SLACK_BUS", "No bus of type 3 in mpc.bus")

    lines = []
    for row_no, r in enumerate(branch_rows, start=1):
        status = r[BR_STATUS] if len(r) > BR_STATUS else 1.0
        if status <= 0:
            logger.debug(f"[Grid] dropping out-of-service branch {row_no}")
            continue
        f_bus, t_bus, x = int(r[F_BUS]), int(r[T_BUS]), float(r[BR_X])
        if f_bus == t_bus:
            raise CaseParseError("INVALID_BRANCH", f"Branch {row_no} connects bus {f_bus} to itself")
        if x <= 0:
            raise CaseParseError("INVALID_BRANCH", f"Branch {row_no} has non-positive reactance {x}")
        rate = float(r[RATE_A])
        limit = rate / base_mva if rate > 0 else grid.unlimited_rate_pu
        lines.append(Line(row_no, f_bus, t_bus, float(r[BR_R]), x, limit, True))

    gens = []
    for row_no, (r, c) in enumerate(zip(gen_rows, cost_rows), start=1):
        if r[GEN_STATUS] <= 0:
            logger.debug(f"[Grid] dropping out-of-service generator {row_no}")
            continue
        model, ncost = int(c[COST_MODEL]), int(c[COST_NCOST])
        if model != 2:
            raise UnsupportedCostError("UNSUPPORTED_COST", f"gencost row {row_no} uses model {model}; only polynomial (2) is supported")
        if ncost > 3 or ncost < 1:
            raise UnsupportedCostError("UNSUPPORTED_COST", f"gencost row {row_no} has degree {ncost - 1}; at most 2 is supported")
        coefs = list(c[COST_COEF:COST_COEF + ncost])
        if len(coefs) < ncost:
            raise CaseParseError("MALFORMED_ROW", f"gencost row {row_no} lists fewer than {ncost} coefficients")
        coefs = [0.0] * (3 - ncost) + coefs  # -> (c2, c1, c0)
        c2, c1 = coefs[0], coefs[1]
        if c2 < 0:
            raise UnsupportedCostError("UNSUPPORTED_COST", f"gencost row {row_no} has a negative quadratic term")

        p_max = max(float(r[PMAX]), 0.0) / base_mva
        ramp30 = float(r[RAMP_30]) if len(r) > RAMP_30 else 0.0
        ramp = ramp30 / base_mva if ramp30 > 0 else grid.ramp_fraction * p_max
        gen = Generator(
            id=row_no,
            bus=int(r[GEN_BUS]),
            p_max=p_max,
            cost_quadratic=2.0 * c2 * base_mva**2,
            cost_linear=c1 * base_mva,
            ramp_up=ramp,
            ramp_down=ramp,
        )
        if gen.zero_capacity:
            logger.debug(f"[Grid] generator {row_no} has zero capacity; kept and flagged")
        gens.append(gen)

    m_name = _FUNC_RE.search(text)
    name = m_name.group(1) if m_name else path.stem
    net = build_network(name, base_mva, buses, lines, gens, slack)
    logger.info(f"[Grid] parsed {name}: n={net.n_bus} g={net.n_gen} l={net.n_line}")
    return net


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStats:
    node_mean: tuple[float, ...]
    node_std: tuple[float, ...]
    edge_mean: tuple[float, ...]
    edge_std: tuple[float, ...]

    @classmethod
    def fit(cls, net: Network, demands: Sequence[np.ndarray]) -> "FeatureStats":
        nodes = np.vstack([node_edge_features(net, d)[0] for d in demands])
        edges = node_edge_features(net, net.demand)[1]

        def _std(x):
            s = x.std(axis=0)
            return np.where(s > 1e-12, s, 1.0)

        return cls(
            node_mean=tuple(float(v) for v in nodes.mean(axis=0)),
            node_std=tuple(float(v) for v in _std(nodes)),
            edge_mean=tuple(float(v) for v in edges.mean(axis=0)),
            edge_std=tuple(float(v) for v in _std(edges)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_mean": list(self.node_mean),
            "node_std": list(self.node_std),
            "edge_mean": list(self.edge_mean),
            "edge_std": list(self.edge_std),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FeatureStats":
        return cls(*(tuple(float(v) for v in data[k]) for k in ("node_mean", "node_std", "edge_mean", "edge_std")))


def node_edge_features(net: Network, demand: np.ndarray, stats: FeatureStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Node rows (d_i, B_i) and edge rows (r, x, flow limit), standardized when stats are given."""
    demand = np.asarray(demand, dtype=np.float64)
    if demand.shape != (net.n_bus,):
        raise ValueError(f"demand must have length {net.n_bus}, got {demand.shape}")
    nodes = np.column_stack([demand, [b.bus_susceptance for b in net.buses]])
    edges = np.array([[ln.resistance_r, ln.reactance_x, ln.flow_limit] for ln in net.lines], dtype=np.float64).reshape(-1, 3)
    if stats is not None:
        nodes = (nodes - np.asarray(stats.node_mean)) / np.asarray(stats.node_std)
        edges = (edges - np.asarray(stats.edge_mean)) / np.asarray(stats.edge_std)
    return nodes, edges


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def network_to_dict(net: Network) -> dict[str, Any]:
    """Canonical form; key order: format_version, name, base_mva, slack_bus, buses, lines, generators, ptdf."""
    return {
        "format_version": NETWORK_FORMAT_VERSION,
        "name": net.name,
        "base_mva": net.base_mva,
        "slack_bus": net.slack_bus,
        "buses": [b.to_dict() for b in net.buses],
        "lines": [ln.to_dict() for ln in net.lines],
        "generators": [g.to_dict() for g in net.generators],
        "ptdf": net.ptdf.tolist(),
    }


def network_from_dict(data: dict[str, Any]) -> Network:
    buses = [Bus(int(b["id"]), float(b["demand_mw"]), float(b["bus_susceptance"]), int(b["bus_type"])) for b in data["buses"]]
    lines = [
        Line(
            int(d["id"]),
            int(d["from_bus"]),
            int(d["to_bus"]),
            float(d["resistance_r"]),
            float(d["reactance_x"]),
            float(d["flow_limit"]),
            bool(d["status"]),
        )
        for d in data["lines"]
    ]
    gens = [
        Generator(
            int(d["id"]),
            int(d["bus"]),
            float(d["p_max"]),
            float(d["cost_quadratic"]),
            float(d["cost_linear"]),
            float(d["ramp_up"]),
            float(d["ramp_down"]),
        )
        for d in data["generators"]
    ]
    net = build_network(data["name"], float(data["base_mva"]), buses, lines, gens, int(data["slack_bus"]))
    if "ptdf" in data:
        stored = np.asarray(data["ptdf"], dtype=np.float64).reshape(net.n_line, net.n_bus)
        object.__setattr__(net, "ptdf", _frozen(stored))
    return net


def dump_network_json(net: Network, path: str | Path) -> Path:
    return write_json(path, network_to_dict(net))


def load_network_json(path: str | Path) -> Network:
    return network_from_dict(read_json(path))
