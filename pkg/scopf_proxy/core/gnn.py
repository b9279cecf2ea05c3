"""GATv2 graph network in float64 numpy with hand-written reverse mode.

Per layer and head, with one weight matrix ``W`` over ``[node || edge]`` columns::

    msg_ij  = W [h_j || e_ij]
    s_ij    = a' LeakyReLU(W [h_i || 0] + msg_ij)
    gamma   = softmax of s_ij over j in N(i) (self-loop included, zero edge features)
    h_i'    = sum_j gamma_ij msg_ij + b

Heads are concatenated and softplus is applied between graph layers. The
line readout concatenates the (from, to) embeddings and runs
dense -> softplus -> dense -> sigmoid. The generator readout (used by the
end-to-end baseline) takes the embedding of each generator's bus and returns
the raw dense output.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ..utils.io import read_json, write_json
from ..utils.logger import get_logger
from .errors import ConfigError, StaleTapeError
from .grid_model import FeatureStats, Network, node_edge_features

logger = get_logger("scopf_proxy.gnn")

CHECKPOINT_VERSION = 1
NODE_FEATURES = 2
EDGE_FEATURES = 3
READOUTS = ("line", "generator")


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass(frozen=True, eq=False)
class Topology:
    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    # index into the line feature rows, -1 for self-loops
    pair_line: np.ndarray
    line_from: np.ndarray
    line_to: np.ndarray
    gen_bus: np.ndarray
    scatter_dst: sp.csr_matrix = field(repr=False)
    scatter_src: sp.csr_matrix = field(repr=False)
    scatter_from: sp.csr_matrix = field(repr=False)
    scatter_to: sp.csr_matrix = field(repr=False)
    scatter_gen: sp.csr_matrix = field(repr=False)

    @classmethod
    def create(cls, n_nodes: int, line_from, line_to, gen_bus=()) -> "Topology":
        line_from = np.asarray(line_from, dtype=np.int64)
        line_to = np.asarray(line_to, dtype=np.int64)
        gen_bus = np.asarray(gen_bus, dtype=np.int64)
        l = len(line_from)
        nodes = np.arange(n_nodes)
        lines = np.arange(l)
        # both directions of every line, then self-loops
        dst = np.concatenate([line_from, line_to, nodes])
        src = np.concatenate([line_to, line_from, nodes])
        pair_line = np.concatenate([lines, lines, np.full(n_nodes, -1)])

        def scatter(index: np.ndarray) -> sp.csr_matrix:
            cols = np.arange(len(index))
            return sp.csr_matrix((np.ones(len(index)), (index, cols)), shape=(n_nodes, len(index)))

        return cls(
            n_nodes=n_nodes,
            src=src,
            dst=dst,
            pair_line=pair_line,
            line_from=line_from,
            line_to=line_to,
            gen_bus=gen_bus,
            scatter_dst=scatter(dst),
            scatter_src=scatter(src),
            scatter_from=scatter(line_from),
            scatter_to=scatter(line_to),
            scatter_gen=scatter(gen_bus),
        )

    @classmethod
    def from_network(cls, net: Network) -> "Topology":
        return cls.create(net.n_bus, net.line_from, net.line_to, net.gen_bus_index)

    @property
    def n_lines(self) -> int:
        return len(self.line_from)

    def pair_features(self, edge_feats: np.ndarray) -> np.ndarray:
        padded = np.vstack([edge_feats, np.zeros((1, edge_feats.shape[1]))])
        return padded[self.pair_line]


@dataclass(eq=False)
class ModelParams:
    dims: dict[str, Any]
    tensors: dict[str, np.ndarray]
    seed: int
    stats: FeatureStats | None = None
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(dict(self.dims), {k: v.copy() for k, v in self.tensors.items()}, self.seed, self.stats, self.version)

    def bump(self):
        self.version += 1


@dataclass(frozen=True, eq=False)
class _HeadTape:
    x: np.ndarray
    msg: np.ndarray
    z: np.ndarray
    act: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True, eq=False)
class _LayerTape:
    h_in: np.ndarray
    heads: tuple[_HeadTape, ...]
    pre: np.ndarray


@dataclass(frozen=True, eq=False)
class ForwardTape:
    params_id: int
    params_version: int
    node_feats: np.ndarray
    edge_feats: np.ndarray
    topology: Topology
    pair_feats: np.ndarray
    layers: tuple[_LayerTape, ...]
    embeddings: np.ndarray
    z: np.ndarray
    u1: np.ndarray
    a1: np.ndarray
    output: np.ndarray


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init(seed: int, dims: dict[str, Any]) -> ModelParams:
    """Glorot-uniform weights and attention vectors, zero biases; PCG64 stream from ``seed``."""
    dims = dict(dims)
    dims.setdefault("node_in", NODE_FEATURES)
    dims.setdefault("edge_in", EDGE_FEATURES)
    dims.setdefault("readout", "line")
    dims.setdefault("leaky_relu_slope", 0.2)
    dims["hidden_dims"] = [int(v) for v in dims["hidden_dims"]]
    if dims["readout"] not in READOUTS:
        raise ConfigError("INVALID_VALUE", f"readout must be one of {READOUTS}")

    rng = np.random.Generator(np.random.PCG64(seed))
    heads, edge_in = int(dims["heads"]), int(dims["edge_in"])
    tensors: dict[str, np.ndarray] = {}
    d_in = int(dims["node_in"])
    for t, out in enumerate(dims["hidden_dims"]):
        for k in range(heads):
            tensors[f"gat{t}.head{k}.W"] = _glorot(rng, out, d_in + edge_in, (out, d_in + edge_in))
            tensors[f"gat{t}.head{k}.a"] = _glorot(rng, 1, out, (out,))
            tensors[f"gat{t}.head{k}.b"] = np.zeros(out)
        d_in = heads * out
    readout_in = 2 * d_in if dims["readout"] == "line" else d_in
    hidden = int(dims["dense_hidden"])
    tensors["dense1.W"] = _glorot(rng, hidden, readout_in, (hidden, readout_in))
    tensors["dense1.b"] = np.zeros(hidden)
    tensors["dense2.w"] = _glorot(rng, 1, hidden, (hidden,))
    tensors["dense2.b"] = np.zeros(1)
    return ModelParams(dims, tensors, int(seed))


def _group_softmax(s: np.ndarray, topo: Topology) -> np.ndarray:
    m = np.full(topo.n_nodes, -np.inf)
    np.maximum.at(m, topo.dst, s)
    ex = np.exp(s - m[topo.dst])
    denom = topo.scatter_dst @ ex
    return ex / denom[topo.dst]


def _check_inputs(params: ModelParams, node_feats: np.ndarray, edge_feats: np.ndarray, topo: Topology):
    dims = params.dims
    if node_feats.shape != (topo.n_nodes, dims["node_in"]):
        raise ConfigError("DIMENSION_MISMATCH", f"node features must be {topo.n_nodes}x{dims['node_in']}, got {node_feats.shape}")
    if edge_feats.shape != (topo.n_lines, dims["edge_in"]):
        raise ConfigError("DIMENSION_MISMATCH", f"edge features must be {topo.n_lines}x{dims['edge_in']}, got {edge_feats.shape}")
    if dims["readout"] == "generator" and len(topo.gen_bus) == 0:
        raise ConfigError("DIMENSION_MISMATCH", "generator readout needs generator buses in the topology")


def forward(params: ModelParams, node_feats: np.ndarray, edge_feats: np.ndarray, topo: Topology) -> tuple[np.ndarray, ForwardTape]:
    node_feats = np.asarray(node_feats, dtype=np.float64)
    edge_feats = np.asarray(edge_feats, dtype=np.float64)
    _check_inputs(params, node_feats, edge_feats, topo)
    slope = float(params.dims["leaky_relu_slope"])
    heads = int(params.dims["heads"])
    n_layers = len(params.dims["hidden_dims"])
    pair_feats = topo.pair_features(edge_feats)

    h = node_feats
    layers = []
    for t in range(n_layers):
        d_in = h.shape[1]
        outs, head_tapes = [], []
        for k in range(heads):
            W = params[f"gat{t}.head{k}.W"]
            x = h @ W[:, :d_in].T
            msg = x[topo.src] + pair_feats @ W[:, d_in:].T
            z = x[topo.dst] + msg
            act = np.where(z > 0, z, slope * z)
            gamma = _group_softmax(act @ params[f"gat{t}.head{k}.a"], topo)
            outs.append(topo.scatter_dst @ (gamma[:, None] * msg) + params[f"gat{t}.head{k}.b"])
            head_tapes.append(_HeadTape(x, msg, z, act, gamma))
        pre = np.concatenate(outs, axis=1)
        layers.append(_LayerTape(h, tuple(head_tapes), pre))
        h = softplus(pre) if t < n_layers - 1 else pre

    if params.dims["readout"] == "line":
        zin = np.concatenate([h[topo.line_from], h[topo.line_to]], axis=1)
    else:
        zin = h[topo.gen_bus]
    u1 = zin @ params["dense1.W"].T + params["dense1.b"]
    a1 = softplus(u1)
    logit = a1 @ params["dense2.w"] + params["dense2.b"][0]
    out = expit(logit) if params.dims["readout"] == "line" else logit

    tape = ForwardTape(
        params_id=id(params),
        params_version=params.version,
        node_feats=node_feats,
        edge_feats=edge_feats,
        topology=topo,
        pair_feats=pair_feats,
        layers=tuple(layers),
        embeddings=h,
        z=zin,
        u1=u1,
        a1=a1,
        output=out,
    )
    return out, tape


def replay(params: ModelParams, tape: ForwardTape) -> np.ndarray:
    return forward(params, tape.node_feats, tape.edge_feats, tape.topology)[0]


def backward(params: ModelParams, tape: ForwardTape, cotangent: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of ``output @ cotangent`` with respect to every tensor of ``params``."""
    if tape.params_id != id(params) or tape.params_version != params.version:
        raise StaleTapeError("STALE_TAPE", "forward tape was recorded with different parameters")
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != tape.output.shape:
        raise ConfigError("DIMENSION_MISMATCH", f"cotangent must have shape {tape.output.shape}")

    topo = tape.topology
    slope = float(params.dims["leaky_relu_slope"])
    heads = int(params.dims["heads"])
    grads = params.zeros_like()

    if params.dims["readout"] == "line":
        dlogit = cotangent * tape.output * (1.0 - tape.output)
    else:
        dlogit = cotangent
    grads["dense2.w"] = tape.a1.T @ dlogit
    grads["dense2.b"] = np.array([dlogit.sum()])
    du1 = np.outer(dlogit, params["dense2.w"]) * expit(tape.u1)
    grads["dense1.W"] = du1.T @ tape.z
    grads["dense1.b"] = du1.sum(axis=0)
    dz_in = du1 @ params["dense1.W"]

    width = tape.embeddings.shape[1]
    if params.dims["readout"] == "line":
        dh = topo.scatter_from @ dz_in[:, :width] + topo.scatter_to @ dz_in[:, width:]
    else:
        dh = topo.scatter_gen @ dz_in

    n_layers = len(tape.layers)
    for t in reversed(range(n_layers)):
        lt = tape.layers[t]
        dpre = dh * expit(lt.pre) if t < n_layers - 1 else dh
        d_in = lt.h_in.shape[1]
        out = lt.pre.shape[1] // heads
        dh_in = np.zeros_like(lt.h_in)
        for k, ht in enumerate(lt.heads):
            W = params[f"gat{t}.head{k}.W"]
            a = params[f"gat{t}.head{k}.a"]
            dout = dpre[:, k * out:(k + 1) * out]
            grads[f"gat{t}.head{k}.b"] = dout.sum(axis=0)

            dout_pairs = dout[topo.dst]
            dgamma = np.sum(dout_pairs * ht.msg, axis=1)
            dmsg = ht.gamma[:, None] * dout_pairs
            # softmax over each destination group
            group = topo.scatter_dst @ (ht.gamma * dgamma)
            ds = ht.gamma * (dgamma - group[topo.dst])
            grads[f"gat{t}.head{k}.a"] = ht.act.T @ ds
            # LeakyReLU subgradient is 0 at the kink
            dz = np.outer(ds, a) * np.where(ht.z > 0, 1.0, np.where(ht.z < 0, slope, 0.0))
            dmsg = dmsg + dz
            dx = topo.scatter_dst @ dz + topo.scatter_src @ dmsg
            grads[f"gat{t}.head{k}.W"] = np.hstack([dx.T @ lt.h_in, dmsg.T @ tape.pair_feats])
            dh_in += dx @ W[:, :d_in]
        dh = dh_in
    return grads


# ---------------------------------------------------------------------------
# Features and checkpoints
# ---------------------------------------------------------------------------


def features(params: ModelParams, net: Network, demand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return node_edge_features(net, demand, params.stats)


def predict(params: ModelParams, net: Network, demand: np.ndarray, topo: Topology | None = None) -> tuple[np.ndarray, ForwardTape]:
    node, edge = features(params, net, demand)
    return forward(params, node, edge, topo or Topology.from_network(net))


def checkpoint_dict(params: ModelParams) -> dict[str, Any]:
    dims = dict(params.dims)
    dims["hidden_dims"] = list(dims["hidden_dims"])
    return {
        "version": CHECKPOINT_VERSION,
        "dims": dims,
        "seed": params.seed,
        "params": {k: v.tolist() for k, v in params.tensors.items()},
        "feature_stats": params.stats.to_dict() if params.stats is not None else None,
    }


def params_from_dict(data: dict[str, Any]) -> ModelParams:
    if int(data.get("version", -1)) != CHECKPOINT_VERSION:
        raise ConfigError("CHECKPOINT_VERSION", f"unsupported checkpoint version {data.get('version')}")
    template = init(int(data["seed"]), data["dims"])
    tensors = {}
    for name, ref in template.tensors.items():
        if name not in data["params"]:
            raise ConfigError("CHECKPOINT_INVALID", f"checkpoint lacks tensor {name}")
        arr = np.asarray(data["params"][name], dtype=np.float64)
        if arr.shape != ref.shape:
            raise ConfigError("CHECKPOINT_INVALID", f"tensor {name} has shape {arr.shape}, expected {ref.shape}")
        tensors[name] = arr
    stats = FeatureStats.from_dict(data["feature_stats"]) if data.get("feature_stats") else None
    return ModelParams(template.dims, tensors, int(data["seed"]), stats)


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    return write_json(path, checkpoint_dict(params), sort_keys=True)


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_dict(read_json(path))
