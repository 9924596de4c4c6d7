"""
Circuit encoders.

``CktGnnEncoder`` runs a small undirected GNN inside every basis subgraph
and then a gated directed pass over the transformed DAG in topological
order, reading the Output node's state once every other sink has been
linked into it. ``BaselineEncoder`` runs the same directed pass straight over
the device-level DAG.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence
import logging

import networkx as nx
import numpy as np

from src.basis import BasisEntry, SubgraphBasis, TNode, TransformedDag, build_default_basis, graphlize
from src.circuit import DEVICE_TYPES, DeviceDag, Role, canonicalize, normalize_value
from src.errors import ConfigError, CycleError
from src.nn import GRUCell, Linear, ParamStore, Tensor, add, concat, matmul, mean, mul, relu, sigmoid

logger = logging.getLogger("ckt.train")

NUM_ENTRIES = 24
INPUT_TYPE = NUM_ENTRIES
OUTPUT_TYPE = NUM_ENTRIES + 1
NODE_TYPES = NUM_ENTRIES + 2
DEVICE_FEATURES = len(DEVICE_TYPES) + 1


@dataclass(frozen=True)
class EncoderConfig:
    inner_layers: int = 3
    inner_hidden: int = 16
    outer_hidden: int = 32

    def __post_init__(self) -> None:
        if self.inner_layers < 1:
            raise ConfigError("inner_layers must be at least 1")
        if self.inner_hidden < 1 or self.outer_hidden < 1:
            raise ConfigError("encoder dims must be positive")


def one_hot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def node_type(node: TNode) -> int:
    if node.role is Role.INPUT:
        return INPUT_TYPE
    if node.role is Role.OUTPUT:
        return OUTPUT_TYPE
    return node.entry_id


def entry_features(entry: BasisEntry, params: Sequence[float]) -> np.ndarray:
    """Per-device rows: device-type one-hot then the log-normalized value."""
    rows = [
        np.append(one_hot(kind.type_index, len(DEVICE_TYPES)), normalize_value(kind.kind, value))
        for kind, value in zip(entry.devices, params)
    ]
    return np.stack(rows)


@lru_cache(maxsize=64)
def _entry_adjacency(entry: BasisEntry) -> np.ndarray:
    adj = np.zeros((entry.size, entry.size))
    for a, b in entry.internal_edges:
        adj[a, b] = adj[b, a] = 1.0
    return adj


def readout_edges(node_ids: Iterable[int], edges: Sequence[tuple], output_id: int) -> List[tuple]:
    """Edges plus a link from every other sink into the output node; ground loads end as sinks."""
    has_succ = {u for u, _ in edges}
    extra = [(v, output_id) for v in sorted(node_ids) if v != output_id and v not in has_succ]
    return list(edges) + extra


class InnerGNN:
    """Undirected message passing over one subgraph, mean-pooled."""

    def __init__(self, store: ParamStore, name: str, cfg: EncoderConfig, rng: np.random.Generator):
        H = cfg.inner_hidden
        self.hidden = H
        self.message: List[Linear] = []
        self.update: List[Linear] = []
        d = DEVICE_FEATURES
        for layer in range(cfg.inner_layers):
            self.message.append(Linear(store, f"{name}.msg{layer}", d, H, rng))
            self.update.append(Linear(store, f"{name}.upd{layer}", d + H, H, rng))
            d = H

    def __call__(self, features: np.ndarray, adjacency: np.ndarray) -> Tensor:
        h = Tensor(features)
        for message, update in zip(self.message, self.update):
            agg = matmul(adjacency, relu(message(h)))
            h = update(concat([h, agg], axis=-1))
        return mean(h, axis=0)


class OuterPass:
    """Gated sum over predecessors followed by a GRU update per node."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.gru = GRUCell(store, f"{name}.gru", d_in, hidden, rng)
        self.gate = Linear(store, f"{name}.gate", hidden, hidden, rng)
        self.mapper = Linear(store, f"{name}.mapper", hidden, hidden, rng, bias=False)

    def aggregate(self, pred_states: Sequence[Tensor]) -> Tensor:
        if not pred_states:
            return Tensor(np.zeros(self.hidden))
        total = None
        for z in pred_states:
            msg = mul(sigmoid(self.gate(z)), self.mapper(z))
            total = msg if total is None else add(total, msg)
        return total

    def step(self, x, pred_states: Sequence[Tensor]) -> Tensor:
        return self.gru(x, self.aggregate(pred_states))

    def run(self, inputs: Dict[int, Tensor], edges: Sequence[tuple]) -> Dict[int, Tensor]:
        graph = nx.DiGraph()
        graph.add_nodes_from(inputs)
        graph.add_edges_from(edges)
        if not nx.is_directed_acyclic_graph(graph):
            raise CycleError("outer pass needs an acyclic graph")
        states: Dict[int, Tensor] = {}
        for v in nx.lexicographical_topological_sort(graph):
            preds = sorted(graph.predecessors(v))
            states[v] = self.step(inputs[v], [states[u] for u in preds])
        return states


class CktGnnEncoder:
    kind = "cktgnn"

    def __init__(self, store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                 basis: Optional[SubgraphBasis] = None, name: str = "enc"):
        self.cfg = cfg
        self.basis = basis or build_default_basis()
        self.inner = InnerGNN(store, f"{name}.inner", cfg, rng)
        self.outer = OuterPass(store, f"{name}.outer", NODE_TYPES + cfg.inner_hidden, cfg.outer_hidden, rng)

    @property
    def out_dim(self) -> int:
        return self.cfg.outer_hidden

    def subgraph_embedding(self, node: TNode) -> Tensor:
        if node.role is not Role.DEVICE:
            return Tensor(np.zeros(self.cfg.inner_hidden))
        entry = self.basis.entry(node.entry_id)
        return self.inner(entry_features(entry, node.params), _entry_adjacency(entry))

    def node_input(self, node: TNode, h: Tensor) -> Tensor:
        return concat([Tensor(one_hot(node_type(node), NODE_TYPES)), h])

    def encode_transformed(self, t: TransformedDag, h: Optional[Dict[int, Tensor]] = None) -> Tensor:
        if h is None:
            h = {n.id: self.subgraph_embedding(n) for n in t.nodes}
        inputs = {n.id: self.node_input(n, h[n.id]) for n in t.nodes}
        out = t.nodes[-1].id
        states = self.outer.run(inputs, readout_edges(inputs, t.edges, out))
        return states[out]

    def encode(self, g: DeviceDag, transformed: Optional[TransformedDag] = None) -> Tensor:
        t = transformed if transformed is not None else graphlize(g, self.basis)
        return self.encode_transformed(t)


BASELINE_TYPES = len(DEVICE_TYPES) + 2


class BaselineEncoder:
    """GRU-only directed encoder over device nodes."""

    kind = "baseline"

    def __init__(self, store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator, name: str = "enc"):
        self.cfg = cfg
        self.outer = OuterPass(store, f"{name}.outer", BASELINE_TYPES + 1, cfg.outer_hidden, rng)

    @property
    def out_dim(self) -> int:
        return self.cfg.outer_hidden

    @staticmethod
    def node_features(g: DeviceDag) -> Dict[int, Tensor]:
        feats = {}
        for n in g.nodes:
            if n.role is Role.INPUT:
                x = np.append(one_hot(len(DEVICE_TYPES), BASELINE_TYPES), 0.0)
            elif n.role is Role.OUTPUT:
                x = np.append(one_hot(len(DEVICE_TYPES) + 1, BASELINE_TYPES), 0.0)
            else:
                kind = n.device.kind
                x = np.append(one_hot(kind.type_index, BASELINE_TYPES), normalize_value(kind.kind, n.device.value))
            feats[n.id] = Tensor(x)
        return feats

    def encode(self, g: DeviceDag, transformed: Optional[TransformedDag] = None) -> Tensor:
        g = canonicalize(g)[0]
        feats = self.node_features(g)
        states = self.outer.run(feats, readout_edges(feats, g.edges, g.output_id))
        return states[g.output_id]


def make_encoder(kind: str, store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator):
    if kind == CktGnnEncoder.kind:
        return CktGnnEncoder(store, cfg, rng)
    if kind == BaselineEncoder.kind:
        return BaselineEncoder(store, cfg, rng)
    raise ConfigError(f"unknown encoder '{kind}' (expected cktgnn or baseline)")


def inner_gnn(entry: BasisEntry, params: Sequence[float], model: CktGnnEncoder) -> Tensor:
    return model.inner(entry_features(entry, params), _entry_adjacency(entry))


def outer_pass(t: TransformedDag, h: Dict[int, Tensor], model: CktGnnEncoder) -> Tensor:
    return model.encode_transformed(t, h)


def encode(g: DeviceDag, model: CktGnnEncoder) -> Tensor:
    return model.encode(g)


def baseline_encode(g: DeviceDag, model: BaselineEncoder) -> Tensor:
    return model.encode(g)
