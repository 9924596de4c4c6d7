"""
Circuit data model: the device-level DAG, the electrical stage graph,
validity checking and canonicalization.

Ground is implicit in a DeviceDag: a device node without successors
terminates at the Gnd stage node. Elements are always stored in DAG
orientation; a feedback Gm keeps that orientation and its direction flag
makes the ``to`` terminal the controlling node.
"""

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import hashlib
import logging
import math

import networkx as nx

from src.errors import ConversionError, CycleError, StructuralError

logger = logging.getLogger("ckt.circuit")


class Kind(str, Enum):
    GM = "gm"
    R = "r"
    C = "c"


class Polarity(str, Enum):
    POSITIVE = "+"
    NEGATIVE = "-"


class Direction(str, Enum):
    FEEDFORWARD = "fwd"
    FEEDBACK = "fbk"


class Role(str, Enum):
    INPUT = "input"
    OUTPUT = "output"
    DEVICE = "device"


# Log-uniform sampling ranges; also the normalization ranges for features
VALUE_RANGES: Dict[Kind, Tuple[float, float]] = {
    Kind.R: (1e5, 1e7),
    Kind.C: (1e-14, 1e-12),
    Kind.GM: (1e-4, 1e-2),
}

BUCKET_WIDTH = 0.01


@dataclass(frozen=True)
class DeviceKind:
    kind: Kind
    polarity: Optional[Polarity] = None
    direction: Optional[Direction] = None

    def __post_init__(self) -> None:
        if self.kind is Kind.GM:
            if self.polarity is None or self.direction is None:
                raise StructuralError("Gm devices need both polarity and direction")
        elif self.polarity is not None or self.direction is not None:
            raise StructuralError(f"{self.kind.value} devices carry no polarity/direction")

    @property
    def is_gm(self) -> bool:
        return self.kind is Kind.GM

    @property
    def is_feedforward_gm(self) -> bool:
        return self.kind is Kind.GM and self.direction is Direction.FEEDFORWARD

    @property
    def type_index(self) -> int:
        """Position in DEVICE_TYPES (gm+fwd, gm-fwd, gm+fbk, gm-fbk, r, c)."""
        return DEVICE_TYPES.index(self)

    @property
    def label(self) -> str:
        if self.kind is Kind.GM:
            return f"gm{self.polarity.value}{self.direction.value}"
        return self.kind.value

    @classmethod
    def gm(cls, polarity: Polarity = Polarity.POSITIVE,
           direction: Direction = Direction.FEEDFORWARD) -> "DeviceKind":
        return cls(Kind.GM, polarity, direction)


GM_VARIANTS: Tuple[DeviceKind, ...] = (
    DeviceKind.gm(Polarity.POSITIVE, Direction.FEEDFORWARD),
    DeviceKind.gm(Polarity.NEGATIVE, Direction.FEEDFORWARD),
    DeviceKind.gm(Polarity.POSITIVE, Direction.FEEDBACK),
    DeviceKind.gm(Polarity.NEGATIVE, Direction.FEEDBACK),
)
R_KIND = DeviceKind(Kind.R)
C_KIND = DeviceKind(Kind.C)
DEVICE_TYPES: Tuple[DeviceKind, ...] = GM_VARIANTS + (R_KIND, C_KIND)


def value_bucket(value: float) -> int:
    """Log10-space bucket of width 0.01."""
    return int(round(math.log10(value) / BUCKET_WIDTH))


def normalize_value(kind: Kind, value: float) -> float:
    """Map a device value to [0, 1] in log space over its sampling range."""
    lo, hi = VALUE_RANGES[kind]
    x = (math.log10(value) - math.log10(lo)) / (math.log10(hi) - math.log10(lo))
    return min(1.0, max(0.0, x))


def denormalize_value(kind: Kind, x: float) -> float:
    lo, hi = VALUE_RANGES[kind]
    x = min(1.0, max(0.0, float(x)))
    return 10.0 ** (math.log10(lo) + x * (math.log10(hi) - math.log10(lo)))


@dataclass(frozen=True)
class DeviceInstance:
    kind: DeviceKind
    value: float

    def __post_init__(self) -> None:
        if not (self.value > 0 and math.isfinite(self.value)):
            raise StructuralError(f"device value must be positive and finite, got {self.value}")

    @property
    def bucket(self) -> int:
        return value_bucket(self.value)


@dataclass(frozen=True)
class DagNode:
    id: int
    role: Role
    device: Optional[DeviceInstance] = None

    def __post_init__(self) -> None:
        if (self.role is Role.DEVICE) != (self.device is not None):
            raise StructuralError(f"node {self.id}: only device nodes carry a device")

    @property
    def label(self) -> str:
        if self.device is None:
            return self.role.value
        return self.device.kind.label


@dataclass(frozen=True)
class DeviceDag:
    """Device-as-node circuit graph (the encoder-facing view)."""

    nodes: Tuple[DagNode, ...]
    edges: Tuple[Tuple[int, int], ...]
    stage_count: int
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate node ids")
        known = set(ids)
        for src, dst in self.edges:
            if src not in known or dst not in known:
                raise StructuralError(f"edge ({src}, {dst}) references a missing node")
            if src == dst:
                raise StructuralError(f"self loop on node {src}")
        if len(set(self.edges)) != len(self.edges):
            raise StructuralError("duplicate edges")

    @cached_property
    def _index(self) -> Dict[int, DagNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _succ(self) -> Dict[int, Tuple[int, ...]]:
        out: Dict[int, List[int]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            out[src].append(dst)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def _pred(self) -> Dict[int, Tuple[int, ...]]:
        out: Dict[int, List[int]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            out[dst].append(src)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    def node(self, node_id: int) -> DagNode:
        return self._index[node_id]

    def succs(self, node_id: int) -> Tuple[int, ...]:
        return self._succ[node_id]

    def preds(self, node_id: int) -> Tuple[int, ...]:
        return self._pred[node_id]

    def ids_with_role(self, role: Role) -> List[int]:
        return [n.id for n in self.nodes if n.role is role]

    @property
    def device_ids(self) -> List[int]:
        return self.ids_with_role(Role.DEVICE)

    @property
    def input_id(self) -> int:
        ids = self.ids_with_role(Role.INPUT)
        if len(ids) != 1:
            raise StructuralError(f"expected one input node, found {len(ids)}")
        return ids[0]

    @property
    def output_id(self) -> int:
        ids = self.ids_with_role(Role.OUTPUT)
        if len(ids) != 1:
            raise StructuralError(f"expected one output node, found {len(ids)}")
        return ids[0]

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        for n in self.nodes:
            graph.add_node(n.id)
        graph.add_edges_from(self.edges)
        return graph


@dataclass(frozen=True)
class ValidityReport:
    is_valid_dag: bool
    is_valid_circuit: bool
    violations: Tuple[str, ...]


RULE_SINGLE_IO = "single-io"
RULE_ACYCLIC = "acyclic"
RULE_CONNECTED = "connected"
RULE_MAIN_PATH = "main-path"
RULE_STAGE_COUNT = "stage-count"
RULE_PARALLEL_GM = "parallel-gm"

STAGE_COUNTS = (2, 3)


def main_path(g: DeviceDag) -> Optional[List[int]]:
    """
    Longest Input→Output path made only of feedforward Gm devices.

    Returns the device ids along the path, or None when no such path exists.
    """
    try:
        source, sink = g.input_id, g.output_id
    except StructuralError:
        return None
    allowed = {source, sink}
    allowed.update(
        d for d in g.device_ids if g.node(d).device.kind.is_feedforward_gm
    )
    sub = g.to_networkx().subgraph(allowed)
    if not nx.is_directed_acyclic_graph(sub):
        return None
    best: Dict[int, Tuple[int, Tuple[int, ...]]] = {source: (0, ())}
    for v in nx.lexicographical_topological_sort(sub):
        if v not in best:
            continue
        length, path = best[v]
        for w in sorted(sub.successors(v)):
            cand = (length + 1, path + (w,))
            if w not in best or cand[0] > best[w][0] or (
                cand[0] == best[w][0] and cand[1] < best[w][1]
            ):
                best[w] = cand
    if sink not in best or best[sink][0] < 2:
        return None
    return list(best[sink][1][:-1])


def validate_circuit(g: DeviceDag) -> ValidityReport:
    """
    Check the op-amp validity rules in order: single-io, acyclic, connected,
    main-path, stage-count (2 or 3 Gm on the main path) and parallel-gm.
    """
    violations: List[str] = []
    inputs = g.ids_with_role(Role.INPUT)
    outputs = g.ids_with_role(Role.OUTPUT)
    if len(inputs) != 1 or len(outputs) != 1:
        violations.append(RULE_SINGLE_IO)

    graph = g.to_networkx()
    acyclic = nx.is_directed_acyclic_graph(graph)
    if not acyclic:
        violations.append(RULE_ACYCLIC)

    reached = set(inputs)
    for i in inputs:
        reached |= nx.descendants(graph, i)
    if not inputs or not outputs or reached != set(graph.nodes):
        violations.append(RULE_CONNECTED)

    path = None if violations else main_path(g)
    if path is None:
        violations.append(RULE_MAIN_PATH)
    elif len(path) not in STAGE_COUNTS:
        violations.append(RULE_STAGE_COUNT)

    # two Gm between the same pair of stage nodes match no basis entry
    terminals = Counter(
        (g.preds(d), g.succs(d)) for d in g.device_ids if g.node(d).device.kind.is_gm
    )
    if any(n > 1 for n in terminals.values()):
        violations.append(RULE_PARALLEL_GM)

    is_valid_dag = not any(v in violations for v in (RULE_SINGLE_IO, RULE_ACYCLIC, RULE_CONNECTED))
    return ValidityReport(
        is_valid_dag=is_valid_dag,
        is_valid_circuit=not violations,
        violations=tuple(violations),
    )


# =========================
# Canonical form
# =========================

_ROLE_ORDER = {Role.INPUT: 0, Role.DEVICE: 1, Role.OUTPUT: 2}
_WL_ITERATIONS = 4


def _depths(graph: nx.DiGraph) -> Dict[int, int]:
    depth: Dict[int, int] = {}
    for v in nx.topological_sort(graph):
        preds = list(graph.predecessors(v))
        depth[v] = 1 + max(depth[p] for p in preds) if preds else 0
    return depth


def _node_key_parts(n: DagNode) -> Tuple[int, int, int, float]:
    if n.device is None:
        return (_ROLE_ORDER[n.role], -1, 0, 0.0)
    return (_ROLE_ORDER[n.role], n.device.kind.type_index, n.device.bucket, n.device.value)


def canonicalize(g: DeviceDag) -> Tuple[DeviceDag, int]:
    """
    Relabel ``g`` in canonical order and return it with a 64-bit hash.

    The order is topological (longest-path depth from the sources) with ties
    broken by device-type index, then value bucket, then Weisfeiler-Lehman
    node hashes in both edge directions. The hash only looks at topology and
    value buckets, so circuits equal up to relabeling and bucket rounding
    share it.
    """
    graph = g.to_networkx()
    if not nx.is_directed_acyclic_graph(graph):
        raise CycleError("cannot canonicalize a cyclic graph")

    depth = _depths(graph)
    height = _depths(graph.reverse(copy=True))
    for n in g.nodes:
        bucket = n.device.bucket if n.device is not None else 0
        graph.nodes[n.id]["label"] = f"{n.label}|{bucket}|{depth[n.id]}|{height[n.id]}"
    reverse = graph.reverse(copy=True)

    fwd = nx.weisfeiler_lehman_subgraph_hashes(graph, node_attr="label", iterations=_WL_ITERATIONS)
    bwd = nx.weisfeiler_lehman_subgraph_hashes(reverse, node_attr="label", iterations=_WL_ITERATIONS)

    def sort_key(n: DagNode):
        role, type_idx, bucket, value = _node_key_parts(n)
        return (depth[n.id], role, type_idx, bucket, fwd[n.id][-1], bwd[n.id][-1], value, n.id)

    ordered = sorted(g.nodes, key=sort_key)
    relabel = {n.id: i for i, n in enumerate(ordered)}
    nodes = tuple(DagNode(relabel[n.id], n.role, n.device) for n in ordered)
    edges = tuple(sorted((relabel[s], relabel[d]) for s, d in g.edges))
    canon = DeviceDag(nodes=nodes, edges=edges, stage_count=g.stage_count, name=g.name)

    digest = hashlib.sha256()
    digest.update(nx.weisfeiler_lehman_graph_hash(graph, node_attr="label", iterations=_WL_ITERATIONS).encode())
    digest.update(b"/")
    digest.update(nx.weisfeiler_lehman_graph_hash(reverse, node_attr="label", iterations=_WL_ITERATIONS).encode())
    digest.update(f"/{len(g.nodes)}/{len(g.edges)}/{g.stage_count}".encode())
    return canon, int(digest.hexdigest()[:16], 16)


def circuit_hash(g: DeviceDag) -> int:
    return canonicalize(g)[1]


def format_hash(h: int) -> str:
    return f"{h:016x}"


# =========================
# Stage graph
# =========================

GND = "gnd"
IN = "in"
OUT = "out"


@dataclass(frozen=True)
class StageElement:
    device: DeviceInstance
    src: str
    dst: str

    @property
    def controlling_node(self) -> str:
        """Node whose voltage drives a Gm element."""
        if self.device.kind.direction is Direction.FEEDBACK:
            return self.dst
        return self.src

    @property
    def output_node(self) -> str:
        if self.device.kind.direction is Direction.FEEDBACK:
            return self.src
        return self.dst


@dataclass(frozen=True)
class StageGraph:
    """Electrical view: stage nodes joined by device elements."""

    stage_nodes: Tuple[str, ...]
    elements: Tuple[StageElement, ...]
    stage_count: int

    def __post_init__(self) -> None:
        known = set(self.stage_nodes)
        if len(known) != len(self.stage_nodes):
            raise ConversionError("duplicate stage node names")
        for required in (IN, OUT, GND):
            if required not in known:
                raise ConversionError(f"stage graph lacks the '{required}' node")
        for el in self.elements:
            if el.src not in known or el.dst not in known:
                raise ConversionError(f"element {el.src}->{el.dst} references an unknown node")
            if el.src == el.dst:
                raise ConversionError(f"element connects {el.src} to itself")

    @property
    def main_nodes(self) -> Tuple[str, ...]:
        """In, S1..S(N-1), Out."""
        return (IN,) + tuple(f"s{k}" for k in range(1, self.stage_count)) + (OUT,)


class _Terminals:
    """Union-find over device terminals; each class is one stage node."""

    def __init__(self) -> None:
        self.parent: Dict[Tuple[str, int], Tuple[str, int]] = {}

    def find(self, t: Tuple[str, int]) -> Tuple[str, int]:
        self.parent.setdefault(t, t)
        while self.parent[t] != t:
            self.parent[t] = self.parent[self.parent[t]]
            t = self.parent[t]
        return t

    def union(self, a: Tuple[str, int], b: Tuple[str, int]) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def to_stage_graph(g: DeviceDag) -> StageGraph:
    """Convert a valid circuit DAG into its stage-node/element view."""
    report = validate_circuit(g)
    if not report.is_valid_circuit:
        raise ConversionError(f"circuit is not valid: {', '.join(report.violations)}")
    g, _ = canonicalize(g)
    source, sink = g.input_id, g.output_id

    terms = _Terminals()
    for node in g.nodes:
        if node.id != sink:
            terms.find(("out", node.id))
        if node.id != source:
            terms.find(("in", node.id))
    for src, dst in g.edges:
        terms.union(("out", src), ("in", dst))

    # every device entering a junction must feed every device leaving it
    entering: Dict[Tuple[str, int], set] = {}
    leaving: Dict[Tuple[str, int], set] = {}
    for node in g.nodes:
        if node.id != sink and g.succs(node.id):
            entering.setdefault(terms.find(("out", node.id)), set()).add(node.id)
        if node.id != source:
            leaving.setdefault(terms.find(("in", node.id)), set()).add(node.id)
    edge_set = set(g.edges)
    for root, srcs in entering.items():
        for s in srcs:
            for d in leaving.get(root, ()):
                if (s, d) not in edge_set:
                    raise ConversionError(
                        f"no consistent stage assignment: {s} and {d} share a junction but are not joined"
                    )

    in_root = terms.find(("out", source))
    out_root = terms.find(("in", sink))
    if in_root == out_root:
        raise ConversionError("input and output collapse onto one stage node")

    path = main_path(g)
    names: Dict[Tuple[str, int], str] = {in_root: IN, out_root: OUT}
    for k, dev in enumerate(path[:-1], start=1):
        root = terms.find(("out", dev))
        if root in names:
            raise ConversionError("main path revisits a stage node")
        names[root] = f"s{k}"

    def terminal_name(t: Tuple[str, int]) -> str:
        root = terms.find(t)
        if root not in names:
            names[root] = f"x{sum(1 for v in names.values() if v.startswith('x')) + 1}"
        return names[root]

    elements: List[StageElement] = []
    for dev in g.device_ids:
        node = g.node(dev)
        src = terminal_name(("in", dev))
        dst = terminal_name(("out", dev)) if g.succs(dev) else GND
        elements.append(StageElement(node.device, src, dst))

    internal = sorted(
        (v for v in names.values() if v.startswith("x")), key=lambda s: int(s[1:])
    )
    stage_count = len(path)
    main = (IN,) + tuple(f"s{k}" for k in range(1, stage_count)) + (OUT,)
    return StageGraph(
        stage_nodes=main + tuple(internal) + (GND,),
        elements=tuple(elements),
        stage_count=stage_count,
    )


def from_stage_graph(s: StageGraph) -> DeviceDag:
    """Rebuild the device DAG of a stage graph, in canonical form."""
    for el in s.elements:
        if el.dst == IN or el.src == GND:
            raise ConversionError(f"element {el.src}->{el.dst} runs against the DAG orientation")
    fed = {el.dst for el in s.elements}
    for el in s.elements:
        if el.src != IN and el.src not in fed:
            raise ConversionError(f"stage node '{el.src}' is dangling")

    source, sink = 0, len(s.elements) + 1
    nodes = [DagNode(source, Role.INPUT)]
    nodes += [DagNode(i + 1, Role.DEVICE, el.device) for i, el in enumerate(s.elements)]
    nodes.append(DagNode(sink, Role.OUTPUT))

    edges = []
    for i, el in enumerate(s.elements, start=1):
        if el.src == IN:
            edges.append((source, i))
        if el.dst == OUT:
            edges.append((i, sink))
        if el.dst == GND:
            continue
        for j, other in enumerate(s.elements, start=1):
            if other.src == el.dst:
                edges.append((i, j))
    dag = DeviceDag(nodes=tuple(nodes), edges=tuple(sorted(edges)), stage_count=s.stage_count)
    return canonicalize(dag)[0]


# =========================
# Builders
# =========================

def build_dag(
    devices: Sequence[Tuple[DeviceKind, float]],
    edges: Iterable[Tuple[int, int]],
    stage_count: int,
    name: str = "",
) -> DeviceDag:
    """
    Convenience constructor: node 0 is Input, devices are 1..n in order,
    and node n+1 is Output. Edges use those ids.
    """
    nodes = [DagNode(0, Role.INPUT)]
    nodes += [
        DagNode(i + 1, Role.DEVICE, DeviceInstance(kind, float(value)))
        for i, (kind, value) in enumerate(devices)
    ]
    nodes.append(DagNode(len(devices) + 1, Role.OUTPUT))
    return DeviceDag(
        nodes=tuple(nodes),
        edges=tuple(sorted(set((int(a), int(b)) for a, b in edges))),
        stage_count=stage_count,
        name=name,
    )


def permute_ids(g: DeviceDag, mapping: Dict[int, int]) -> DeviceDag:
    """Relabel node ids with ``mapping`` and shuffle nothing else."""
    nodes = tuple(DagNode(mapping[n.id], n.role, n.device) for n in g.nodes)
    edges = tuple((mapping[s], mapping[d]) for s, d in g.edges)
    return DeviceDag(nodes=nodes, edges=edges, stage_count=g.stage_count, name=g.name)
