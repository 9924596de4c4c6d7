"""
The ordered op-amp subgraph basis and the graphlizer built on it.

``graphlize`` rewrites a device DAG as a DAG over basis subgraphs, picking
among all non-overlapping covers the one with the fewest subgraphs and,
among those, the lexicographically largest descending tuple of order
indices. ``degraphlize`` expands it back.
"""

from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple
import logging

import networkx as nx

from src.circuit import (
    C_KIND,
    DEVICE_TYPES,
    GM_VARIANTS,
    R_KIND,
    DagNode,
    DeviceDag,
    DeviceInstance,
    DeviceKind,
    Kind,
    Role,
    canonicalize,
    validate_circuit,
)
from src.errors import DecompositionError, UnknownEntryError

logger = logging.getLogger("ckt.basis")

MAX_ENUMERATION_DEVICES = 20


class Combination(str, Enum):
    SINGLE = "single"
    PARALLEL = "parallel"
    SERIES = "series"


_COMBINATION_RANK = {Combination.SINGLE: 0, Combination.SERIES: 0, Combination.PARALLEL: 1}


@dataclass(frozen=True)
class BasisEntry:
    entry_id: int
    devices: Tuple[DeviceKind, ...]
    combination: Combination
    internal_edges: Tuple[Tuple[int, int], ...]

    @property
    def size(self) -> int:
        return len(self.devices)

    @property
    def heads(self) -> Tuple[int, ...]:
        """Device slots that receive edges from outside the subgraph."""
        if self.combination is Combination.SERIES:
            return (0,)
        return tuple(range(self.size))

    @property
    def tails(self) -> Tuple[int, ...]:
        """Device slots that send edges outside the subgraph."""
        if self.combination is Combination.SERIES:
            return (self.size - 1,)
        return tuple(range(self.size))

    def has_single_terminals(self) -> bool:
        """
        One entry terminal and one exit terminal. Series chains enter at
        their first device and leave from their last; parallel devices
        share both terminals, which acts as a single head and tail.
        """
        if self.combination is Combination.PARALLEL:
            return self.internal_edges == ()
        heads = {d for d in range(self.size) if not any(e[1] == d for e in self.internal_edges)}
        tails = {d for d in range(self.size) if not any(e[0] == d for e in self.internal_edges)}
        return len(heads) == 1 and len(tails) == 1

    @property
    def name(self) -> str:
        labels = [k.label for k in self.devices]
        if self.combination is Combination.PARALLEL:
            return "||".join(labels)
        if self.combination is Combination.SERIES:
            return "-".join(labels)
        return labels[0]


def _catalog() -> List[BasisEntry]:
    entries = [
        BasisEntry(0, (C_KIND,), Combination.SINGLE, ()),
        BasisEntry(1, (R_KIND,), Combination.SINGLE, ()),
        BasisEntry(2, (R_KIND, C_KIND), Combination.PARALLEL, ()),
        BasisEntry(3, (R_KIND, C_KIND), Combination.SERIES, ((0, 1),)),
    ]
    entries += [
        BasisEntry(4 + i, (gm,), Combination.SINGLE, ()) for i, gm in enumerate(GM_VARIANTS)
    ]
    next_id = 8
    for gm in GM_VARIANTS:
        for partner, combination in (
            (R_KIND, Combination.PARALLEL),
            (C_KIND, Combination.PARALLEL),
            (R_KIND, Combination.SERIES),
            (C_KIND, Combination.SERIES),
        ):
            internal = ((0, 1),) if combination is Combination.SERIES else ()
            entries.append(BasisEntry(next_id, (gm, partner), combination, internal))
            next_id += 1
    return entries


@dataclass(frozen=True)
class SubgraphBasis:
    entries: Tuple[BasisEntry, ...]
    order: Tuple[int, ...]
    rc_order: str = "r>c"

    def __post_init__(self) -> None:
        if sorted(self.order) != list(range(len(self.entries))):
            raise ValueError("basis order must be a strict total order")

    def entry(self, entry_id: int) -> BasisEntry:
        if not 0 <= entry_id < len(self.entries):
            raise UnknownEntryError(f"unknown basis entry id {entry_id}")
        return self.entries[entry_id]

    def o(self, entry_id: int) -> int:
        return self.order[entry_id]

    def find(self, kinds: Sequence[DeviceKind], combination: Combination) -> Optional[BasisEntry]:
        """Entry with exactly these device kinds (slot order matters for series)."""
        for e in self.entries:
            if e.combination is not combination:
                continue
            if combination is Combination.PARALLEL:
                if sorted(e.devices, key=DEVICE_TYPES.index) == sorted(kinds, key=DEVICE_TYPES.index):
                    return e
            elif tuple(e.devices) == tuple(kinds):
                return e
        return None

    def catalog_rows(self) -> List[Dict[str, object]]:
        return [
            {
                "entry_id": e.entry_id,
                "name": e.name,
                "devices": [k.label for k in e.devices],
                "combination": e.combination.value,
                "order": self.o(e.entry_id),
            }
            for e in self.entries
        ]


def _device_rank(kind: DeviceKind, rc_order: str) -> int:
    """Higher ranks win: gm+fwd > gm-fwd > gm+fbk > gm-fbk > R > C."""
    if kind.is_gm:
        return 5 - GM_VARIANTS.index(kind)
    if rc_order == "c>r":
        return 1 if kind.kind is Kind.C else 0
    return 1 if kind.kind is Kind.R else 0


def build_default_basis(rc_order: str = "r>c") -> SubgraphBasis:
    """
    Build the 24-entry op-amp basis.

    Order indices grow with selection priority: subgraph size first, then
    parallel before series, then the descending tuple of device ranks
    compared lexicographically.
    """
    if rc_order not in ("r>c", "c>r"):
        raise ValueError(f"rc_order must be 'r>c' or 'c>r', got {rc_order!r}")
    entries = _catalog()

    def priority(e: BasisEntry):
        ranks = tuple(sorted((_device_rank(k, rc_order) for k in e.devices), reverse=True))
        return (e.size, _COMBINATION_RANK[e.combination], ranks)

    ranked = sorted(entries, key=priority)
    order = [0] * len(entries)
    for o, e in enumerate(ranked):
        order[e.entry_id] = o
    return SubgraphBasis(entries=tuple(entries), order=tuple(order), rc_order=rc_order)


# =========================
# Transformed DAG
# =========================

@dataclass(frozen=True)
class TNode:
    id: int
    role: Role
    entry_id: Optional[int] = None
    params: Tuple[float, ...] = ()


@dataclass(frozen=True)
class TransformedDag:
    """Circuit re-expressed with one node per basis subgraph."""

    nodes: Tuple[TNode, ...]
    edges: Tuple[Tuple[int, int], ...]
    stage_count: int

    def __post_init__(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise DecompositionError("duplicate transformed node ids")
        if len(set(self.edges)) != len(self.edges):
            raise DecompositionError("transformed DAG has parallel edges")
        known = set(ids)
        for s, d in self.edges:
            if s not in known or d not in known:
                raise DecompositionError(f"edge ({s}, {d}) references a missing node")

    @property
    def entry_sequence(self) -> Tuple[Optional[int], ...]:
        return tuple(n.entry_id for n in self.nodes)

    def topology(self) -> Tuple[Tuple[str, ...], Tuple[Tuple[int, int], ...]]:
        """Node types and edges, without device parameters."""
        types = tuple(n.role.value if n.entry_id is None else str(n.entry_id) for n in self.nodes)
        return types, tuple(sorted(self.edges))

    def preds(self, node_id: int) -> List[int]:
        return sorted(s for s, d in self.edges if d == node_id)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(n.id for n in self.nodes)
        graph.add_edges_from(self.edges)
        return graph


# A group is a tuple of device ids in entry slot order, with its entry
_Group = Tuple[Tuple[int, ...], BasisEntry]


def _candidate_pairs(g: DeviceDag, b: SubgraphBasis) -> List[_Group]:
    devices = g.device_ids
    pairs: List[_Group] = []
    for a, c in combinations(devices, 2):
        if g.preds(a) != g.preds(c) or g.succs(a) != g.succs(c):
            continue
        ka, kc = g.node(a).device.kind, g.node(c).device.kind
        entry = b.find((ka, kc), Combination.PARALLEL)
        if entry is not None:
            slots = (a, c) if entry.devices[0] == ka else (c, a)
            pairs.append((slots, entry))
    for a in devices:
        succ = g.succs(a)
        if len(succ) != 1 or g.node(succ[0]).role is not Role.DEVICE:
            continue
        c = succ[0]
        if g.preds(c) != (a,):
            continue
        entry = b.find((g.node(a).device.kind, g.node(c).device.kind), Combination.SERIES)
        if entry is not None:
            pairs.append(((a, c), entry))
    return pairs


def _matchings(pairs: Sequence[_Group]) -> Iterator[List[_Group]]:
    """Every set of pairwise disjoint candidate pairs."""
    def rec(i: int, used: FrozenSet[int], chosen: List[_Group]) -> Iterator[List[_Group]]:
        if i == len(pairs):
            yield list(chosen)
            return
        yield from rec(i + 1, used, chosen)
        members = pairs[i][0]
        if not used.intersection(members):
            chosen.append(pairs[i])
            yield from rec(i + 1, used.union(members), chosen)
            chosen.pop()

    yield from rec(0, frozenset(), [])


def _complete(g: DeviceDag, b: SubgraphBasis, devices: Sequence[int], pairs: List[_Group]) -> List[_Group]:
    covered = {d for members, _ in pairs for d in members}
    groups = list(pairs)
    for d in devices:
        if d in covered:
            continue
        entry = b.find((g.node(d).device.kind,), Combination.SINGLE)
        if entry is None:
            raise DecompositionError(f"device {d} is not coverable by the basis")
        groups.append(((d,), entry))
    return groups


def _selection_key(groups: Sequence[_Group], b: SubgraphBasis, devices: Sequence[int]):
    """
    Larger is better: fewer subgraphs, then the larger descending order
    tuple, then a per-device vector that separates remaining ties.
    """
    orders = tuple(sorted((b.o(e.entry_id) for _, e in groups), reverse=True))
    owner: Dict[int, _Group] = {d: grp for grp in groups for d in grp[0]}
    per_device = tuple(
        (b.o(owner[d][1].entry_id), tuple(-m for m in sorted(owner[d][0]))) for d in devices
    )
    return (-len(groups), orders, per_device)


def _assemble(g: DeviceDag, groups: Sequence[_Group]) -> TransformedDag:
    source, sink = g.input_id, g.output_id
    ordered = sorted(groups, key=lambda grp: min(grp[0]))
    group_of: Dict[int, int] = {source: 0}
    nodes = [TNode(0, Role.INPUT)]
    for i, (members, entry) in enumerate(ordered, start=1):
        for m in members:
            group_of[m] = i
        params = tuple(g.node(m).device.value for m in members)
        nodes.append(TNode(i, Role.DEVICE, entry.entry_id, params))
    out_id = len(ordered) + 1
    group_of[sink] = out_id
    nodes.append(TNode(out_id, Role.OUTPUT))
    edges = {
        (group_of[s], group_of[d]) for s, d in g.edges if group_of[s] != group_of[d]
    }
    return TransformedDag(nodes=tuple(nodes), edges=tuple(sorted(edges)), stage_count=g.stage_count)


def _prepare(g: DeviceDag) -> DeviceDag:
    report = validate_circuit(g)
    if not report.is_valid_circuit:
        raise DecompositionError(f"cannot graphlize an invalid circuit: {', '.join(report.violations)}")
    return canonicalize(g)[0]


def graphlize(g: DeviceDag, b: SubgraphBasis) -> TransformedDag:
    """Injective transformation of a valid circuit onto the basis."""
    g = _prepare(g)
    devices = g.device_ids
    pairs = _candidate_pairs(g, b)

    # pairs only conflict inside connected components, so choose per component
    conflict = nx.Graph()
    conflict.add_nodes_from(range(len(pairs)))
    for i, j in combinations(range(len(pairs)), 2):
        if set(pairs[i][0]) & set(pairs[j][0]):
            conflict.add_edge(i, j)

    chosen: List[_Group] = []
    for component in sorted(nx.connected_components(conflict), key=min):
        local = [pairs[i] for i in sorted(component)]
        local_devices = sorted({d for members, _ in local for d in members})
        best = max(
            (_complete(g, b, local_devices, m) for m in _matchings(local)),
            key=lambda groups: _selection_key(groups, b, local_devices),
        )
        chosen.extend(grp for grp in best if len(grp[0]) > 1)

    return _assemble(g, _complete(g, b, devices, chosen))


def enumerate_decompositions(g: DeviceDag, b: SubgraphBasis) -> List[TransformedDag]:
    """
    Every non-overlapping cover of ``g`` by basis entries, best first.

    Brute force over all matchings of candidate pairs; meant as an oracle
    for graphlize on small circuits.
    """
    g = _prepare(g)
    devices = g.device_ids
    if len(devices) > MAX_ENUMERATION_DEVICES:
        raise DecompositionError(
            f"enumeration limited to {MAX_ENUMERATION_DEVICES} devices, circuit has {len(devices)}"
        )
    covers = [_complete(g, b, devices, m) for m in _matchings(_candidate_pairs(g, b))]
    covers.sort(key=lambda groups: _selection_key(groups, b, devices), reverse=True)
    return [_assemble(g, groups) for groups in covers]


def degraphlize(t: TransformedDag, b: SubgraphBasis) -> DeviceDag:
    """Expand every subgraph node back into its devices."""
    nodes: List[DagNode] = []
    heads: Dict[int, List[int]] = {}
    tails: Dict[int, List[int]] = {}
    edges: List[Tuple[int, int]] = []
    next_id = 0
    for tn in t.nodes:
        if tn.role is not Role.DEVICE:
            nodes.append(DagNode(next_id, tn.role))
            heads[tn.id] = tails[tn.id] = [next_id]
            next_id += 1
            continue
        entry = b.entry(tn.entry_id)
        if len(tn.params) != entry.size:
            raise DecompositionError(
                f"node {tn.id}: entry {entry.name} needs {entry.size} params, got {len(tn.params)}"
            )
        ids = list(range(next_id, next_id + entry.size))
        next_id += entry.size
        for slot, (kind, value) in enumerate(zip(entry.devices, tn.params)):
            nodes.append(DagNode(ids[slot], Role.DEVICE, DeviceInstance(kind, float(value))))
        edges.extend((ids[s], ids[d]) for s, d in entry.internal_edges)
        heads[tn.id] = [ids[s] for s in entry.heads]
        tails[tn.id] = [ids[s] for s in entry.tails]
    for s, d in t.edges:
        edges.extend((u, v) for u in tails[s] for v in heads[d])
    return DeviceDag(nodes=tuple(nodes), edges=tuple(sorted(set(edges))), stage_count=t.stage_count)
