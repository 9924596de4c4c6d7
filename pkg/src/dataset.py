"""
Op-amp dataset engine: sample topologies and device values, simulate,
label, dedupe and persist as JSONL.

A sampled circuit is a main path of N feedforward Gm stages, each driven
stage node loaded by a parasitic R and C to ground, plus a few auxiliary
basis entries placed between stage-node pairs.
"""

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import json
import logging
import math

import numpy as np
from pydantic import ValidationError

from src.acsim import CircuitSimulator, FomWeights, SimResult, SweepConfig
from src.basis import BasisEntry, Combination, SubgraphBasis, TransformedDag, build_default_basis, graphlize
from src.circuit import (
    GM_VARIANTS,
    GND,
    IN,
    OUT,
    VALUE_RANGES,
    C_KIND,
    R_KIND,
    DagNode,
    DeviceDag,
    DeviceInstance,
    StageElement,
    StageGraph,
    canonicalize,
    format_hash,
    from_stage_graph,
    to_stage_graph,
    validate_circuit,
)
from src.config import TOOL_VERSION
from src.errors import CktError, DatasetFormatError, SamplingError
from src.models import (
    DATASET_FORMAT_VERSION,
    DatasetHeader,
    DatasetRecordModel,
    DeviceDagModel,
    SimResultModel,
    TransformedDagModel,
)
from src.timing import timed
from src.utils.seeding import STREAM_DATASET, STREAM_SPLIT, make_rng

logger = logging.getLogger("ckt.dataset")

MAX_SAMPLE_ATTEMPTS = 100
_GM_FWD = GM_VARIANTS[0]

# Entries allowed next to a main-path Gm: no second Gm and no parallel pair
_ADJACENT_ENTRIES = (0, 1, 3)


@dataclass(frozen=True)
class SamplerConfig:
    stage_counts: Tuple[int, ...] = (2, 3)
    stage_weights: Tuple[float, ...] = (1.0, 1.0)
    aux_counts: Tuple[int, ...] = (0, 1, 2, 3)
    aux_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    entry_weights: Tuple[float, ...] = (1.0,) * 24
    r_range: Tuple[float, float] = VALUE_RANGES[R_KIND.kind]
    c_range: Tuple[float, float] = VALUE_RANGES[C_KIND.kind]
    gm_range: Tuple[float, float] = VALUE_RANGES[_GM_FWD.kind]
    seed: int = 0

    def __post_init__(self) -> None:
        if any(n not in (2, 3) for n in self.stage_counts):
            raise SamplingError("stage counts must be 2 or 3")
        for name, values, weights in (
            ("stage", self.stage_counts, self.stage_weights),
            ("aux", self.aux_counts, self.aux_weights),
        ):
            if len(values) != len(weights):
                raise SamplingError(f"{name} weights do not match their values")
            if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
                raise SamplingError(f"{name} weights must be nonnegative and not all zero")
        if any(a < 0 for a in self.aux_counts):
            raise SamplingError("aux counts must be nonnegative")
        if len(self.entry_weights) != 24:
            raise SamplingError("entry weights need one value per basis entry")
        if any(w < 0 for w in self.entry_weights) or not any(w > 0 for w in self.entry_weights):
            raise SamplingError("entry weights must be nonnegative and not all zero")
        for lo, hi in (self.r_range, self.c_range, self.gm_range):
            if not 0 < lo <= hi:
                raise SamplingError(f"invalid value range [{lo}, {hi}]")

    def value_range(self, kind) -> Tuple[float, float]:
        if kind.is_gm:
            return self.gm_range
        return self.r_range if kind == R_KIND else self.c_range

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _choice(rng: np.random.Generator, values: Sequence, weights: Sequence[float]):
    p = np.asarray(weights, dtype=float)
    return values[int(rng.choice(len(values), p=p / p.sum()))]


def _mid(lo: float, hi: float) -> float:
    return math.sqrt(lo * hi)


def _place(entry: BasisEntry, src: str, dst: str, mid: str, cfg: SamplerConfig) -> List[StageElement]:
    devices = [DeviceInstance(k, _mid(*cfg.value_range(k))) for k in entry.devices]
    if entry.combination is Combination.SERIES:
        return [StageElement(devices[0], src, mid), StageElement(devices[1], mid, dst)]
    return [StageElement(d, src, dst) for d in devices]


def sample_topology(rng: np.random.Generator, cfg: SamplerConfig, basis: Optional[SubgraphBasis] = None) -> DeviceDag:
    """
    Sample a valid op-amp topology with placeholder device values.

    Auxiliary entries go between distinct stage-node pairs, at most one per
    pair. Pairs adjacent on the main path only take single R, single C or
    the R-C series chain.
    """
    basis = basis or _basis("r>c")
    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        stages = int(_choice(rng, cfg.stage_counts, cfg.stage_weights))
        main = [IN] + [f"s{k}" for k in range(1, stages)] + [OUT]
        gm_value = _mid(*cfg.gm_range)
        elements = [
            StageElement(DeviceInstance(_GM_FWD, gm_value), main[k], main[k + 1]) for k in range(stages)
        ]
        for node in main[1:]:
            elements.append(StageElement(DeviceInstance(R_KIND, _mid(*cfg.r_range)), node, GND))
            elements.append(StageElement(DeviceInstance(C_KIND, _mid(*cfg.c_range)), node, GND))

        pairs = [(i, j) for i in range(len(main)) for j in range(i + 1, len(main))]
        wanted = int(_choice(rng, cfg.aux_counts, cfg.aux_weights))
        wanted = min(wanted, len(pairs))
        order = rng.permutation(len(pairs))
        internal: List[str] = []
        placed = 0
        for p in order:
            if placed == wanted:
                break
            i, j = pairs[int(p)]
            allowed = _ADJACENT_ENTRIES if j == i + 1 else tuple(range(len(basis.entries)))
            weights = [cfg.entry_weights[e] for e in allowed]
            if not any(w > 0 for w in weights):
                continue
            entry = basis.entry(int(_choice(rng, allowed, weights)))
            mid = f"x{len(internal) + 1}"
            if entry.combination is Combination.SERIES:
                internal.append(mid)
            elements.extend(_place(entry, main[i], main[j], mid, cfg))
            placed += 1
        if placed < wanted:
            continue

        stage_graph = StageGraph(
            stage_nodes=tuple(main) + tuple(internal) + (GND,),
            elements=tuple(elements),
            stage_count=stages,
        )
        try:
            dag = from_stage_graph(stage_graph)
            report = validate_circuit(dag)
            if report.is_valid_circuit:
                to_stage_graph(dag)
                return dag
            logger.debug("attempt %d rejected: %s", attempt, ", ".join(report.violations))
        except CktError as exc:
            logger.debug("attempt %d rejected: %s", attempt, exc)
    raise SamplingError(f"no valid topology after {MAX_SAMPLE_ATTEMPTS} attempts; check the sampler config")


def sample_params(rng: np.random.Generator, g: DeviceDag, cfg: SamplerConfig) -> DeviceDag:
    """Redraw every device value log-uniformly from its range; topology untouched."""
    nodes = []
    for n in g.nodes:
        if n.device is None:
            nodes.append(n)
            continue
        lo, hi = cfg.value_range(n.device.kind)
        value = 10.0 ** rng.uniform(math.log10(lo), math.log10(hi))
        nodes.append(DagNode(n.id, n.role, DeviceInstance(n.device.kind, float(value))))
    return DeviceDag(nodes=tuple(nodes), edges=g.edges, stage_count=g.stage_count, name=g.name)


def sample_circuit(rng: np.random.Generator, cfg: SamplerConfig) -> DeviceDag:
    return canonicalize(sample_params(rng, sample_topology(rng, cfg), cfg))[0]


# =========================
# Records
# =========================

@dataclass(frozen=True)
class DatasetRecord:
    id: int
    hash: int
    circuit: DeviceDag
    transformed: TransformedDag
    sim: SimResult

    def to_model(self) -> DatasetRecordModel:
        return DatasetRecordModel(
            id=self.id,
            hash=format_hash(self.hash),
            circuit=DeviceDagModel.from_dag(self.circuit, self.id),
            transformed=TransformedDagModel.from_transformed(self.transformed, self.id),
            sim=SimResultModel.from_result(self.sim),
        )

    @classmethod
    def from_model(cls, m: DatasetRecordModel) -> "DatasetRecord":
        return cls(
            id=m.id,
            hash=int(m.hash, 16),
            circuit=m.circuit.to_dag(),
            transformed=m.transformed.to_transformed(),
            sim=m.sim.to_result(),
        )


@dataclass
class GenerationSummary:
    requested: int
    stored: int = 0
    attempted: int = 0
    non_converged: int = 0
    duplicates: int = 0
    failures: int = 0
    fom_quantiles: Dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def convergence_rate(self) -> float:
        simulated = self.attempted - self.failures
        return (simulated - self.non_converged) / simulated if simulated else 1.0

    def to_dict(self) -> Dict[str, object]:
        return {**asdict(self), "convergence_rate": self.convergence_rate}


@lru_cache(maxsize=2)
def _basis(rc_order: str) -> SubgraphBasis:
    return build_default_basis(rc_order)


def _generate_one(job: Tuple[int, SamplerConfig, CircuitSimulator]):
    """Worker: one sampled, simulated and graphlized circuit, or a status string."""
    index, cfg, sim = job
    try:
        rng = make_rng(cfg.seed, STREAM_DATASET, index)
        dag = sample_circuit(rng, cfg)
        result = sim.simulate(dag)
        if not result.converged:
            return index, "non-converged", None
        canon, h = canonicalize(dag)
        transformed = graphlize(canon, _basis("r>c"))
        return index, "ok", (h, canon, transformed, result)
    except CktError as exc:
        logger.warning("record %d failed: %s", index, exc.one_line())
        return index, "failed", None


def _run_jobs(func, jobs: List, workers: int) -> List:
    if workers <= 1 or len(jobs) <= 1:
        return [func(j) for j in jobs]
    with Pool(processes=workers) as pool:
        return list(pool.imap(func, jobs, chunksize=max(1, len(jobs) // (workers * 4))))


def _simulate_safe(job: Tuple[DeviceDag, CircuitSimulator]) -> SimResult:
    dag, sim = job
    try:
        return sim.simulate(dag)
    except CktError as exc:
        logger.warning("simulation of %s failed: %s", dag.name or "circuit", exc.one_line())
        return SimResult(None, None, None, None, None, converged=False)


def simulate_many(dags: Sequence[DeviceDag], sim: CircuitSimulator, workers: int = 1) -> List[SimResult]:
    """Simulate in a worker pool; results come back in input order."""
    return _run_jobs(_simulate_safe, [(d, sim) for d in dags], workers)


def _header(cfg: SamplerConfig, sim: CircuitSimulator, count: int, created_by: Optional[Dict]) -> DatasetHeader:
    return DatasetHeader(
        tool_version=TOOL_VERSION,
        seed=cfg.seed,
        count=count,
        sampler=cfg.to_dict(),
        sweep=sim.sweep.to_dict(),
        fom=sim.weights.to_dict(),
        created_by=created_by or {},
    )


def generate_records(n: int, cfg: SamplerConfig, sim: CircuitSimulator, workers: int = 1,
                     summary: Optional[GenerationSummary] = None) -> List[DatasetRecord]:
    """
    Draw candidates in index order until ``n`` converged, distinct circuits
    are collected. Each candidate has its own RNG stream, so the result does
    not depend on ``workers``.
    """
    summary = summary or GenerationSummary(requested=n)
    records: List[DatasetRecord] = []
    seen = set()
    next_index = 0
    max_attempts = 20 * n + 100
    while len(records) < n:
        if next_index >= max_attempts:
            raise SamplingError(f"only {len(records)} of {n} records after {next_index} attempts")
        batch = max(n - len(records), workers)
        jobs = [(i, cfg, sim) for i in range(next_index, next_index + batch)]
        next_index += batch
        for index, status, payload in _run_jobs(_generate_one, jobs, workers):
            if len(records) == n:
                break
            summary.attempted += 1
            if status == "failed":
                summary.failures += 1
                continue
            if status == "non-converged":
                summary.non_converged += 1
                continue
            h, canon, transformed, result = payload
            # equal hashes mean equal topology and value buckets
            if h in seen:
                summary.duplicates += 1
                continue
            seen.add(h)
            records.append(DatasetRecord(len(records), h, canon, transformed, result))
    summary.stored = len(records)
    return records


def write_dataset(path: Path, header: DatasetHeader, records: Iterable[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header.model_dump_json() + "\n")
        for record in records:
            fh.write(record.to_model().model_dump_json() + "\n")


def generate_dataset(n: int, cfg: SamplerConfig, out_path: Path, sim: Optional[CircuitSimulator] = None,
                     workers: int = 1, created_by: Optional[Dict] = None) -> GenerationSummary:
    """Sample, simulate, drop failures and exact duplicates, then write JSONL."""
    if n < 0:
        raise SamplingError(f"record count must be nonnegative, got {n}")
    sim = sim or CircuitSimulator()
    summary = GenerationSummary(requested=n)
    with timed(f"generate {n} records", slow_ms=float("inf")) as watch:
        records = generate_records(n, cfg, sim, workers, summary)
        write_dataset(Path(out_path), _header(cfg, sim, len(records), created_by), records)
    summary.wall_seconds = watch.duration_ms / 1000.0
    if records:
        foms = np.array([r.sim.fom for r in records])
        summary.fom_quantiles = {
            f"q{int(q * 100):02d}": float(np.quantile(foms, q)) for q in (0.0, 0.25, 0.5, 0.75, 1.0)
        }
    logger.info(
        "dataset: stored=%d attempted=%d non_converged=%d duplicates=%d failures=%d",
        summary.stored, summary.attempted, summary.non_converged, summary.duplicates, summary.failures,
    )
    return summary


def load_dataset(path: Path) -> Tuple[DatasetHeader, List[DatasetRecord]]:
    """Read a dataset file, rejecting unknown formats and versions."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, header missing")
    try:
        raw = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: header is not JSON ({exc})") from exc
    if raw.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: format version {raw.get('format_version')!r}, expected {DATASET_FORMAT_VERSION}"
        )
    try:
        header = DatasetHeader.model_validate(raw)
        records = [
            DatasetRecord.from_model(DatasetRecordModel.model_validate_json(line)) for line in lines[1:]
        ]
    except ValidationError as exc:
        raise DatasetFormatError(f"{path}: {exc.error_count()} validation error(s): {exc.errors()[0]['msg']}") from exc
    return header, records


def split_dataset(records: Sequence[DatasetRecord], test_fraction: float = 0.1,
                  seed: int = 0) -> Tuple[List[DatasetRecord], List[DatasetRecord]]:
    """Deterministic shuffled train/test split."""
    if not 0.0 <= test_fraction < 1.0:
        raise DatasetFormatError(f"test fraction must be in [0, 1), got {test_fraction}")
    order = make_rng(seed, STREAM_SPLIT).permutation(len(records))
    n_test = int(round(len(records) * test_fraction))
    test = [records[int(i)] for i in sorted(order[:n_test])]
    train = [records[int(i)] for i in sorted(order[n_test:])]
    return train, test
