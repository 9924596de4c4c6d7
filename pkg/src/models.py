"""
Pydantic models for the on-disk formats.
The core algorithms work on frozen dataclasses; these models validate
JSON at the file boundary and convert to and from them.
"""

from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from src.acsim import SimResult
from src.basis import TNode, TransformedDag
from src.circuit import (
    DagNode,
    DeviceDag,
    DeviceInstance,
    DeviceKind,
    Direction,
    Kind,
    Polarity,
    Role,
)

DATASET_FORMAT = "cktgrid-dataset"
DATASET_FORMAT_VERSION = 1

ROLE_PATTERN = "^(input|output|device)$"


# =========================
# Circuit Models
# =========================

class DeviceNodeModel(BaseModel):
    """One DeviceDag node; device fields are only set on device nodes."""
    id: int = Field(..., ge=0)
    role: str = Field(..., pattern=ROLE_PATTERN)
    kind: Optional[str] = Field(None, pattern="^(gm|r|c)$")
    polarity: Optional[str] = Field(None, pattern=r"^[+-]$")
    direction: Optional[str] = Field(None, pattern="^(fwd|fbk)$")
    value: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def check_device_fields(self) -> "DeviceNodeModel":
        if self.role == "device":
            if self.kind is None or self.value is None:
                raise ValueError(f"device node {self.id} needs kind and value")
            is_gm = self.kind == "gm"
            if is_gm != (self.polarity is not None and self.direction is not None):
                raise ValueError(f"node {self.id}: polarity/direction belong to gm devices only")
        elif any(v is not None for v in (self.kind, self.polarity, self.direction, self.value)):
            raise ValueError(f"{self.role} node {self.id} carries device fields")
        return self


class DeviceDagModel(BaseModel):
    id: int = Field(default=0, ge=0)
    stage_count: int = Field(..., ge=1)
    nodes: List[DeviceNodeModel]
    edges: List[Tuple[int, int]]

    @classmethod
    def from_dag(cls, g: DeviceDag, record_id: int = 0) -> "DeviceDagModel":
        nodes = []
        for n in g.nodes:
            if n.device is None:
                nodes.append(DeviceNodeModel(id=n.id, role=n.role.value))
                continue
            k = n.device.kind
            nodes.append(DeviceNodeModel(
                id=n.id,
                role=n.role.value,
                kind=k.kind.value,
                polarity=k.polarity.value if k.polarity else None,
                direction=k.direction.value if k.direction else None,
                value=n.device.value,
            ))
        return cls(id=record_id, stage_count=g.stage_count, nodes=nodes, edges=[tuple(e) for e in g.edges])

    def to_dag(self) -> DeviceDag:
        nodes = []
        for n in self.nodes:
            device = None
            if n.role == "device":
                kind = DeviceKind(
                    Kind(n.kind),
                    Polarity(n.polarity) if n.polarity else None,
                    Direction(n.direction) if n.direction else None,
                )
                device = DeviceInstance(kind, n.value)
            nodes.append(DagNode(n.id, Role(n.role), device))
        return DeviceDag(
            nodes=tuple(nodes),
            edges=tuple(tuple(e) for e in self.edges),
            stage_count=self.stage_count,
            name=str(self.id),
        )


class SubNodeModel(BaseModel):
    id: int = Field(..., ge=0)
    role: str = Field(..., pattern=ROLE_PATTERN)
    entry_id: Optional[int] = Field(None, ge=0, le=23)
    params: List[float] = Field(default_factory=list)

    @field_validator("params")
    @classmethod
    def positive_params(cls, v: List[float]) -> List[float]:
        if any(p <= 0 for p in v):
            raise ValueError("subgraph params must be positive")
        return v


class TransformedDagModel(BaseModel):
    id: int = Field(default=0, ge=0)
    stage_count: int = Field(..., ge=1)
    nodes: List[SubNodeModel]
    edges: List[Tuple[int, int]]

    @classmethod
    def from_transformed(cls, t: TransformedDag, record_id: int = 0) -> "TransformedDagModel":
        nodes = [
            SubNodeModel(id=n.id, role=n.role.value, entry_id=n.entry_id, params=list(n.params))
            for n in t.nodes
        ]
        return cls(id=record_id, stage_count=t.stage_count, nodes=nodes, edges=[tuple(e) for e in t.edges])

    def to_transformed(self) -> TransformedDag:
        nodes = tuple(
            TNode(n.id, Role(n.role), n.entry_id, tuple(n.params)) for n in self.nodes
        )
        return TransformedDag(nodes=nodes, edges=tuple(tuple(e) for e in self.edges), stage_count=self.stage_count)


class SimResultModel(BaseModel):
    gain_db: Optional[float] = None
    bw_hz: Optional[float] = Field(None, gt=0)
    ugf_hz: Optional[float] = Field(None, gt=0)
    pm_deg: Optional[float] = Field(None, gt=-180, le=180)
    fom: Optional[float] = None
    converged: bool

    @classmethod
    def from_result(cls, r: SimResult) -> "SimResultModel":
        return cls(**r.to_dict())

    def to_result(self) -> SimResult:
        return SimResult(self.gain_db, self.bw_hz, self.ugf_hz, self.pm_deg, self.fom, self.converged)


# =========================
# Dataset Models
# =========================

class DatasetHeader(BaseModel):
    """Line 0 of a dataset file."""
    format: str = Field(default=DATASET_FORMAT)
    format_version: int = Field(default=DATASET_FORMAT_VERSION)
    tool_version: str
    seed: int
    count: int = Field(default=0, ge=0)
    sampler: Dict[str, Any]
    sweep: Dict[str, Any]
    fom: Dict[str, Any]
    created_by: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("format")
    @classmethod
    def known_format(cls, v: str) -> str:
        if v != DATASET_FORMAT:
            raise ValueError(f"not a {DATASET_FORMAT} file: {v!r}")
        return v


class DatasetRecordModel(BaseModel):
    id: int = Field(..., ge=0)
    hash: str = Field(..., pattern="^[0-9a-f]{16}$")
    circuit: DeviceDagModel
    transformed: TransformedDagModel
    sim: SimResultModel

    @field_validator("sim")
    @classmethod
    def converged_only(cls, v: SimResultModel) -> SimResultModel:
        if not v.converged or v.fom is None:
            raise ValueError("stored records must be converged simulations")
        return v


# =========================
# Run / Report Models
# =========================

class RunConfig(BaseModel):
    """Resolved settings of one CLI invocation; embedded in every output."""
    command: str
    tool_version: str
    seed: int
    workers: int = Field(default=1, ge=1)
    output_dir: Optional[str] = None
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    sweep: Dict[str, Any] = Field(default_factory=dict)
    fom: Dict[str, Any] = Field(default_factory=dict)
    options: Dict[str, Any] = Field(default_factory=dict)


class PropertyMetrics(BaseModel):
    rmse: float = Field(..., ge=0)
    pearson: float = Field(..., ge=-1.0, le=1.0)


class MetricsReport(BaseModel):
    meta: RunConfig
    encoder: str
    latent_points: int = Field(..., ge=0)
    decodes_per_point: int = Field(..., ge=1)
    valid_dag_pct: float = Field(..., ge=0, le=100)
    valid_circuit_pct: float = Field(..., ge=0, le=100)
    novel_pct: float = Field(..., ge=0, le=100)
    forced_stops: int = Field(default=0, ge=0)
    reconstruction: Optional[float] = Field(None, ge=0, le=1)
    gp: Dict[str, PropertyMetrics] = Field(default_factory=dict)
    property_head: Optional[PropertyMetrics] = None

    @model_validator(mode="after")
    def circuits_within_dags(self) -> "MetricsReport":
        if self.valid_circuit_pct > self.valid_dag_pct + 1e-9:
            raise ValueError("valid-circuit % cannot exceed valid-DAG %")
        return self
