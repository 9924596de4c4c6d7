"""
SPICE-style behavioral netlists for stage graphs.

Gm elements become grounded VCCS lines ``Gname nout 0 nin 0 value`` whose
value is the admittance stamp, so a positive-polarity stage is written
with a negative value. Feedback VCCS names end in ``FB``. The ``* nodes:``
comment keeps the stage node order so our own netlists parse back exactly.
"""

from typing import Dict, List, Optional
import logging

from src.acsim import SweepConfig
from src.circuit import (
    GND,
    DeviceInstance,
    DeviceKind,
    Direction,
    Kind,
    Polarity,
    StageElement,
    StageGraph,
    C_KIND,
    R_KIND,
)
from src.errors import ConversionError

logger = logging.getLogger("ckt.netlist")

_PREFIX = {Kind.R: "R", Kind.C: "C", Kind.GM: "G"}


def _spice_node(name: str) -> str:
    return "0" if name == GND else name


def _stage_node(name: str) -> str:
    return GND if name == "0" else name


def export_netlist(s: StageGraph, sweep: Optional[SweepConfig] = None, title: str = "cktgrid op-amp") -> str:
    """Render ``s`` as netlist text; element lines follow element order."""
    sweep = sweep or SweepConfig.from_config()
    counters: Dict[Kind, int] = {Kind.R: 0, Kind.C: 0, Kind.GM: 0}
    lines = [
        f"* {title}",
        f"* nodes: {' '.join(s.stage_nodes)}",
        f"* stages: {s.stage_count}",
        "VIN in 0 AC 1",
    ]
    for el in s.elements:
        kind = el.device.kind
        counters[kind.kind] += 1
        name = f"{_PREFIX[kind.kind]}{counters[kind.kind]}"
        if kind.is_gm:
            if kind.direction is Direction.FEEDBACK:
                name += "FB"
            value = -el.device.value if kind.polarity is Polarity.POSITIVE else el.device.value
            lines.append(
                f"{name} {_spice_node(el.output_node)} 0 {_spice_node(el.controlling_node)} 0 {value!r}"
            )
        else:
            lines.append(f"{name} {_spice_node(el.src)} {_spice_node(el.dst)} {el.device.value!r}")
    lines.append(f".ac dec {sweep.points_per_decade} {sweep.f_start!r} {sweep.f_stop!r}")
    lines.append(".end")
    return "\n".join(lines) + "\n"


def parse_netlist(text: str) -> StageGraph:
    """Parse a netlist produced by ``export_netlist`` back into a StageGraph."""
    node_order: Optional[List[str]] = None
    stage_count: Optional[int] = None
    elements: List[StageElement] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("*"):
            body = line[1:].strip()
            if body.startswith("nodes:"):
                node_order = body[len("nodes:"):].split()
            elif body.startswith("stages:"):
                stage_count = int(body[len("stages:"):])
            continue
        if line.startswith(".") or line.upper().startswith("V"):
            continue
        fields = line.split()
        head = fields[0].upper()
        try:
            if head[0] in ("R", "C") and len(fields) == 4:
                kind = R_KIND if head[0] == "R" else C_KIND
                device = DeviceInstance(kind, float(fields[3]))
                elements.append(StageElement(device, _stage_node(fields[1]), _stage_node(fields[2])))
            elif head[0] == "G" and len(fields) == 6:
                value = float(fields[5])
                polarity = Polarity.POSITIVE if value < 0 else Polarity.NEGATIVE
                out, ctrl = _stage_node(fields[1]), _stage_node(fields[3])
                if head.endswith("FB"):
                    kind = DeviceKind.gm(polarity, Direction.FEEDBACK)
                    elements.append(StageElement(DeviceInstance(kind, abs(value)), out, ctrl))
                else:
                    kind = DeviceKind.gm(polarity, Direction.FEEDFORWARD)
                    elements.append(StageElement(DeviceInstance(kind, abs(value)), ctrl, out))
            else:
                raise ConversionError(f"netlist line {lineno}: unsupported element '{line}'")
        except ValueError as exc:
            raise ConversionError(f"netlist line {lineno}: {exc}") from exc

    if node_order is None:
        seen: List[str] = []
        for el in elements:
            for n in (el.src, el.dst):
                if n not in seen:
                    seen.append(n)
        node_order = seen
        logger.debug("no node comment; inferred stage nodes %s", " ".join(node_order))
    if stage_count is None:
        stage_count = sum(1 for n in node_order if n.startswith("s")) + 1
    return StageGraph(stage_nodes=tuple(node_order), elements=tuple(elements), stage_count=stage_count)
