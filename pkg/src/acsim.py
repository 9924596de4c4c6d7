"""
Behavioral small-signal AC simulator.

Stage graphs are stamped into a modified nodal analysis system
Y(s) = G + sC + T over the non-ground stage nodes. The input node is
driven by an ideal unit voltage source, so the transfer function is the
output node voltage.
"""

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import scipy.linalg

from src.circuit import GND, DeviceDag, Kind, Polarity, StageGraph, to_stage_graph
from src.config import config
from src.errors import SimulationError
from src.timing import timed

logger = logging.getLogger("ckt.acsim")

FOM_FORMULA = "w_gain*(gain_db/20) + w_bw*log10(bw_hz) + w_pm*max(0, 1 - |pm_deg - pm_target|/pm_target)"

_MINUS_3DB = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class AdmittanceSystem:
    node_names: Tuple[str, ...]
    G: np.ndarray
    Cm: np.ndarray
    T: np.ndarray
    input_node: int
    output_node: int

    @property
    def dim(self) -> int:
        return len(self.node_names)

    def matrix(self, f_hz: float) -> np.ndarray:
        return self.G + 2j * math.pi * f_hz * self.Cm + self.T


@dataclass(frozen=True)
class SweepConfig:
    f_start: float = 1.0
    f_stop: float = 1e10
    points_per_decade: int = 60
    rtol: float = 1e-4

    def __post_init__(self) -> None:
        if not (0 < self.f_start < self.f_stop):
            raise SimulationError(f"invalid sweep range {self.f_start:g}-{self.f_stop:g} Hz")
        if self.points_per_decade < 1 or self.rtol <= 0:
            raise SimulationError("sweep density and tolerance must be positive")

    @classmethod
    def from_config(cls) -> "SweepConfig":
        return cls(config.SWEEP_F_START, config.SWEEP_F_STOP, config.SWEEP_PPD, config.BISECT_RTOL)

    def frequencies(self) -> np.ndarray:
        decades = math.log10(self.f_stop) - math.log10(self.f_start)
        count = int(round(decades * self.points_per_decade)) + 1
        return np.logspace(math.log10(self.f_start), math.log10(self.f_stop), count)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class FomWeights:
    w_gain: float = 1.0
    w_bw: float = 1.0
    w_pm: float = 1.0
    pm_target_deg: float = 60.0

    def __post_init__(self) -> None:
        weights = (self.w_gain, self.w_bw, self.w_pm)
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise SimulationError("FoM weights must be nonnegative with at least one positive")
        if self.pm_target_deg <= 0:
            raise SimulationError("pm target must be positive")

    @classmethod
    def from_config(cls) -> "FomWeights":
        return cls(config.FOM_W_GAIN, config.FOM_W_BW, config.FOM_W_PM, config.FOM_PM_TARGET)

    def to_dict(self) -> Dict[str, object]:
        return {**asdict(self), "formula": FOM_FORMULA}


@dataclass(frozen=True)
class SimResult:
    gain_db: Optional[float]
    bw_hz: Optional[float]
    ugf_hz: Optional[float]
    pm_deg: Optional[float]
    fom: Optional[float]
    converged: bool

    def with_fom(self, fom: Optional[float]) -> "SimResult":
        return SimResult(self.gain_db, self.bw_hz, self.ugf_hz, self.pm_deg, fom, self.converged)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


# =========================
# Stamping
# =========================

def build_mna(s: StageGraph) -> AdmittanceSystem:
    """Stamp every element of ``s``; the ground row and column are dropped."""
    names = tuple(n for n in s.stage_nodes if n != GND)
    index = {name: i for i, name in enumerate(names)}
    touched = {el.src for el in s.elements} | {el.dst for el in s.elements}
    dangling = [n for n in names if n not in touched]
    if dangling:
        raise SimulationError(f"dangling stage node(s): {', '.join(dangling)}")

    dim = len(names)
    G = np.zeros((dim, dim))
    Cm = np.zeros((dim, dim))
    T = np.zeros((dim, dim))

    def stamp_two_terminal(mat: np.ndarray, a: str, b: str, y: float) -> None:
        ia, ib = index.get(a), index.get(b)
        if ia is not None:
            mat[ia, ia] += y
        if ib is not None:
            mat[ib, ib] += y
        if ia is not None and ib is not None:
            mat[ia, ib] -= y
            mat[ib, ia] -= y

    for el in s.elements:
        kind = el.device.kind
        value = el.device.value
        if kind.kind is Kind.R:
            stamp_two_terminal(G, el.src, el.dst, 1.0 / value)
        elif kind.kind is Kind.C:
            stamp_two_terminal(Cm, el.src, el.dst, value)
        else:
            ctrl, out = index.get(el.controlling_node), index.get(el.output_node)
            if ctrl is None or out is None:
                raise SimulationError(
                    f"Gm {el.src}->{el.dst} has a grounded terminal and stamps nothing"
                )
            sign = -1.0 if kind.polarity is Polarity.POSITIVE else 1.0
            T[out, ctrl] += sign * value

    return AdmittanceSystem(
        node_names=names, G=G, Cm=Cm, T=T,
        input_node=index["in"], output_node=index["out"],
    )


def _reduced(sys: AdmittanceSystem) -> Tuple[List[int], int]:
    keep = [i for i in range(sys.dim) if i != sys.input_node]
    return keep, keep.index(sys.output_node)


def transfer_at(sys: AdmittanceSystem, f_hz: float) -> complex:
    """
    V(out)/V(in) at ``f_hz`` with the input held at 1 V.

    A singular system returns complex NaN rather than raising.
    """
    if f_hz < 0:
        raise SimulationError(f"frequency must be nonnegative, got {f_hz}")
    keep, out = _reduced(sys)
    Y = sys.matrix(f_hz)
    A = Y[np.ix_(keep, keep)]
    rhs = -Y[keep, sys.input_node]
    try:
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    except (ValueError, np.linalg.LinAlgError):
        return complex("nan")
    if np.any(np.diag(lu) == 0):
        return complex("nan")
    v = scipy.linalg.lu_solve((lu, piv), rhs)
    return complex(v[out])


def transfer_sweep(sys: AdmittanceSystem, freqs: Sequence[float]) -> np.ndarray:
    """Transfer function at every frequency, solved as one batched system."""
    keep, out = _reduced(sys)
    freqs = np.asarray(freqs, dtype=float)
    s = 2j * np.pi * freqs[:, None, None]
    Y = sys.G[None] + s * sys.Cm[None] + sys.T[None]
    A = Y[:, keep][:, :, keep]
    rhs = -Y[:, keep, sys.input_node]
    try:
        v = np.linalg.solve(A, rhs[..., None])[..., 0]
        return v[:, out]
    except np.linalg.LinAlgError:
        return np.array([transfer_at(sys, f) for f in freqs])


# =========================
# Performance extraction
# =========================

def _bisect_crossing(sys: AdmittanceSystem, lo: float, hi: float, target: float, rtol: float) -> float:
    """Frequency in [lo, hi] where |H| falls through ``target``."""
    while (hi - lo) / lo > rtol:
        mid = math.sqrt(lo * hi)
        if abs(transfer_at(sys, mid)) >= target:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def _first_down_crossing(mag: np.ndarray, target: float) -> Optional[int]:
    below = np.nonzero((mag[:-1] >= target) & (mag[1:] < target))[0]
    return int(below[0]) if below.size else None


def _wrap_degrees(angle: float) -> float:
    """Map to (-180, 180]; phase margin is reported in that range."""
    return 180.0 - ((180.0 - angle) % 360.0)


def extract_specs(sys: AdmittanceSystem, cfg: Optional[SweepConfig] = None) -> SimResult:
    """
    Sweep, then refine the -3 dB and unity-gain crossings by bisection.

    A singular solve anywhere in the sweep, or a response that never falls
    through unity gain, gives ``converged=False`` with whatever specs were
    determined.
    """
    cfg = cfg or SweepConfig.from_config()
    freqs = cfg.frequencies()
    H = transfer_sweep(sys, freqs)
    if not np.all(np.isfinite(H)):
        return SimResult(None, None, None, None, None, converged=False)

    mag = np.abs(H)
    gain_db = 20.0 * math.log10(mag[0]) if mag[0] > 0 else None

    bw_hz = None
    k = _first_down_crossing(mag, mag[0] * _MINUS_3DB)
    if k is not None:
        bw_hz = _bisect_crossing(sys, freqs[k], freqs[k + 1], mag[0] * _MINUS_3DB, cfg.rtol)

    k = _first_down_crossing(mag, 1.0)
    if k is None or bw_hz is None or gain_db is None:
        return SimResult(gain_db, bw_hz, None, None, None, converged=False)
    ugf_hz = _bisect_crossing(sys, freqs[k], freqs[k + 1], 1.0, cfg.rtol)

    h_ugf = transfer_at(sys, ugf_hz)
    pm_deg = _wrap_degrees(180.0 + math.degrees(math.atan2(h_ugf.imag, h_ugf.real)))
    return SimResult(gain_db, bw_hz, ugf_hz, pm_deg, None, converged=True)


def compute_fom(r: SimResult, w: Optional[FomWeights] = None) -> Optional[float]:
    """Weighted normalized sum of Gain, BW and PM; None marks an invalid result."""
    w = w or FomWeights.from_config()
    if not r.converged:
        return None
    pm_term = max(0.0, 1.0 - abs(r.pm_deg - w.pm_target_deg) / w.pm_target_deg)
    return w.w_gain * (r.gain_db / 20.0) + w.w_bw * math.log10(r.bw_hz) + w.w_pm * pm_term


# =========================
# Bode export
# =========================

@dataclass(frozen=True)
class BodeTable:
    f_hz: np.ndarray
    mag_db: np.ndarray
    phase_deg: np.ndarray


def bode(sys: AdmittanceSystem, cfg: Optional[SweepConfig] = None) -> BodeTable:
    cfg = cfg or SweepConfig.from_config()
    freqs = cfg.frequencies()
    H = transfer_sweep(sys, freqs)
    with np.errstate(divide="ignore", invalid="ignore"):
        mag_db = 20.0 * np.log10(np.abs(H))
    phase = np.degrees(np.unwrap(np.angle(H)))
    return BodeTable(freqs, mag_db, phase)


def write_bode_csv(table: BodeTable, path: Path, header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("f_hz,mag_db,phase_deg\n")
        for f, m, p in zip(table.f_hz, table.mag_db, table.phase_deg):
            fh.write(f"{f:.9g},{m:.9g},{p:.9g}\n")


# =========================
# Simulator facade
# =========================

class CircuitSimulator:
    """Sweep settings plus FoM weights; turns circuits into labelled results."""

    def __init__(self, sweep: Optional[SweepConfig] = None, weights: Optional[FomWeights] = None):
        self.sweep = sweep or SweepConfig.from_config()
        self.weights = weights or FomWeights.from_config()

    def simulate_stage_graph(self, s: StageGraph) -> SimResult:
        with timed("simulate"):
            result = extract_specs(build_mna(s), self.sweep)
        return result.with_fom(compute_fom(result, self.weights))

    def simulate(self, g: DeviceDag) -> SimResult:
        return self.simulate_stage_graph(to_stage_graph(g))

    def describe(self) -> Dict[str, object]:
        return {"sweep": self.sweep.to_dict(), "fom": self.weights.to_dict()}
