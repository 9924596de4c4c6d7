# tests/conftest.py
from typing import List

import pytest

from src.acsim import CircuitSimulator, FomWeights, SweepConfig
from src.circuit import (
    C_KIND,
    GM_VARIANTS,
    GND,
    IN,
    OUT,
    R_KIND,
    DeviceDag,
    DeviceInstance,
    DeviceKind,
    StageElement,
    StageGraph,
    build_dag,
)
from src.dataset import DatasetRecord, SamplerConfig, generate_records
from src.vae import CircuitVAE, VaeConfig

GM_POS_FWD = GM_VARIANTS[0]


def single_pole_stage(
    gm: float = 1e-3, r: float = 1e6, c: float = 1e-12, gm_kind: DeviceKind = GM_POS_FWD
) -> StageGraph:
    """
    In -> Gm -> Out with R and C from Out to ground.

    One stage is below the circuit minimum, so this lives only as a
    StageGraph for the simulator and netlist oracles.
    """
    return StageGraph(
        stage_nodes=(IN, OUT, GND),
        elements=(
            StageElement(DeviceInstance(gm_kind, gm), IN, OUT),
            StageElement(DeviceInstance(R_KIND, r), OUT, GND),
            StageElement(DeviceInstance(C_KIND, c), OUT, GND),
        ),
        stage_count=1,
    )


def two_pole_dag(gm: float = 1e-3, r: float = 1e6, c: float = 1e-12) -> DeviceDag:
    """Two identical single-pole stages in cascade."""
    return build_dag(
        [(GM_POS_FWD, gm), (R_KIND, r), (C_KIND, c), (GM_POS_FWD, gm), (R_KIND, r), (C_KIND, c)],
        [(0, 1), (1, 2), (1, 3), (1, 4), (4, 5), (4, 6), (4, 7)],
        stage_count=2,
        name="two-pole",
    )


@pytest.fixture
def single_pole() -> StageGraph:
    return single_pole_stage()


@pytest.fixture
def two_pole() -> DeviceDag:
    return two_pole_dag()


@pytest.fixture(scope="session")
def simulator() -> CircuitSimulator:
    return CircuitSimulator(SweepConfig(), FomWeights())


@pytest.fixture(scope="session")
def sampled_records(simulator) -> List[DatasetRecord]:
    """A dozen converged, distinct, graphlized circuits."""
    return generate_records(12, SamplerConfig(seed=3), simulator)


@pytest.fixture(scope="session")
def tiny_vae_config() -> VaeConfig:
    return VaeConfig(latent_dim=8, inner_layers=2, inner_hidden=8, outer_hidden=8, decoder_hidden=8)


@pytest.fixture
def tiny_vae(tiny_vae_config) -> CircuitVAE:
    return CircuitVAE(tiny_vae_config, seed=0)
