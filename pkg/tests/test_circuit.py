"""
Tests for the device DAG, validity rules, canonical form and stage graphs.
"""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.circuit import (
    C_KIND,
    GM_VARIANTS,
    GND,
    IN,
    OUT,
    R_KIND,
    RULE_ACYCLIC,
    RULE_CONNECTED,
    RULE_MAIN_PATH,
    RULE_PARALLEL_GM,
    RULE_SINGLE_IO,
    RULE_STAGE_COUNT,
    DagNode,
    DeviceDag,
    DeviceInstance,
    Kind,
    Role,
    StageElement,
    StageGraph,
    build_dag,
    canonicalize,
    circuit_hash,
    denormalize_value,
    format_hash,
    from_stage_graph,
    main_path,
    normalize_value,
    permute_ids,
    to_stage_graph,
    validate_circuit,
)
from src.errors import ConversionError, CycleError, StructuralError
from tests.conftest import two_pole_dag

GM = GM_VARIANTS[0]
GM_FBK = GM_VARIANTS[3]


# =========================
# Structure
# =========================

def test_edge_to_missing_node_is_structural_error():
    with pytest.raises(StructuralError, match="missing"):
        build_dag([(GM, 1e-3)], [(0, 1), (1, 7)], stage_count=2)


def test_self_loop_is_structural_error():
    with pytest.raises(StructuralError):
        build_dag([(GM, 1e-3)], [(0, 1), (1, 1), (1, 2)], stage_count=2)


def test_gm_needs_polarity_and_direction():
    from src.circuit import DeviceKind

    with pytest.raises(StructuralError):
        DeviceKind(Kind.GM)
    with pytest.raises(StructuralError):
        DeviceKind(Kind.R, polarity=GM.polarity)


def test_device_value_must_be_positive():
    with pytest.raises(StructuralError):
        DeviceInstance(R_KIND, 0.0)


def test_normalize_round_trip():
    for kind, value in ((Kind.R, 3.3e5), (Kind.C, 2e-13), (Kind.GM, 5e-3)):
        x = normalize_value(kind, value)
        assert 0.0 <= x <= 1.0
        assert denormalize_value(kind, x) == pytest.approx(value, rel=1e-12)


# =========================
# Validity
# =========================

def _gm_chain(stages: int) -> DeviceDag:
    """Input -> Gm -> ... -> Gm -> Output with an R load on every stage output."""
    devices = [(GM, 1e-3)] * stages + [(R_KIND, 1e6)] * stages
    edges = [(0, 1)] + [(k, k + 1) for k in range(1, stages)] + [(stages, 2 * stages + 1)]
    edges += [(k, stages + k) for k in range(1, stages + 1)]
    return build_dag(devices, edges, stage_count=stages)


def _shuffled(g: DeviceDag, perm) -> DeviceDag:
    """Relabel ids by ``perm`` and list nodes and edges in a different order."""
    mapping = {old: new for old, new in enumerate(perm)}
    relabeled = permute_ids(g, mapping)
    nodes = tuple(sorted(relabeled.nodes, key=lambda n: perm.index(n.id)))
    return DeviceDag(nodes=nodes, edges=tuple(reversed(relabeled.edges)), stage_count=g.stage_count)


def test_two_pole_is_valid(two_pole):
    report = validate_circuit(two_pole)
    assert report.is_valid_dag and report.is_valid_circuit
    assert report.violations == ()


def test_two_pole_main_path(two_pole):
    assert main_path(two_pole) == [1, 4]


@pytest.mark.parametrize("stages,valid", [(1, False), (2, True), (3, True), (4, False)])
def test_main_path_needs_two_or_three_stages(stages, valid):
    g = _gm_chain(stages)
    report = validate_circuit(g)
    assert len(main_path(g)) == stages
    assert report.is_valid_dag
    assert report.is_valid_circuit is valid
    assert report.violations == (() if valid else (RULE_STAGE_COUNT,))


def test_one_stage_network_is_not_a_circuit(single_pole):
    g = from_stage_graph(single_pole)
    assert validate_circuit(g).violations == (RULE_STAGE_COUNT,)
    with pytest.raises(ConversionError, match="stage-count"):
        to_stage_graph(g)


@pytest.mark.parametrize("second", GM_VARIANTS)
def test_two_gm_between_the_same_stages_are_rejected(second):
    # gm1 and gm2 both drive s1 from the input; gm3 carries s1 to the output
    g = build_dag(
        [(GM, 1e-3), (second, 2e-3), (GM, 1e-3)],
        [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)],
        stage_count=2,
    )
    report = validate_circuit(g)
    assert report.is_valid_dag
    assert not report.is_valid_circuit
    assert report.violations == (RULE_PARALLEL_GM,)


def test_gm_parallel_with_resistor_is_a_basis_entry():
    g = build_dag(
        [(GM, 1e-3), (R_KIND, 1e6), (GM, 1e-3)],
        [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)],
        stage_count=2,
    )
    assert validate_circuit(g).is_valid_circuit


def test_direct_input_output_edge_has_no_main_path():
    g = build_dag([], [(0, 1)], stage_count=2)
    report = validate_circuit(g)
    assert report.is_valid_dag
    assert not report.is_valid_circuit
    assert report.violations == (RULE_MAIN_PATH,)


def test_resistor_on_main_path_is_invalid_circuit():
    g = build_dag([(R_KIND, 1e6)], [(0, 1), (1, 2)], stage_count=2)
    report = validate_circuit(g)
    assert report.is_valid_dag
    assert report.violations == (RULE_MAIN_PATH,)


def test_cycle_is_reported():
    g = build_dag([(GM, 1e-3), (GM, 1e-3)], [(0, 1), (1, 2), (2, 1), (2, 3)], stage_count=2)
    report = validate_circuit(g)
    assert not report.is_valid_dag
    assert RULE_ACYCLIC in report.violations
    assert RULE_MAIN_PATH in report.violations


def test_two_inputs_violate_single_io():
    nodes = (
        DagNode(0, Role.INPUT),
        DagNode(1, Role.INPUT),
        DagNode(2, Role.DEVICE, DeviceInstance(GM, 1e-3)),
        DagNode(3, Role.OUTPUT),
    )
    g = DeviceDag(nodes=nodes, edges=((0, 2), (1, 2), (2, 3)), stage_count=2)
    report = validate_circuit(g)
    assert report.violations[0] == RULE_SINGLE_IO
    assert not report.is_valid_dag


def test_unreachable_device_violates_connected():
    g = build_dag([(GM, 1e-3), (R_KIND, 1e6)], [(0, 1), (1, 3), (2, 3)], stage_count=2)
    report = validate_circuit(g)
    assert RULE_CONNECTED in report.violations
    assert not report.is_valid_dag


def test_ground_sink_devices_are_connected(two_pole):
    # R and C have no successors; they end at ground
    passive = [d for d in two_pole.device_ids if not two_pole.node(d).device.kind.is_gm]
    assert passive and all(two_pole.succs(d) == () for d in passive)
    assert RULE_CONNECTED not in validate_circuit(two_pole).violations


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(8))))
def test_validity_ignores_node_order(perm):
    for g in (two_pole_dag(), _gm_chain(3)):
        assert validate_circuit(_shuffled(g, perm)) == validate_circuit(g)


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(5))))
def test_violations_ignore_node_order(perm):
    g = build_dag(
        [(GM, 1e-3), (GM, 2e-3), (GM, 1e-3)],
        [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)],
        stage_count=2,
    )
    assert validate_circuit(_shuffled(g, perm)).violations == (RULE_PARALLEL_GM,)


# =========================
# Canonical form
# =========================

def test_canonicalize_rejects_cycles():
    g = build_dag([(GM, 1e-3), (GM, 1e-3)], [(0, 1), (1, 2), (2, 1), (2, 3)], stage_count=2)
    with pytest.raises(CycleError):
        canonicalize(g)


def test_canonical_input_first_output_after_devices(two_pole):
    canon, _ = canonicalize(two_pole)
    assert canon.nodes[0].role is Role.INPUT
    assert canon.nodes[0].id == 0
    assert [n.id for n in canon.nodes] == list(range(len(canon.nodes)))


def test_canonicalize_is_idempotent(sampled_records):
    for rec in sampled_records:
        canon, h = canonicalize(rec.circuit)
        assert canonicalize(canon) == (canon, h)


def test_hash_ignores_bucket_rounding(two_pole):
    nudged = two_pole_dag(gm=1e-3 * (1 + 1e-6))
    assert circuit_hash(two_pole) == circuit_hash(nudged)
    moved = two_pole_dag(gm=2e-3)
    assert circuit_hash(two_pole) != circuit_hash(moved)


def test_removing_any_edge_changes_the_hash(sampled_records):
    for rec in sampled_records[:4]:
        g = rec.circuit
        for edge in g.edges:
            cut = DeviceDag(
                nodes=g.nodes, edges=tuple(e for e in g.edges if e != edge), stage_count=g.stage_count
            )
            assert circuit_hash(cut) != circuit_hash(g), edge


def test_format_hash_is_16_hex_digits(two_pole):
    text = format_hash(circuit_hash(two_pole))
    assert len(text) == 16
    int(text, 16)


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(8))))
def test_canonical_form_is_permutation_invariant(perm):
    g = two_pole_dag(gm=1e-3, r=2e6, c=3e-13)
    shuffled = permute_ids(g, {old: new for old, new in enumerate(perm)})
    assert canonicalize(shuffled) == canonicalize(g)


# =========================
# Stage graph
# =========================

def test_two_pole_stage_graph(two_pole):
    s = to_stage_graph(two_pole)
    assert s.stage_nodes == (IN, "s1", OUT, GND)
    assert s.main_nodes == (IN, "s1", OUT)
    assert s.stage_count == 2
    gm = sorted((el.src, el.dst) for el in s.elements if el.device.kind.kind is Kind.GM)
    assert gm == [(IN, "s1"), ("s1", OUT)]
    loads = sorted((el.src, el.dst) for el in s.elements if el.device.kind.kind is not Kind.GM)
    assert loads == [(OUT, GND), (OUT, GND), ("s1", GND), ("s1", GND)]


def test_three_stage_chain_names_stage_nodes():
    s = to_stage_graph(_gm_chain(3))
    assert s.main_nodes == (IN, "s1", "s2", OUT)
    assert s.stage_count == 3


@pytest.mark.parametrize("factory", [two_pole_dag, lambda: _gm_chain(3)])
def test_stage_graph_round_trip(factory):
    g = factory()
    assert from_stage_graph(to_stage_graph(g)) == canonicalize(g)[0]


def test_incomplete_junction_has_no_stage_assignment():
    # gm3 shares gm2's input junction with gm1 but does not feed the resistor
    g = build_dag(
        [(GM, 1e-3), (GM, 1e-3), (GM, 2e-3), (R_KIND, 1e6)],
        [(0, 1), (0, 3), (1, 2), (3, 2), (1, 4), (2, 5)],
        stage_count=2,
    )
    assert validate_circuit(g).is_valid_circuit
    with pytest.raises(ConversionError, match="stage assignment"):
        to_stage_graph(g)


def test_invalid_circuit_has_no_stage_graph():
    g = build_dag([(R_KIND, 1e6)], [(0, 1), (1, 2)], stage_count=2)
    with pytest.raises(ConversionError):
        to_stage_graph(g)


def test_feedback_element_is_controlled_by_its_later_node():
    el = StageElement(DeviceInstance(GM_FBK, 1e-4), IN, OUT)
    assert el.controlling_node == OUT
    assert el.output_node == IN
    fwd = StageElement(DeviceInstance(GM, 1e-4), IN, OUT)
    assert fwd.controlling_node == IN


def test_stage_graph_requires_ground_node():
    with pytest.raises(ConversionError, match="gnd"):
        StageGraph(stage_nodes=(IN, OUT), elements=(), stage_count=1)


def test_element_leaving_ground_is_rejected():
    s = StageGraph(
        stage_nodes=(IN, OUT, GND),
        elements=(
            StageElement(DeviceInstance(GM, 1e-3), IN, OUT),
            StageElement(DeviceInstance(C_KIND, 1e-12), GND, OUT),
        ),
        stage_count=1,
    )
    with pytest.raises(ConversionError, match="orientation"):
        from_stage_graph(s)
