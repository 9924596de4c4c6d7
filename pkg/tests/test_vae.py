"""
Tests for decoding, the teacher-forced loss, training and checkpoints.
"""

import logging
import math
from dataclasses import replace

import networkx as nx
import numpy as np
import pytest

from src.circuit import Role
from src.encoder import NUM_ENTRIES
from src.errors import CheckpointError, ConfigError
from src.nn import Tape, Tensor, save_checkpoint
from src.vae import (
    CURVE_FIELDS,
    CircuitVAE,
    TrainConfig,
    VaeConfig,
    decode,
    decoded_circuit,
    fit_property_head,
    load_model,
    reconstruction_accuracy,
    reparameterize,
    save_model,
    teacher_forced_loss,
    train,
    write_curves_csv,
)
from src.utils.seeding import make_rng


def _z(model, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(model.cfg.latent_dim)


def _never_stop(monkeypatch, model, entry_id: int = 4):
    logits = np.full(NUM_ENTRIES + 1, -10.0)
    logits[entry_id] = 10.0
    monkeypatch.setattr(model.decoder, "type_logits", lambda last: Tensor(logits))


# =========================
# Config
# =========================

@pytest.mark.parametrize(
    "kwargs",
    [{"latent_dim": 0}, {"max_nodes": 2}, {"edge_threshold": 1.0}, {"decoder_hidden": 0}],
)
def test_invalid_vae_config(kwargs):
    with pytest.raises(ConfigError):
        VaeConfig(**kwargs)


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": -1}, {"batch_size": 0}, {"lr": 0.0}, {"momentum": 1.0}],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# =========================
# Decoding
# =========================

@pytest.mark.parametrize("seed", range(5))
def test_greedy_decode_structure(tiny_vae, seed):
    result = decode(_z(tiny_vae, seed), tiny_vae, "greedy")
    t = result.transformed
    assert t.nodes[0].role is Role.INPUT
    assert t.nodes[-1].role is Role.OUTPUT
    assert [n.id for n in t.nodes] == list(range(len(t.nodes)))
    assert 2 <= len(t.nodes) <= tiny_vae.cfg.max_nodes
    assert all(s < d for s, d in t.edges)
    for n in t.nodes[1:-1]:
        assert n.role is Role.DEVICE and 0 <= n.entry_id < NUM_ENTRIES
        assert len(n.params) == tiny_vae.basis.entry(n.entry_id).size


@pytest.mark.parametrize("mode", ["greedy", "sample"])
def test_decoded_graphs_are_acyclic(tiny_vae, mode):
    rng = make_rng(2, 9)
    for seed in range(100):
        t = decode(_z(tiny_vae, seed), tiny_vae, mode, rng).transformed
        assert nx.is_directed_acyclic_graph(t.to_networkx())


def test_greedy_decode_is_deterministic(tiny_vae):
    z = _z(tiny_vae)
    assert decode(z, tiny_vae).transformed == decode(z, tiny_vae).transformed


def test_sample_decode_follows_its_rng(tiny_vae):
    z = _z(tiny_vae)
    a = decode(z, tiny_vae, "sample", make_rng(1, 9))
    b = decode(z, tiny_vae, "sample", make_rng(1, 9))
    assert a == b


def test_sample_mode_needs_rng(tiny_vae):
    with pytest.raises(ConfigError, match="rng"):
        decode(_z(tiny_vae), tiny_vae, "sample")


def test_unknown_decode_mode(tiny_vae):
    with pytest.raises(ConfigError):
        decode(_z(tiny_vae), tiny_vae, "beam")


def test_output_is_forced_at_max_nodes(monkeypatch, tiny_vae):
    _never_stop(monkeypatch, tiny_vae)
    result = decode(_z(tiny_vae), tiny_vae)
    assert result.forced_stop
    assert len(result.transformed.nodes) == tiny_vae.cfg.max_nodes
    assert result.transformed.nodes[-1].role is Role.OUTPUT


def test_decoded_params_stay_in_range(monkeypatch, tiny_vae):
    _never_stop(monkeypatch, tiny_vae)
    t = decode(_z(tiny_vae), tiny_vae).transformed
    for n in t.nodes[1:-1]:
        assert 1e-4 <= n.params[0] <= 1e-2


def test_decoded_circuit_takes_stage_count_from_main_path(sampled_records, tiny_vae):
    record = sampled_records[0]
    g = decoded_circuit(record.transformed, tiny_vae.basis)
    assert g.stage_count == record.circuit.stage_count


# =========================
# Loss
# =========================

def test_reparameterize_without_noise_is_the_mean():
    mu = Tensor(np.array([0.5, -1.0]))
    logvar = Tensor(np.array([0.3, 0.1]))
    np.testing.assert_allclose(reparameterize(mu, logvar).data, mu.data)
    z = reparameterize(mu, logvar, eps=np.ones(2))
    np.testing.assert_allclose(z.data, mu.data + np.exp(logvar.data / 2))


@pytest.mark.parametrize("encoder", ["cktgnn", "baseline"])
def test_loss_is_finite_and_nonnegative(sampled_records, tiny_vae_config, encoder):
    cfg = replace(tiny_vae_config, encoder=encoder)
    model = CircuitVAE(cfg, seed=0)
    record = sampled_records[0]
    parts = teacher_forced_loss(record.circuit, record.transformed, model, eps=np.zeros(cfg.latent_dim))
    assert math.isfinite(parts.total.item())
    for value in (parts.recon_type, parts.recon_edge, parts.recon_param, parts.kl):
        assert value >= 0.0
    expected = parts.recon_type + parts.recon_edge + parts.recon_param + cfg.kl_weight * parts.kl
    assert parts.total.item() == pytest.approx(expected)


def test_loss_gradients_match_finite_differences(sampled_records, tiny_vae):
    record = sampled_records[1]
    eps = np.zeros(tiny_vae.cfg.latent_dim)

    def loss() -> float:
        return teacher_forced_loss(record.circuit, record.transformed, tiny_vae, eps=eps).total.item()

    with Tape() as tape:
        total = teacher_forced_loss(record.circuit, record.transformed, tiny_vae, eps=eps).total
    tape.backward(total)

    h = 1e-6
    names = (
        "vae.mu.b", "vae.logvar.b", "dec.subg1.b", "dec.edge1.b", "dec.feat0.b", "dec.feat1.b", "enc.outer.gru.bw",
    )
    for name in names:
        p = tiny_vae.store[name]
        assert p.grad is not None, name
        for idx in list(np.ndindex(p.shape))[:4]:
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss()
            p.data[idx] = orig - h
            down = loss()
            p.data[idx] = orig
            assert p.grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-3, abs=1e-5), name


# =========================
# Training
# =========================

def test_training_reduces_loss(sampled_records, tiny_vae_config, caplog):
    cfg = TrainConfig(epochs=10, batch_size=2, lr=1e-3, seed=0)
    with caplog.at_level(logging.INFO, logger="ckt.train"):
        state = train(sampled_records[:4], cfg, tiny_vae_config)
    assert state.epoch == 10
    assert len(state.curves) == 10
    assert state.curves[-1]["total"] < state.curves[0]["total"]
    epochs = [r.getMessage() for r in caplog.records if r.name == "ckt.train" and r.getMessage().startswith("epoch")]
    assert len(epochs) == 10


def test_single_circuit_is_memorized_without_kl(sampled_records, tiny_vae_config):
    cfg = TrainConfig(epochs=300, batch_size=1, lr=2e-2, seed=0)
    state = train(sampled_records[:1], cfg, replace(tiny_vae_config, kl_weight=0.0))
    first, last = state.curves[0]["total"], state.curves[-1]["total"]
    assert last < 0.2 * first


def test_training_needs_a_full_batch(sampled_records, tiny_vae_config):
    with pytest.raises(ConfigError, match="fewer than batch size"):
        train(sampled_records[:2], TrainConfig(epochs=1, batch_size=4), tiny_vae_config)


def test_save_and_load_model(tmp_path, sampled_records, tiny_vae_config):
    cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3)
    state = train(sampled_records[:4], cfg, tiny_vae_config)
    path = tmp_path / "model.ckpt"
    save_model(path, state, cfg, extra={"dataset": "d.jsonl"})

    restored, restored_cfg, meta = load_model(path)
    assert restored_cfg == cfg
    assert restored.epoch == 1
    assert restored.model.cfg == tiny_vae_config
    assert meta["extra"] == {"dataset": "d.jsonl"}
    for name, arr in state.model.store.state_dict().items():
        np.testing.assert_array_equal(restored.model.store[name].data, arr)
    assert set(restored.optimizer.velocity) == set(state.optimizer.velocity)
    assert restored.schedule.state() == state.schedule.state()

    again = tmp_path / "again.ckpt"
    save_model(again, restored, restored_cfg, extra=meta["extra"])
    assert again.read_bytes() == path.read_bytes()


def test_resumed_training_matches_uninterrupted(tmp_path, sampled_records, tiny_vae_config):
    records = sampled_records[:4]
    full_cfg = TrainConfig(epochs=3, batch_size=2, lr=1e-3)
    straight = train(records, full_cfg, tiny_vae_config)

    path = tmp_path / "model.ckpt"
    train(records, TrainConfig(epochs=1, batch_size=2, lr=1e-3), tiny_vae_config, checkpoint_path=path)
    state, _, _ = load_model(path)
    resumed = train(records, full_cfg, state=state)

    assert [row["total"] for row in resumed.curves] == pytest.approx(
        [row["total"] for row in straight.curves], rel=1e-12
    )


def test_load_rejects_plain_checkpoints(tmp_path):
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, {"w": np.ones(2)})
    with pytest.raises(CheckpointError, match="not a model checkpoint"):
        load_model(path)


def test_curves_csv(tmp_path):
    rows = [
        {"epoch": 1, "total": 3.5, "recon_type": 1.0, "recon_edge": 2.0, "recon_param": 0.25, "kl": 10.0, "lr": 1e-4},
    ]
    path = tmp_path / "curves.csv"
    write_curves_csv(path, rows, header_lines=["cktgrid 0.1.0"])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# cktgrid 0.1.0"
    assert lines[1] == ",".join(CURVE_FIELDS)
    assert lines[2] == "1,3.5,1.0,2.0,0.25,10.0,0.0001"


# =========================
# Metrics
# =========================

def test_reconstruction_accuracy_bounds(sampled_records, tiny_vae):
    acc = reconstruction_accuracy(tiny_vae, sampled_records[:3])
    assert 0.0 <= acc <= 1.0
    assert reconstruction_accuracy(tiny_vae, []) == 0.0


def test_property_head_recovers_linear_targets():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + 3.0
    head = fit_property_head(X, y)
    np.testing.assert_allclose(head.predict(X), y, atol=1e-2)


def test_property_head_handles_constant_targets():
    X = np.random.default_rng(1).normal(size=(10, 2))
    head = fit_property_head(X, np.full(10, 4.0))
    np.testing.assert_allclose(head.predict(X), 4.0)
