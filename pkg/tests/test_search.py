"""
Tests for the GP surrogate, expected improvement, BO and the metric suite.
"""

import logging

import numpy as np
import pytest

import src.search as search
from src.errors import ConfigError
from src.search import (
    PROPERTIES,
    BoConfig,
    EvalConfig,
    bo_loop,
    eval_suite,
    expected_improvement,
    fit_gp,
    generation_stats,
    max_min_subset,
    predict_gp,
    property_targets,
    random_search,
    regression_scores,
    simulatable,
    write_trajectory_csv,
)
from src.vae import DecodeResult

SMALL_BO = BoConfig(
    batch_size=3,
    iterations=2,
    n_seed=6,
    prior_samples=20,
    perturb_samples=20,
    top_k=3,
    gp_steps=5,
    gp_max_points=50,
    seed=0,
)


# =========================
# Expected improvement
# =========================

def test_ei_closed_form():
    assert expected_improvement(1.0, 1.0, 0.0) == pytest.approx(1.0833154705876864, rel=1e-12)


def test_ei_without_uncertainty_is_plain_improvement():
    assert expected_improvement(2.0, 0.0, 1.0) == pytest.approx(1.0)
    assert expected_improvement(0.0, 0.0, 1.0) == 0.0


def test_ei_grows_with_sigma():
    sigmas = np.array([0.0, 0.1, 0.5, 1.0, 2.0])
    ei = expected_improvement(np.zeros(5), sigmas, 0.5)
    assert isinstance(ei, np.ndarray)
    assert np.all(np.diff(ei) > 0)


def test_ei_rejects_negative_sigma():
    with pytest.raises(ConfigError):
        expected_improvement(0.0, -1.0, 0.0)


# =========================
# Gaussian process
# =========================

def test_gp_interpolates_noise_free_data():
    X = np.linspace(0.0, 1.0, 8)[:, None]
    y = np.sin(3.0 * X[:, 0])
    gp = fit_gp(X, y, steps=0, noise_var=1e-10)
    mean, var = predict_gp(gp, X)
    np.testing.assert_allclose(mean, y, atol=1e-2)
    assert np.all(var < 1e-3)


def test_gp_reverts_to_prior_far_from_data():
    X = np.linspace(0.0, 1.0, 8)[:, None]
    y = np.cos(2.0 * X[:, 0]) + 3.0
    gp = fit_gp(X, y, steps=0)
    mean, var = predict_gp(gp, np.array([[100.0]]))
    assert mean[0] == pytest.approx(y.mean(), abs=1e-6)
    assert var[0] == pytest.approx(gp.signal_var * gp.y_std ** 2, rel=1e-6)


def test_gp_likelihood_trace_never_decreases():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=30)
    gp = fit_gp(X, y, steps=40)
    assert len(gp.lml_trace) >= 2
    assert np.all(np.diff(gp.lml_trace) >= 0)


def test_gp_beats_constant_predictor():
    rng = np.random.default_rng(1)
    X = rng.uniform(-2, 2, size=(40, 2))
    f = lambda A: np.sin(A[:, 0]) + 0.5 * A[:, 1] ** 2
    X_test = rng.uniform(-2, 2, size=(20, 2))
    gp = fit_gp(X, f(X), steps=50)
    gp_rmse = regression_scores(predict_gp(gp, X_test)[0], f(X_test))["rmse"]
    const_rmse = regression_scores(np.full(20, f(X).mean()), f(X_test))["rmse"]
    assert gp_rmse < 0.5 * const_rmse


def test_gp_constant_targets(caplog):
    X = np.random.default_rng(2).normal(size=(5, 3))
    with caplog.at_level(logging.WARNING, logger="ckt.search"):
        gp = fit_gp(X, np.full(5, 7.0))
    assert gp.constant
    mean, var = predict_gp(gp, X[:2])
    np.testing.assert_allclose(mean, 7.0)
    np.testing.assert_allclose(var, 0.0)
    assert any("zero variance" in r.getMessage() for r in caplog.records if r.name == "ckt.search")


def test_gp_input_checks():
    with pytest.raises(ConfigError):
        fit_gp(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ConfigError):
        fit_gp(np.zeros((3, 2)), np.array([0.0, np.nan, 1.0]))


def test_gp_fits_on_a_subset():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20, 2))
    gp = fit_gp(X, X[:, 0], steps=5, max_points=5)
    assert len(gp.subset) == 5
    assert gp.X.shape == (5, 2)


def test_max_min_subset_spreads_out():
    X = np.arange(10.0)[:, None]
    np.testing.assert_array_equal(max_min_subset(X, 3), [0, 4, 9])
    np.testing.assert_array_equal(max_min_subset(X, 20), np.arange(10))


# =========================
# Bayesian optimization
# =========================

def test_bo_config_checks():
    with pytest.raises(ConfigError):
        BoConfig(n_seed=1)
    with pytest.raises(ConfigError):
        BoConfig(batch_size=0)


def test_bo_loop_trajectory(tiny_vae, sampled_records, simulator, caplog):
    with caplog.at_level(logging.INFO, logger="ckt.search"):
        result = bo_loop(tiny_vae, sampled_records, simulator, SMALL_BO)

    seeds = [ev for ev in result.trajectory if ev.iteration == 0]
    assert len(seeds) == SMALL_BO.n_seed
    assert len(result.trajectory) == SMALL_BO.n_seed + SMALL_BO.iterations * SMALL_BO.batch_size
    assert seeds[-1].best_so_far == max(ev.fom for ev in seeds)
    assert {ev.candidate_id for ev in seeds} <= {r.id for r in sampled_records}

    later = [ev for ev in result.trajectory if ev.iteration > 0]
    assert [ev.candidate_id for ev in later] == list(range(12, 12 + len(later)))
    for ev in later:
        if not ev.valid:
            assert ev.fom is None and ev.sim is None

    bests = [ev.best_so_far for ev in result.trajectory]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))
    scored = [ev.fom for ev in result.trajectory if ev.fom is not None]
    assert result.best_fom == max(scored)
    assert result.dataset_best == max(r.sim.fom for r in sampled_records)
    assert result.regret == pytest.approx(result.dataset_best - result.best_fom)
    assert [it for it, _ in result.iteration_best()] == [0, 1, 2]

    messages = [r.getMessage() for r in caplog.records if r.name == "ckt.search"]
    assert any(m.startswith("bo iteration 2:") for m in messages)


def test_bo_loop_is_deterministic(tiny_vae, sampled_records, simulator):
    a = bo_loop(tiny_vae, sampled_records, simulator, SMALL_BO)
    b = bo_loop(tiny_vae, sampled_records, simulator, SMALL_BO)
    assert [(ev.candidate_id, ev.fom) for ev in a.trajectory] == [(ev.candidate_id, ev.fom) for ev in b.trajectory]


def test_only_simulatable_circuits_reach_the_simulator(monkeypatch, tiny_vae, sampled_records, simulator):
    seen = []
    original = search.simulate_many

    def spy(dags, sim, workers=1):
        seen.extend(dags)
        return original(dags, sim, workers)

    monkeypatch.setattr(search, "simulate_many", spy)
    bo_loop(tiny_vae, sampled_records, simulator, SMALL_BO)
    assert all(simulatable(g) for g in seen)


def test_random_search_shares_seeds_and_budget(tiny_vae, sampled_records, simulator):
    bo = bo_loop(tiny_vae, sampled_records, simulator, SMALL_BO)
    rnd = random_search(tiny_vae, sampled_records, simulator, SMALL_BO)
    assert rnd.method == "random"
    assert len(rnd.trajectory) == len(bo.trajectory)
    seed_ids = lambda r: [ev.candidate_id for ev in r.trajectory if ev.iteration == 0]
    assert seed_ids(rnd) == seed_ids(bo)


def test_trajectory_csv(tmp_path, tiny_vae, sampled_records, simulator):
    result = random_search(tiny_vae, sampled_records, simulator, SMALL_BO)
    path = tmp_path / "random_trajectory.csv"
    write_trajectory_csv(path, result, header_lines=["cktgrid 0.1.0"])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# cktgrid 0.1.0"
    assert lines[1] == "iteration,candidate_id,valid,fom,best_so_far"
    assert len(lines) == 2 + len(result.trajectory)
    first = lines[2].split(",")
    assert first[0] == "0" and first[2] == "1"


# =========================
# Metric suite
# =========================

def test_regression_scores():
    truth = np.array([1.0, 2.0, 3.0])
    assert regression_scores(truth, truth) == {"rmse": 0.0, "pearson": pytest.approx(1.0)}
    assert regression_scores(np.full(3, 2.0), truth)["pearson"] == 0.0


def test_property_targets_use_log_bandwidth(sampled_records):
    targets = property_targets(sampled_records)
    assert set(targets) == set(PROPERTIES)
    np.testing.assert_allclose(targets["bw"], np.log10([r.sim.bw_hz for r in sampled_records]))


def test_eval_suite_bounds(tiny_vae, sampled_records):
    cfg = EvalConfig(latent_points=3, decodes_per_point=2, gp_steps=5, gp_max_points=50)
    m = eval_suite(tiny_vae, sampled_records[:8], sampled_records[8:], cfg)
    assert m.latent_points == 3 and m.decodes_per_point == 2
    for pct in (m.valid_dag_pct, m.valid_circuit_pct, m.novel_pct):
        assert 0.0 <= pct <= 100.0
    assert m.valid_circuit_pct <= m.valid_dag_pct
    assert set(m.gp) == set(PROPERTIES)
    for scores in m.gp.values():
        assert scores["rmse"] >= 0.0
        assert -1.0 <= scores["pearson"] <= 1.0
    assert 0.0 <= m.reconstruction <= 1.0
    assert m.property_head is not None


def test_eval_suite_without_test_records(tiny_vae, sampled_records):
    m = eval_suite(tiny_vae, sampled_records, [], EvalConfig(latent_points=1, decodes_per_point=1))
    assert m.gp == {}
    assert m.reconstruction is None
    assert m.property_head is None


def test_novelty_counts_training_circuits(monkeypatch, tiny_vae, sampled_records):
    record = sampled_records[0]
    monkeypatch.setattr(search, "decode", lambda z, model, mode, rng: DecodeResult(record.transformed, False))
    cfg = EvalConfig(latent_points=2, decodes_per_point=2)

    valid_dag, valid_circuit, novel, forced = generation_stats(tiny_vae, {record.hash}, cfg)
    assert (valid_dag, valid_circuit, novel, forced) == (100.0, 100.0, 0.0, 0)

    _, _, novel, _ = generation_stats(tiny_vae, set(), cfg)
    assert novel == 100.0
