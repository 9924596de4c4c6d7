"""
Latent-space search: a subset-of-data Gaussian process surrogate,
expected improvement, batch Bayesian optimization, budget-matched random
search, and the generation/prediction metric suite.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import csv
import logging
import math

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.spatial.distance import cdist, pdist
from scipy.stats import norm, pearsonr

from src.acsim import CircuitSimulator, SimResult, build_mna
from src.circuit import DeviceDag, canonicalize, to_stage_graph, validate_circuit
from src.dataset import simulate_many
from src.errors import CktError, ConfigError
from src.timing import timed
from src.utils.seeding import STREAM_EVAL, STREAM_SEARCH, make_rng
from src.vae import CircuitVAE, decode, decoded_circuit, fit_property_head, reconstruction_accuracy

logger = logging.getLogger("ckt.search")

MAX_JITTER = 1e-6


# =========================
# Gaussian process
# =========================

@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    y_mean: float
    y_std: float
    lengthscale: float
    signal_var: float
    noise_var: float
    subset: np.ndarray
    L: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    constant: bool = False
    lml_trace: List[float] = field(default_factory=list)


def _kernel(A: np.ndarray, B: np.ndarray, lengthscale: float, signal_var: float) -> np.ndarray:
    d2 = cdist(A, B, "sqeuclidean")
    return signal_var * np.exp(-0.5 * d2 / lengthscale ** 2)


def _cholesky(K: np.ndarray) -> np.ndarray:
    jitter = 0.0
    while True:
        try:
            return cholesky(K + jitter * np.eye(len(K)), lower=True)
        except LinAlgError:
            if jitter >= MAX_JITTER:
                raise
            jitter = 1e-10 if jitter == 0.0 else min(MAX_JITTER, jitter * 10.0)


def max_min_subset(X: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point selection starting from the point nearest the centroid."""
    n = len(X)
    if n <= k:
        return np.arange(n)
    first = int(np.argmin(np.linalg.norm(X - X.mean(axis=0), axis=1)))
    chosen = [first]
    dist = np.linalg.norm(X - X[first], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[nxt], axis=1))
    return np.sort(np.array(chosen))


def _lml_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, d2: np.ndarray,
                  fit_noise: bool) -> Tuple[float, np.ndarray]:
    ell, sf2, sn2 = np.exp(theta)
    K = sf2 * np.exp(-0.5 * d2 / ell ** 2)
    Ky = K + sn2 * np.eye(len(X))
    try:
        L = _cholesky(Ky)
    except LinAlgError:
        return -np.inf, np.zeros(3)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi)
    inner = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(len(y)))
    grad = np.array([
        0.5 * np.sum(inner * (K * d2 / ell ** 2)),
        0.5 * np.sum(inner * K),
        0.5 * np.trace(inner) * sn2 if fit_noise else 0.0,
    ])
    return float(lml), grad


def fit_gp(X: np.ndarray, y: np.ndarray, steps: int = 200, max_points: int = 500,
           noise_var: Optional[float] = None, learning_rate: float = 0.05) -> GpModel:
    """
    Fit an SE-kernel GP on a max-min subset of at most ``max_points`` rows.

    Hyperparameters follow log-marginal-likelihood gradient ascent in log
    space; a step is only taken when it does not lower the likelihood,
    otherwise the step size halves. A fixed ``noise_var`` is held constant.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(X) < 2 or len(X) != len(y):
        raise ConfigError(f"fit_gp needs at least 2 aligned points, got X={X.shape} y={y.shape}")
    if not np.all(np.isfinite(y)):
        raise ConfigError("fit_gp targets must be finite")

    subset = max_min_subset(X, max_points)
    Xs, ys = X[subset], y[subset]
    y_mean, y_std = float(ys.mean()), float(ys.std())
    if y_std == 0.0:
        logger.warning("GP targets have zero variance; using a constant-mean model")
        return GpModel(Xs, np.zeros(len(ys)), y_mean, 1.0, 1.0, 1.0, 1.0, subset, constant=True)
    yz = (ys - y_mean) / y_std

    d2 = cdist(Xs, Xs, "sqeuclidean")
    spread = pdist(Xs)
    ell0 = float(np.median(spread[spread > 0])) if np.any(spread > 0) else 1.0
    theta = np.log([ell0, 1.0, noise_var if noise_var is not None else 1e-2])
    fit_noise = noise_var is None
    lml, grad = _lml_and_grad(theta, Xs, yz, d2, fit_noise)
    trace = [lml]
    eta = learning_rate
    for _ in range(steps):
        accepted = False
        for _ in range(20):
            proposal = theta + eta * grad
            proposal[2] = max(proposal[2], math.log(1e-8)) if fit_noise else theta[2]
            new_lml, new_grad = _lml_and_grad(proposal, Xs, yz, d2, fit_noise)
            if new_lml >= lml:
                theta, lml, grad = proposal, new_lml, new_grad
                eta *= 1.2
                accepted = True
                break
            eta *= 0.5
        trace.append(lml)
        if not accepted:
            break

    ell, sf2, sn2 = np.exp(theta)
    L = _cholesky(_kernel(Xs, Xs, ell, sf2) + sn2 * np.eye(len(Xs)))
    alpha = cho_solve((L, True), yz)
    return GpModel(Xs, yz, y_mean, y_std, float(ell), float(sf2), float(sn2), subset, L, alpha, False, trace)


def predict_gp(model: GpModel, X_star: np.ndarray, destandardize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive mean and latent-function variance at ``X_star``."""
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    if model.constant:
        mean = np.zeros(len(X_star))
        var = np.zeros(len(X_star))
    else:
        k_star = _kernel(X_star, model.X, model.lengthscale, model.signal_var)
        mean = k_star @ model.alpha
        v = cho_solve((model.L, True), k_star.T)
        var = np.maximum(0.0, model.signal_var - np.sum(k_star * v.T, axis=1))
    if destandardize:
        return mean * model.y_std + model.y_mean, var * model.y_std ** 2
    return mean, var


def expected_improvement(mu, sigma, best):
    """EI for maximization; reduces to max(0, mu - best) where sigma is 0."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ConfigError("sigma must be nonnegative")
    gap = mu - best
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sigma > 0, gap / np.where(sigma > 0, sigma, 1.0), 0.0)
    ei = np.where(sigma > 0, gap * norm.cdf(u) + sigma * norm.pdf(u), np.maximum(0.0, gap))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# =========================
# Bayesian optimization
# =========================

@dataclass(frozen=True)
class BoConfig:
    batch_size: int = 50
    iterations: int = 10
    n_seed: int = 100
    prior_samples: int = 500
    perturb_samples: int = 500
    perturb_sigma: float = 0.2
    top_k: int = 10
    gp_steps: int = 200
    gp_max_points: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.iterations < 0 or self.n_seed < 2:
            raise ConfigError("batch_size >= 1, iterations >= 0 and n_seed >= 2 required")


@dataclass
class Evaluation:
    iteration: int
    candidate_id: int
    valid: bool
    fom: Optional[float]
    best_so_far: Optional[float]
    circuit: Optional[DeviceDag] = None
    sim: Optional[SimResult] = None


@dataclass
class SearchResult:
    method: str
    trajectory: List[Evaluation]
    best: Optional[Evaluation]
    dataset_best: float

    @property
    def best_fom(self) -> Optional[float]:
        return self.best.fom if self.best else None

    @property
    def regret(self) -> Optional[float]:
        return None if self.best is None else self.dataset_best - self.best.fom

    def iteration_best(self) -> List[Tuple[int, float]]:
        out: Dict[int, float] = {}
        for ev in self.trajectory:
            if ev.best_so_far is not None:
                out[ev.iteration] = ev.best_so_far
        return sorted(out.items())


def simulatable(g: DeviceDag) -> bool:
    """Valid circuit that also admits a stage assignment and stamps cleanly."""
    if not validate_circuit(g).is_valid_circuit:
        return False
    try:
        build_mna(to_stage_graph(g))
    except CktError:
        return False
    return True


def _decode_batch(model: CircuitVAE, Z: np.ndarray) -> List[Optional[DeviceDag]]:
    circuits: List[Optional[DeviceDag]] = []
    for z in Z:
        try:
            dag = decoded_circuit(decode(z, model, "greedy").transformed, model.basis)
        except CktError:
            dag = None
        circuits.append(dag if dag is not None and simulatable(dag) else None)
    return circuits


def _evaluate(model: CircuitVAE, Z: np.ndarray, sim: CircuitSimulator, workers: int,
              iteration: int, first_id: int, best: Optional[float]) -> List[Evaluation]:
    circuits = _decode_batch(model, Z)
    valid = [c for c in circuits if c is not None]
    results = iter(simulate_many(valid, sim, workers))
    evaluations = []
    for k, dag in enumerate(circuits):
        result = next(results) if dag is not None else None
        fom = result.fom if result is not None and result.converged else None
        if fom is not None and (best is None or fom > best):
            best = fom
        evaluations.append(Evaluation(iteration, first_id + k, dag is not None, fom, best, dag, result))
    return evaluations


def _seed_design(model: CircuitVAE, records: Sequence, cfg: BoConfig) -> Tuple[np.ndarray, np.ndarray, List[Evaluation]]:
    rng = make_rng(cfg.seed, STREAM_SEARCH, 0)
    n_seed = min(cfg.n_seed, len(records))
    picks = np.sort(rng.choice(len(records), size=n_seed, replace=False))
    X, y, evals = [], [], []
    best = None
    for k in picks:
        record = records[int(k)]
        X.append(model.latent_mean(record.circuit, record.transformed))
        y.append(record.sim.fom)
        best = record.sim.fom if best is None else max(best, record.sim.fom)
        evals.append(Evaluation(0, record.id, True, record.sim.fom, best, record.circuit, record.sim))
    return np.array(X), np.array(y), evals


def _finish(method: str, trajectory: List[Evaluation], records: Sequence) -> SearchResult:
    scored = [ev for ev in trajectory if ev.fom is not None]
    best = max(scored, key=lambda ev: ev.fom) if scored else None
    dataset_best = max(r.sim.fom for r in records)
    result = SearchResult(method, trajectory, best, dataset_best)
    logger.info("%s: best FoM %.4f, regret %.4f", method, result.best_fom or float("nan"),
                result.regret if result.regret is not None else float("nan"))
    return result


def bo_loop(model: CircuitVAE, records: Sequence, sim: CircuitSimulator, cfg: BoConfig,
            workers: int = 1) -> SearchResult:
    """
    Batch BO in latent space seeded with encoded dataset records. Invalid
    or non-converged decodes stay in the trajectory without a FoM and are
    kept out of the GP.
    """
    X, y, trajectory = _seed_design(model, records, cfg)
    best = float(np.max(y))
    next_id = max(r.id for r in records) + 1
    for it in range(1, cfg.iterations + 1):
        with timed(f"bo iteration {it}", slow_ms=float("inf")):
            rng = make_rng(cfg.seed, STREAM_SEARCH, it)
            gp = fit_gp(X, y, steps=cfg.gp_steps, max_points=cfg.gp_max_points)
            prior = rng.standard_normal((cfg.prior_samples, X.shape[1]))
            top = X[np.argsort(-y, kind="stable")[:cfg.top_k]]
            centers = top[np.arange(cfg.perturb_samples) % len(top)]
            perturbed = centers + cfg.perturb_sigma * rng.standard_normal(centers.shape)
            pool = np.vstack([prior, perturbed])
            mean, var = predict_gp(gp, pool, destandardize=False)
            best_z = float(np.max((y - gp.y_mean) / gp.y_std))
            ei = expected_improvement(mean, np.sqrt(var), best_z)
            chosen = pool[np.argsort(-ei, kind="stable")[:cfg.batch_size]]
            batch = _evaluate(model, chosen, sim, workers, it, next_id, best)
        next_id += len(batch)
        trajectory.extend(batch)
        for z, ev in zip(chosen, batch):
            if ev.fom is not None:
                X = np.vstack([X, z])
                y = np.append(y, ev.fom)
        best = float(np.max(y))
        logger.info("bo iteration %d: %d/%d valid, best FoM %.4f",
                    it, sum(ev.valid for ev in batch), len(batch), best)
    return _finish("bo", trajectory, records)


def random_search(model: CircuitVAE, records: Sequence, sim: CircuitSimulator, cfg: BoConfig,
                  workers: int = 1) -> SearchResult:
    """Same seeds and budget as ``bo_loop`` with prior samples instead of EI."""
    X, y, trajectory = _seed_design(model, records, cfg)
    best = float(np.max(y))
    next_id = max(r.id for r in records) + 1
    for it in range(1, cfg.iterations + 1):
        rng = make_rng(cfg.seed, STREAM_SEARCH, 1000 + it)
        Z = rng.standard_normal((cfg.batch_size, X.shape[1]))
        batch = _evaluate(model, Z, sim, workers, it, next_id, best)
        next_id += len(batch)
        trajectory.extend(batch)
        scored = [ev.fom for ev in batch if ev.fom is not None]
        if scored:
            best = max(best, max(scored))
        logger.info("random iteration %d: %d/%d valid, best FoM %.4f",
                    it, sum(ev.valid for ev in batch), len(batch), best)
    return _finish("random", trajectory, records)


def write_trajectory_csv(path: Path, result: SearchResult, header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "candidate_id", "valid", "fom", "best_so_far"])
        for ev in result.trajectory:
            writer.writerow([
                ev.iteration, ev.candidate_id, int(ev.valid),
                "" if ev.fom is None else repr(ev.fom),
                "" if ev.best_so_far is None else repr(ev.best_so_far),
            ])


# =========================
# Evaluation suite
# =========================

@dataclass(frozen=True)
class EvalConfig:
    latent_points: int = 1000
    decodes_per_point: int = 10
    gp_steps: int = 200
    gp_max_points: int = 500
    seed: int = 0


@dataclass
class EvalMetrics:
    latent_points: int
    decodes_per_point: int
    valid_dag_pct: float
    valid_circuit_pct: float
    novel_pct: float
    forced_stops: int
    reconstruction: Optional[float]
    gp: Dict[str, Dict[str, float]]
    property_head: Optional[Dict[str, float]]


PROPERTIES = ("gain", "bw", "pm", "fom")


def property_targets(records: Sequence) -> Dict[str, np.ndarray]:
    """Regression targets; bandwidth is regressed in log10."""
    return {
        "gain": np.array([r.sim.gain_db for r in records]),
        "bw": np.log10([r.sim.bw_hz for r in records]),
        "pm": np.array([r.sim.pm_deg for r in records]),
        "fom": np.array([r.sim.fom for r in records]),
    }


def regression_scores(pred: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    if len(truth) < 2 or np.std(pred) == 0 or np.std(truth) == 0:
        r = 0.0
    else:
        r = float(pearsonr(pred, truth)[0])
    return {"rmse": rmse, "pearson": max(-1.0, min(1.0, r))}


def generation_stats(model: CircuitVAE, train_hashes: set, cfg: EvalConfig) -> Tuple[float, float, float, int]:
    """Valid-DAG, valid-circuit and novel percentages over sampled decodes."""
    Z = make_rng(cfg.seed, STREAM_EVAL).standard_normal((cfg.latent_points, model.cfg.latent_dim))
    total = valid_dag = valid_circuit = novel = forced = 0
    for k, z in enumerate(Z):
        rng = make_rng(cfg.seed, STREAM_EVAL, k)
        for _ in range(cfg.decodes_per_point):
            result = decode(z, model, "sample", rng)
            total += 1
            forced += result.forced_stop
            try:
                dag = decoded_circuit(result.transformed, model.basis)
            except CktError:
                continue
            report = validate_circuit(dag)
            valid_dag += report.is_valid_dag
            if report.is_valid_circuit:
                valid_circuit += 1
                novel += canonicalize(dag)[1] not in train_hashes
    pct = (lambda a, b: 100.0 * a / b if b else 0.0)
    return pct(valid_dag, total), pct(valid_circuit, total), pct(novel, valid_circuit), forced


def eval_suite(model: CircuitVAE, train_records: Sequence, test_records: Sequence,
               cfg: Optional[EvalConfig] = None) -> EvalMetrics:
    cfg = cfg or EvalConfig()
    with timed("eval suite", slow_ms=float("inf")):
        train_hashes = {r.hash for r in train_records}
        valid_dag, valid_circuit, novel, forced = generation_stats(model, train_hashes, cfg)

        gp_scores: Dict[str, Dict[str, float]] = {}
        head_scores = None
        recon = None
        if len(train_records) >= 2 and test_records:
            X_train = np.array([model.latent_mean(r.circuit, r.transformed) for r in train_records])
            X_test = np.array([model.latent_mean(r.circuit, r.transformed) for r in test_records])
            y_train, y_test = property_targets(train_records), property_targets(test_records)
            for prop in PROPERTIES:
                gp = fit_gp(X_train, y_train[prop], steps=cfg.gp_steps, max_points=cfg.gp_max_points)
                gp_scores[prop] = regression_scores(predict_gp(gp, X_test)[0], y_test[prop])
            head = fit_property_head(X_train, y_train["fom"])
            head_scores = regression_scores(head.predict(X_test), y_test["fom"])
            recon = reconstruction_accuracy(model, test_records)

    return EvalMetrics(
        latent_points=cfg.latent_points,
        decodes_per_point=cfg.decodes_per_point,
        valid_dag_pct=valid_dag,
        valid_circuit_pct=valid_circuit,
        novel_pct=novel,
        forced_stops=forced,
        reconstruction=recon,
        gp=gp_scores,
        property_head=head_scores,
    )
