"""
Command-line interface for cktgrid.
Thin orchestration over the pipeline modules; summaries go to stdout,
machine output goes to files.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from src import plots
from src.acsim import CircuitSimulator, FomWeights, SweepConfig, bode, build_mna, write_bode_csv
from src.basis import build_default_basis, graphlize
from src.circuit import DeviceDag, canonicalize, format_hash, from_stage_graph, to_stage_graph
from src.config import TOOL_NAME, TOOL_VERSION, config
from src.dataset import SamplerConfig, generate_dataset, load_dataset, split_dataset
from src.errors import CktError, ConfigError, DatasetFormatError
from src.models import DeviceDagModel, MetricsReport, PropertyMetrics, RunConfig, SimResultModel, TransformedDagModel
from src.netlist import export_netlist, parse_netlist
from src.search import BoConfig, EvalConfig, bo_loop, eval_suite, random_search, write_trajectory_csv
from src.timing import timed
from src.vae import CircuitVAE, TrainConfig, VaeConfig, load_model, new_train_state, save_model, train, write_curves_csv

logger = logging.getLogger("ckt.cli")

NETLIST_SUFFIXES = (".cir", ".sp", ".spice", ".net")
BENCH_FIELDS = ("encoder", "phase", "n", "seconds", "per_item_ms")


# =========================
# Helpers
# =========================

def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path(config.OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick(value, default):
    return default if value is None else value


def _simulator(args) -> CircuitSimulator:
    """Sweep and FoM settings: flag, else CKT_* environment, else default."""
    sweep = SweepConfig(
        f_start=_pick(args.f_start, config.SWEEP_F_START),
        f_stop=_pick(args.f_stop, config.SWEEP_F_STOP),
        points_per_decade=_pick(args.ppd, config.SWEEP_PPD),
        rtol=_pick(args.rtol, config.BISECT_RTOL),
    )
    weights = FomWeights(
        w_gain=_pick(args.w_gain, config.FOM_W_GAIN),
        w_bw=_pick(args.w_bw, config.FOM_W_BW),
        w_pm=_pick(args.w_pm, config.FOM_W_PM),
        pm_target_deg=_pick(args.pm_target, config.FOM_PM_TARGET),
    )
    return CircuitSimulator(sweep, weights)


def _run_config(args, sim: Optional[CircuitSimulator] = None, **options) -> RunConfig:
    sim = sim or _simulator(args)
    return RunConfig(
        command=args.command,
        tool_version=TOOL_VERSION,
        seed=args.seed,
        workers=args.workers,
        output_dir=str(args.out_dir) if args.out_dir else None,
        dataset=getattr(args, "dataset", None),
        checkpoint=getattr(args, "checkpoint", None),
        sweep=sim.sweep.to_dict(),
        fom=sim.weights.to_dict(),
        options=options,
    )


def _meta_lines(run: RunConfig) -> List[str]:
    return [f"{TOOL_NAME} {TOOL_VERSION}", "config " + json.dumps(run.model_dump(), sort_keys=True)]


def _write_json(path: Path, payload: Dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_circuit(path: Path) -> DeviceDag:
    """Load a circuit from circuit JSON, a dataset record line, or a SPICE netlist."""
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in NETLIST_SUFFIXES:
        return from_stage_graph(parse_netlist(text))
    try:
        raw = json.loads(text)
        if isinstance(raw, dict) and "circuit" in raw:
            raw = raw["circuit"]
        return DeviceDagModel.model_validate(raw).to_dag()
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: not JSON ({exc})") from exc
    except ValidationError as exc:
        raise DatasetFormatError(f"{path}: {exc.errors()[0]['msg']}") from exc


def _load_records(args):
    header, records = load_dataset(_require_file(args.dataset, "dataset"))
    if not records:
        raise DatasetFormatError(f"{args.dataset}: no records")
    return header, records


def _vae_config(args) -> VaeConfig:
    return VaeConfig(encoder=args.encoder, latent_dim=args.latent_dim, max_nodes=args.max_nodes)


def _load_trained(args):
    state, cfg, meta = load_model(_require_file(args.checkpoint, "checkpoint"))
    return state.model, meta


# =========================
# Commands
# =========================

def cmd_gen_dataset(args) -> int:
    """Handle 'gen-dataset' command - sample, simulate and store circuits."""
    sim = _simulator(args)
    stage_counts = tuple(int(s) for s in args.stages.split(","))
    sampler = SamplerConfig(stage_counts=stage_counts, stage_weights=(1.0,) * len(stage_counts), seed=args.seed)
    run = _run_config(args, sim, n=args.n, out=args.out, stages=list(stage_counts))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    summary = generate_dataset(args.n, sampler, out, sim, args.workers, created_by=run.model_dump())

    print(f"\n[OK] Dataset written: {out}")
    print("=" * 50)
    print(f"  Stored:        {summary.stored}")
    print(f"  Attempted:     {summary.attempted}")
    print(f"  Non-converged: {summary.non_converged}")
    print(f"  Duplicates:    {summary.duplicates}")
    print(f"  Failures:      {summary.failures}")
    print(f"  Converged:     {summary.convergence_rate * 100:.1f}%")
    if summary.fom_quantiles:
        q = summary.fom_quantiles
        print(f"  FoM min/med/max: {q['q00']:.3f} / {q['q50']:.3f} / {q['q100']:.3f}")
    return 0


def cmd_simulate(args) -> int:
    """Handle 'simulate' command - AC analysis with Bode CSV and SVG."""
    g = read_circuit(_require_file(args.input, "in"))
    sim = _simulator(args)
    run = _run_config(args, sim, input=args.input)
    out = _out_dir(args)

    stage = to_stage_graph(g)
    result = sim.simulate_stage_graph(stage)
    table = bode(build_mna(stage), sim.sweep)
    meta = _meta_lines(run)
    write_bode_csv(table, out / "bode.csv", meta)
    plots.plot_bode(table, out / "bode.svg", title=Path(args.input).stem, description="\n".join(meta))
    _write_json(out / "sim.json", {
        "meta": run.model_dump(),
        "hash": format_hash(canonicalize(g)[1]),
        "sim": SimResultModel.from_result(result).model_dump(),
    })

    print(f"\nSimulation: {args.input}")
    print("=" * 50)
    if not result.converged:
        print("  Status: not converged (no crossing inside the sweep)")
    for label, value, unit in (
        ("Gain", result.gain_db, "dB"),
        ("Bandwidth", result.bw_hz, "Hz"),
        ("UGF", result.ugf_hz, "Hz"),
        ("Phase margin", result.pm_deg, "deg"),
        ("FoM", result.fom, ""),
    ):
        shown = "n/a" if value is None else f"{value:.6g} {unit}".rstrip()
        print(f"  {label + ':':14s}{shown}")
    print(f"\n[OK] Wrote {out / 'bode.csv'}, {out / 'bode.svg'}, {out / 'sim.json'}")
    return 0


def cmd_graphlize(args) -> int:
    """Handle 'graphlize' command - print the subgraph decomposition."""
    g = read_circuit(_require_file(args.input, "in"))
    basis = build_default_basis(args.rc_order)
    t = graphlize(g, basis)

    print(f"\nTransformed DAG ({len(t.nodes) - 2} subgraphs, stage_count {t.stage_count}, order {args.rc_order})")
    print("=" * 60)
    for node in t.nodes:
        preds = t.preds(node.id)
        src = f"  <- {', '.join(str(p) for p in preds)}" if preds else ""
        if node.entry_id is None:
            print(f"[{node.id}] {node.role.value}{src}")
            continue
        entry = basis.entry(node.entry_id)
        params = ", ".join(f"{v:.4g}" for v in node.params)
        print(f"[{node.id}] #{entry.entry_id:<2d} {entry.name:14s} o={basis.o(entry.entry_id):<2d} ({params}){src}")

    if args.out:
        run = _run_config(args, input=args.input, rc_order=args.rc_order)
        _write_json(Path(args.out), {
            "meta": run.model_dump(),
            "transformed": TransformedDagModel.from_transformed(t).model_dump(),
        })
        print(f"\n[OK] Wrote {args.out}")
    return 0


def cmd_netlist(args) -> int:
    """Handle 'netlist' command - circuit JSON to SPICE, or SPICE back to JSON."""
    path = _require_file(args.input, "in")
    if path.suffix.lower() in NETLIST_SUFFIXES:
        g = from_stage_graph(parse_netlist(path.read_text(encoding="utf-8")))
        text = DeviceDagModel.from_dag(g).model_dump_json(indent=2) + "\n"
    else:
        g = read_circuit(path)
        sim = _simulator(args)
        text = export_netlist(to_stage_graph(g), sim.sweep, title=f"{TOOL_NAME} {TOOL_VERSION} {path.stem}")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"[OK] Wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    """Handle 'train' command - fit the VAE on the training split."""
    _, records = _load_records(args)
    train_records, _ = split_dataset(records, args.test_fraction, args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    checkpoint = Path(args.checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    run = _run_config(args, encoder=args.encoder, epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, latent_dim=args.latent_dim, test_fraction=args.test_fraction)

    state = None
    if args.resume and checkpoint.is_file():
        state, saved_cfg, _ = load_model(checkpoint)
        if saved_cfg.seed != cfg.seed or saved_cfg.batch_size != cfg.batch_size:
            raise ConfigError("resume needs the same seed and batch size as the checkpoint")
        print(f"Resuming from epoch {state.epoch}")
    state = train(train_records, cfg, _vae_config(args), state, checkpoint)
    save_model(checkpoint, state, cfg, extra={"run": run.model_dump()})

    out = _out_dir(args)
    meta = _meta_lines(run)
    write_curves_csv(out / "curves.csv", state.curves, meta)
    plots.plot_loss_curves(state.curves, out / "loss.svg", description="\n".join(meta))

    last = state.curves[-1] if state.curves else None
    print(f"\n[OK] Trained {args.encoder} for {state.epoch} epochs on {len(train_records)} circuits")
    if last:
        print(f"     Final loss: {last['total']:.4f} (lr {last['lr']:.1e})")
    print(f"     Checkpoint: {checkpoint}")
    return 0


def cmd_eval(args) -> int:
    """Handle 'eval' command - generation and property-prediction metrics."""
    _, records = _load_records(args)
    model, meta = _load_trained(args)
    train_records, test_records = split_dataset(records, args.test_fraction, args.seed)
    cfg = EvalConfig(latent_points=args.latent_points, decodes_per_point=args.decodes, seed=args.seed)
    run = _run_config(args, encoder=model.cfg.encoder, latent_points=args.latent_points,
                      decodes=args.decodes, test_fraction=args.test_fraction)

    metrics = eval_suite(model, train_records, test_records, cfg)
    report = MetricsReport(
        meta=run,
        encoder=model.cfg.encoder,
        latent_points=metrics.latent_points,
        decodes_per_point=metrics.decodes_per_point,
        valid_dag_pct=metrics.valid_dag_pct,
        valid_circuit_pct=metrics.valid_circuit_pct,
        novel_pct=metrics.novel_pct,
        forced_stops=metrics.forced_stops,
        reconstruction=metrics.reconstruction,
        gp={k: PropertyMetrics(**v) for k, v in metrics.gp.items()},
        property_head=PropertyMetrics(**metrics.property_head) if metrics.property_head else None,
    )
    out = _out_dir(args)
    _write_json(out / "metrics.json", report.model_dump())

    print(f"\nEvaluation ({report.encoder}, epoch {meta.get('epoch', '?')})")
    print("=" * 50)
    print(f"  Valid DAGs:     {report.valid_dag_pct:6.2f}%")
    print(f"  Valid circuits: {report.valid_circuit_pct:6.2f}%")
    print(f"  Novel circuits: {report.novel_pct:6.2f}%")
    if report.reconstruction is not None:
        print(f"  Reconstruction: {report.reconstruction * 100:6.2f}%")
    if report.gp:
        print("\n  Property   RMSE       Pearson r")
        for prop, m in report.gp.items():
            print(f"  {prop:9s}  {m.rmse:9.4f}  {m.pearson:8.4f}")
    if report.property_head:
        print(f"  head(fom)  {report.property_head.rmse:9.4f}  {report.property_head.pearson:8.4f}")
    print(f"\n[OK] Wrote {out / 'metrics.json'}")
    return 0


def cmd_optimize(args) -> int:
    """Handle 'optimize' command - batch BO in latent space."""
    _, records = _load_records(args)
    model, _ = _load_trained(args)
    sim = _simulator(args)
    cfg = BoConfig(batch_size=args.batch_size, iterations=args.iterations, n_seed=args.n_seed, seed=args.seed)
    run = _run_config(args, sim, encoder=model.cfg.encoder, iterations=args.iterations,
                      batch_size=args.batch_size, n_seed=args.n_seed, random_baseline=args.random_baseline)
    out = _out_dir(args)
    meta = _meta_lines(run)

    results = [bo_loop(model, records, sim, cfg, args.workers)]
    if args.random_baseline:
        results.append(random_search(model, records, sim, cfg, args.workers))
    for result in results:
        write_trajectory_csv(out / f"{result.method}_trajectory.csv", result, meta)
    plots.plot_best_so_far(
        {r.method: r.iteration_best() for r in results},
        out / "best_so_far.svg",
        dataset_best=results[0].dataset_best,
        description="\n".join(meta),
    )

    summary = {"meta": run.model_dump(), "results": {}}
    print(f"\nOptimization ({model.cfg.encoder}, {args.iterations} x {args.batch_size})")
    print("=" * 50)
    for result in results:
        entry = {"best_fom": result.best_fom, "dataset_best": result.dataset_best, "regret": result.regret}
        if result.best is not None and result.best.circuit is not None:
            entry["circuit"] = DeviceDagModel.from_dag(result.best.circuit).model_dump()
            entry["sim"] = SimResultModel.from_result(result.best.sim).model_dump() if result.best.sim else None
        summary["results"][result.method] = entry
        best_fom = "n/a" if result.best_fom is None else f"{result.best_fom:.4f}"
        regret = "n/a" if result.regret is None else f"{result.regret:.4f}"
        print(f"  {result.method:7s} best FoM {best_fom}  regret {regret}")
    _write_json(out / "best.json", summary)

    best = results[0].best
    if best is not None and best.circuit is not None:
        netlist = export_netlist(to_stage_graph(best.circuit), sim.sweep, title=f"{TOOL_NAME} best")
        (out / "best.cir").write_text(netlist, encoding="utf-8")
    print(f"\n[OK] Wrote trajectories, best.json and best_so_far.svg to {out}")
    return 0


def cmd_bench(args) -> int:
    """Handle 'bench' command - per-epoch and per-encode wall time per encoder."""
    _, records = _load_records(args)
    records = records[: args.n]
    out = _out_dir(args)
    run = _run_config(args, n=len(records), epochs=args.epochs)
    rows = []
    for kind in ("cktgnn", "baseline"):
        model = CircuitVAE(VaeConfig(encoder=kind, latent_dim=args.latent_dim), seed=args.seed)
        with timed(f"bench encode {kind}", slow_ms=float("inf")) as watch:
            for record in records:
                model.latent_mean(record.circuit, record.transformed)
        rows.append((kind, "encode", len(records), watch.duration_ms / 1000.0))

        cfg = TrainConfig(epochs=args.epochs, batch_size=min(64, len(records)), seed=args.seed)
        state = new_train_state(model, cfg)
        with timed(f"bench train {kind}", slow_ms=float("inf")) as watch:
            train(records, cfg, state=state)
        rows.append((kind, "epoch", args.epochs, watch.duration_ms / 1000.0))

    path = out / "bench.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in _meta_lines(run):
            fh.write(f"# {line}\n")
        fh.write(",".join(BENCH_FIELDS) + "\n")
        for kind, phase, n, seconds in rows:
            per_item = 1000.0 * seconds / n if n else 0.0
            fh.write(f"{kind},{phase},{n},{seconds:.6f},{per_item:.4f}\n")

    print(f"\nBenchmark ({len(records)} circuits)")
    print("=" * 50)
    for kind, phase, n, seconds in rows:
        print(f"  {kind:9s} {phase:7s} {seconds:9.3f}s  ({1000.0 * seconds / max(n, 1):.2f} ms/item)")
    print(f"\n[OK] Wrote {path}")
    return 0


# =========================
# Parser
# =========================

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=config.SEED, help="Master seed (default: CKT_SEED or 0)")
    common.add_argument("--workers", type=int, default=config.WORKERS, help="Worker processes for simulation")
    common.add_argument("--out-dir", default=None, help="Output directory (default: CKT_OUTPUT_DIR)")
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    sweep = common.add_argument_group("AC sweep")
    sweep.add_argument("--f-start", type=float, default=None, help="Sweep start in Hz")
    sweep.add_argument("--f-stop", type=float, default=None, help="Sweep stop in Hz")
    sweep.add_argument("--ppd", type=int, default=None, help="Points per decade")
    sweep.add_argument("--rtol", type=float, default=None, help="Crossing refinement tolerance")

    fom = common.add_argument_group("figure of merit")
    fom.add_argument("--w-gain", type=float, default=None)
    fom.add_argument("--w-bw", type=float, default=None)
    fom.add_argument("--w-pm", type=float, default=None)
    fom.add_argument("--pm-target", type=float, default=None, help="Target phase margin in degrees")
    return common


def _add_model_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder", choices=["cktgnn", "baseline"], default="cktgnn", help="Encoder architecture")
    p.add_argument("--latent-dim", type=int, default=56)
    p.add_argument("--max-nodes", type=int, default=12, help="Decoder node cap including Input and Output")


def create_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser."""
    parser = argparse.ArgumentParser(
        prog=TOOL_NAME,
        description="cktgrid - op-amp circuit generation, simulation and latent-space search",
        epilog="All randomness derives from --seed.",
    )
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    common = _common_parser()
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    p = subparsers.add_parser("gen-dataset", parents=[common], help="Generate a labelled circuit dataset")
    p.add_argument("--n", type=int, required=True, help="Number of circuits")
    p.add_argument("--out", required=True, help="Output JSONL path")
    p.add_argument("--stages", default="2,3", help="Comma-separated stage counts (default: 2,3)")
    p.set_defaults(func=cmd_gen_dataset)

    p = subparsers.add_parser("simulate", parents=[common], help="Simulate one circuit")
    p.add_argument("--in", dest="input", required=True, help="Circuit JSON or SPICE netlist")
    p.set_defaults(func=cmd_simulate)

    p = subparsers.add_parser("graphlize", parents=[common], help="Decompose a circuit into basis subgraphs")
    p.add_argument("--in", dest="input", required=True, help="Circuit JSON or SPICE netlist")
    p.add_argument("--rc-order", choices=["r>c", "c>r"], default="r>c", help="Relative order of R and C")
    p.add_argument("--out", default=None, help="Optional JSON output path")
    p.set_defaults(func=cmd_graphlize)

    p = subparsers.add_parser("netlist", parents=[common], help="Convert between circuit JSON and SPICE")
    p.add_argument("--in", dest="input", required=True, help="Circuit JSON, or a netlist to convert back")
    p.add_argument("--out", default=None, help="Output path (default: stdout)")
    p.set_defaults(func=cmd_netlist)

    p = subparsers.add_parser("train", parents=[common], help="Train the circuit VAE")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="Checkpoint path, written after every epoch")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--resume", action="store_true", help="Continue from an existing checkpoint")
    _add_model_options(p)
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("eval", parents=[common], help="Generation and prediction metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latent-points", type=int, default=1000)
    p.add_argument("--decodes", type=int, default=10, help="Sampled decodes per latent point")
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = subparsers.add_parser("optimize", parents=[common], help="Bayesian optimization in latent space")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--n-seed", type=int, default=100, help="Labelled circuits in the initial design")
    p.add_argument("--random-baseline", action="store_true", help="Also run budget-matched random search")
    p.set_defaults(func=cmd_optimize)

    p = subparsers.add_parser("bench", parents=[common], help="Time training and encoding per encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", type=int, default=200, help="Circuits to time")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--latent-dim", type=int, default=56)
    p.set_defaults(func=cmd_bench)

    return parser


def _configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or config.LOG_LEVEL).upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main CLI entry point.

    Args:
        argv: Command-line arguments (defaults to sys.argv[1:])

    Returns:
        Exit code: 0 on success, 2 for usage and domain errors, 1 for internal errors
    """
    parser = create_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 2

    _configure_logging(args.log_level)
    ok, message = config.validate()
    if not ok:
        print(f"[ERROR] config: {message}", file=sys.stderr)
        return 2
    if args.workers < 1:
        print("[ERROR] config: --workers must be >= 1", file=sys.stderr)
        return 2

    try:
        return args.func(args)
    except CktError as e:
        print(f"[ERROR] {e.one_line()}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("internal error", exc_info=True)
        text = " ".join(str(e).split()) or type(e).__name__
        print(f"[ERROR] internal: {text}", file=sys.stderr)
        return 1
