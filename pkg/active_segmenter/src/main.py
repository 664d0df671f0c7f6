#!/usr/bin/env python3
"""
Active Segmenter - pool-based active learning for 2D medical segmentation.

Runs active learning experiments (random, top-k uncertainty, stochastic
batches, core-set) from YAML experiment files, then aggregates and plots
the stored results.

Usage:
    python -m active_segmenter run --config active_segmenter/configs/desk_scale.yaml
    python -m active_segmenter report --results results/desk_scale
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .al_loop import aggregate_directory
from .config import ConfigError, ExperimentConfig, SelectionConfig, load_config, load_experiment_file
from .data_pipeline import generate_synthetic_volumes, load_dataset, write_volumes
from .reporting import plot_box, plot_learning_curves, plot_pool_size, write_report
from .results_store import ExperimentStore
from .runner import plan_experiments, run_plans_sync
from .selection import resolve_q, select_batch, selection_rng
from .uncertainty import ScoreTable

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[
        logging.StreamHandler(sys.stdout),
    ],
)
logger = logging.getLogger(__name__)


def _add_selection_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--budget", type=int, help="Samples annotated per cycle (B)")
    parser.add_argument("--q", type=str, help="Stochastic pool size Q, or 'auto' for partition mode")
    parser.add_argument("--pool-mode", choices=["partition", "resample"], help="How candidate batches are drawn")


def build_parser() -> argparse.ArgumentParser:
    """Command line parser with one sub-command per entry point."""
    parser = argparse.ArgumentParser(
        prog="active_segmenter",
        description="Pool-based active learning for 2D medical image segmentation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    # Run every strategy of an experiment file for seeds 0 and 1
    python -m active_segmenter run --config exp.yaml --seed 0 --seed 1

    # Validate a config and print the cycle plan
    python -m active_segmenter run --config exp.yaml --dry-run

    # Budget ablation with resampled batches
    python -m active_segmenter run --config exp.yaml --budget 15 --q 100

    # Tables and figures from stored results
    python -m active_segmenter report --results results/desk_scale
    python -m active_segmenter plot --results results/desk_scale --kind curves --metric 3D:dsc

    # Re-select offline from a stored score table
    python -m active_segmenter score --experiment results/desk_scale/entropy-sb_s0 --cycle 2 --strategy topk

    # Write a synthetic dataset in the on-disk layout
    python -m active_segmenter synth --out data/synthetic --seed 0
        """,
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run experiments from a config file")
    run.add_argument("--config", required=True, help="Experiment YAML file")
    run.add_argument("--seed", type=int, action="append", help="Seed to run (repeatable, replaces the config's seeds)")
    run.add_argument("--strategy", action="append", help="Only run strategies with this name (repeatable)")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="Dotted config override, e.g. train.epochs=10 (repeatable)")
    run.add_argument("--workers", type=int, help="Parallel experiment processes (overrides ACTIVE_SEG_WORKERS)")
    run.add_argument("--dry-run", action="store_true", help="Validate and print the cycle plan without training")
    _add_selection_flags(run)

    report = sub.add_parser("report", help="Write summary tables")
    report.add_argument("--results", required=True, help="Output directory holding experiments")
    report.add_argument("--out", help="Where to write tables (default: <results>/report)")
    report.add_argument("--n-perm", type=int, default=10_000, help="Permutations for p-values")

    plot = sub.add_parser("plot", help="Draw learning curves, box plots or pool-size plots")
    plot.add_argument("--results", required=True, help="Output directory holding experiments")
    plot.add_argument("--kind", choices=["curves", "box", "pool-size"], default="curves")
    plot.add_argument("--metric", default="3D:dsc", help="scope:metric, e.g. 3D:dsc, 2D:hd95, query:distinct_volumes")
    plot.add_argument("--x", choices=["labelled_size", "cycle"], default="labelled_size", help="Curve x axis")
    plot.add_argument("--include-initial", action="store_true", help="Plot cycle 0 too")
    plot.add_argument("--tag", help="Only plot runs with this tag")
    plot.add_argument("--out", help="SVG path (default: <results>/report/<kind>_<metric>.svg)")

    score = sub.add_parser("score", help="Re-select a batch offline from a stored score table")
    score.add_argument("--experiment", required=True, help="Experiment directory")
    score.add_argument("--cycle", type=int, required=True, help="Cycle whose score table to use (>= 1)")
    score.add_argument("--strategy", choices=["topk", "stochastic_batch"], help="Strategy (default: the experiment's)")
    score.add_argument("--seed", type=int, help="Selection seed (default: the experiment's)")
    _add_selection_flags(score)

    synth = sub.add_parser("synth", help="Generate a synthetic dataset on disk")
    synth.add_argument("--out", required=True, help="Dataset root to write")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-volumes", type=int, default=30)
    synth.add_argument("--slices", type=int, default=12, help="Slices per volume")
    synth.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    synth.add_argument("--classes", type=int, default=2, help="Class count including background")

    return parser


def _parse_q(text: Optional[str]):
    if text is None or text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise ConfigError("q", f"expected an integer or 'auto', got {text!r}")


def _override_selection(
    selection: SelectionConfig,
    budget: Optional[int],
    q_text: Optional[str],
    pool_mode: Optional[str],
) -> SelectionConfig:
    q = _parse_q(q_text)
    if q is not None and pool_mode is None:
        pool_mode = "partition" if q == "auto" else "resample"
    if pool_mode == "partition" and q is None:
        q = "auto"
    changes = {k: v for k, v in (("budget", budget), ("q", q), ("pool_mode", pool_mode)) if v is not None}
    if not changes:
        return selection
    try:
        return replace(selection, **changes)
    except ConfigError as e:
        raise ConfigError(f"selection.{e.field}", e.message) from None


def _print_plan(configs: Sequence[ExperimentConfig], seeds: Optional[Sequence[int]]) -> None:
    runtime = load_config()
    for cfg in configs:
        split = load_dataset(cfg.dataset, runtime.data_root)
        unlabelled = len(split.train) - cfg.n_init
        run_seeds = seeds or cfg.seeds
        print(f"{cfg.name} [{cfg.tag}] strategy={cfg.selection.strategy} scorer={cfg.scorer} "
              f"seeds={list(run_seeds)} -> {cfg.output_dir}")
        print(f"  train slices: {len(split.train)}, steps per cycle: {cfg.train.total_steps}")
        for cycle in range(cfg.cycles + 1):
            if cycle == 0:
                print(f"  cycle 0: train on {cfg.n_init} initial slices")
                continue
            if unlabelled < cfg.selection.budget:
                print(f"  cycle {cycle}: pool exhausted, run stops")
                break
            q = resolve_q(cfg.selection, unlabelled) if cfg.selection.strategy == "stochastic_batch" else "-"
            print(f"  cycle {cycle}: select {cfg.selection.budget} of {unlabelled} (Q={q}), "
                  f"train on {cfg.n_init + cycle * cfg.selection.budget}")
            unlabelled -= cfg.selection.budget


def cmd_run(args: argparse.Namespace) -> int:
    """Run every (strategy, seed) of a config file; 0 iff all complete."""
    configs = load_experiment_file(args.config, args.overrides)
    if args.strategy:
        wanted = set(args.strategy)
        unknown = wanted - {c.name for c in configs}
        if unknown:
            raise ConfigError("strategy", f"no strategy named {sorted(unknown)} in {args.config}")
        configs = [c for c in configs if c.name in wanted]
    configs = [
        replace(c, selection=_override_selection(c.selection, args.budget, args.q, args.pool_mode))
        for c in configs
    ]

    if args.dry_run:
        _print_plan(configs, args.seed)
        return 0

    runtime = load_config()
    for cfg in configs:
        load_dataset(cfg.dataset, runtime.data_root)
    workers = args.workers or runtime.workers

    plans = plan_experiments(configs, args.seed)
    logger.info(f"Running {len(plans)} experiments")
    outcomes = run_plans_sync(plans, workers, runtime)

    failed = [o for o in outcomes if not o.ok]
    for outcome in outcomes:
        detail = outcome.error or f"{outcome.cycles} cycles"
        logger.info(f"{outcome.experiment_id}: {outcome.status} ({detail})")
    return 1 if failed else 0


def cmd_report(args: argparse.Namespace) -> int:
    summary = aggregate_directory(args.results, n_perm=args.n_perm)
    out_dir = Path(args.out) if args.out else Path(args.results) / "report"
    for path in write_report(summary, out_dir):
        print(path)
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    scope, _, metric = args.metric.partition(":")
    if not metric:
        raise ValueError(f"--metric must look like scope:metric, got {args.metric!r}")
    summary = aggregate_directory(args.results, n_perm=1)
    out = Path(args.out) if args.out else Path(args.results) / "report" / f"{args.kind}_{scope}_{metric}.svg"

    if args.kind == "curves":
        path = plot_learning_curves(summary, out, scope, metric, x=args.x,
                                    include_initial=args.include_initial, tag=args.tag)
    elif args.kind == "box":
        path = plot_box(summary, out, scope, metric)
    else:
        path = plot_pool_size(summary, out, scope, metric)
    print(path)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    """Select from a persisted score table, as the AL loop would."""
    store = ExperimentStore(Path(args.experiment))
    manifest = store.read_manifest()
    cfg = ExperimentConfig.from_dict(manifest["config"])
    if args.cycle < 1:
        raise ValueError("Score tables exist for cycles >= 1")
    table_path = store.scores_path(args.cycle)
    if not table_path.exists():
        raise FileNotFoundError(f"No score table for cycle {args.cycle} at {table_path}")

    scores = ScoreTable.from_tsv(table_path)
    selection = cfg.selection
    if args.strategy:
        selection = replace(selection, strategy=args.strategy)
    selection = _override_selection(selection, args.budget, args.q, args.pool_mode)
    seed = args.seed if args.seed is not None else manifest["seed"]

    rng = selection_rng(selection, seed, args.cycle)
    batch = select_batch(selection, list(scores.scores), rng, scores)
    print(f"scorer={scores.scorer_name} cycle={scores.cycle} strategy={selection.strategy} "
          f"batch_score={batch.batch_score} q={batch.pool_size}")
    for sample_id in batch.sample_ids:
        print(sample_id)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    volumes = generate_synthetic_volumes(args.seed, args.n_volumes, args.slices, tuple(args.size), args.classes)
    root = write_volumes(args.out, volumes, args.classes)
    print(root)
    return 0


COMMANDS = {
    "run": cmd_run,
    "report": cmd_report,
    "plot": cmd_plot,
    "score": cmd_score,
    "synth": cmd_synth,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch, and map failures to exit codes (2 for config errors)."""
    args = build_parser().parse_args(argv)

    try:
        configured_level = load_config().log_level
    except ConfigError:
        configured_level = "INFO"
    level = logging.DEBUG if args.debug else getattr(logging, configured_level, logging.INFO)
    logging.getLogger().setLevel(level)

    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except Exception as e:
        if args.debug:
            logger.exception(f"{args.command} failed")
        else:
            logger.error(f"{args.command} failed: {e}")
        return 1


def main() -> None:
    """Main entry point."""
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
