"""
Active learning protocol.

Cycle 0 trains on the initial labelled set. Every later cycle scores the
unlabelled pool, selects a batch, annotates it, retrains from scratch and
evaluates on the test split. Each cycle is committed to the results store
before the next one starts, so an interrupted run resumes where it stopped.
"""

import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .config import ExperimentConfig, RuntimeConfig, load_config
from .data_pipeline import (
    DatasetSplit,
    PoolState,
    distinct_volumes,
    init_pool,
    labelled_samples,
    load_dataset,
    oracle_annotate,
)
from .evaluation import MetricRecord, evaluate_model, find_record, paired_permutation_test
from .image_utils import canonical_json, derive_seed, sha256_text
from .results_store import ExperimentStore, IntegrityError, iter_experiments
from .seg_model import TrainedModel
from .selection import select_batch, selection_rng
from .trainer import TrainHistory, train
from .uncertainty import score_pool

logger = logging.getLogger(__name__)

SUMMARY_METRICS = (("3D", "dsc"), ("2D", "dsc"), ("3D", "hd95"), ("2D", "hd95"))


class PoolExhaustedError(RuntimeError):
    """Too few unlabelled samples left for another batch."""


@dataclass
class CycleResult:
    """
    Outcome of one AL cycle.

    `queried` holds the initial labelled ids for cycle 0. Wall time is kept
    out of the persisted record; it lives in the timings log.

    `checkpoint_sha256` is `TrainedModel.digest()`: a SHA-256 over the weight
    and buffer values of the UNet and loss predictor. It is not a hash of the
    .pt file, whose bytes also depend on the torch serializer.
    """
    cycle: int
    queried: list[str]
    labelled_size: int
    metrics: list[MetricRecord]
    history_digest: str
    train_seed: int
    config_digest: str
    checkpoint_sha256: str
    distinct_volumes: int
    steps: int
    selection: Optional[dict] = None
    wall_time: float = 0.0

    def metric(self, scope: str, name: str) -> Optional[float]:
        return find_record(self.metrics, scope, name).mean

    def to_record(self) -> dict:
        return {
            "cycle": self.cycle,
            "queried": list(self.queried),
            "labelled_size": self.labelled_size,
            "metrics": [m.to_dict() for m in self.metrics],
            "history_digest": self.history_digest,
            "train_seed": self.train_seed,
            "config_digest": self.config_digest,
            "checkpoint_sha256": self.checkpoint_sha256,
            "distinct_volumes": self.distinct_volumes,
            "steps": self.steps,
            "selection": self.selection,
        }

    @classmethod
    def from_record(cls, record: dict) -> "CycleResult":
        return cls(
            cycle=record["cycle"],
            queried=list(record["queried"]),
            labelled_size=record["labelled_size"],
            metrics=[MetricRecord.from_dict(m) for m in record["metrics"]],
            history_digest=record["history_digest"],
            train_seed=record["train_seed"],
            config_digest=record["config_digest"],
            checkpoint_sha256=record["checkpoint_sha256"],
            distinct_volumes=record["distinct_volumes"],
            steps=record["steps"],
            selection=record.get("selection"),
        )


def _history_digest(history: TrainHistory) -> str:
    return sha256_text(canonical_json({
        "epoch_losses": history.epoch_losses,
        "lr_trace": history.lr_trace,
        "steps": history.steps,
    }))


def _images(split_by_id: dict, ids: Sequence[str]) -> np.ndarray:
    return np.stack([split_by_id[i].image for i in ids])


def _select(
    cfg: ExperimentConfig,
    seed: int,
    cycle: int,
    pool: PoolState,
    model: TrainedModel,
    train_by_id: dict,
    store: ExperimentStore,
):
    """Score the pool (when the strategy needs it) and pick the next batch."""
    budget = cfg.selection.budget
    if len(pool.unlabelled) < budget:
        raise PoolExhaustedError(f"{len(pool.unlabelled)} unlabelled samples left, budget is {budget}")

    scores = None
    labelled_feats = unlabelled_feats = None
    started = time.perf_counter()
    if cfg.uses_scores:
        unlabelled = [train_by_id[i] for i in pool.unlabelled]
        scores = score_pool(model, unlabelled, cfg.scorer, cfg.uncertainty, seed, cycle, model.digest())
        scores.to_tsv(store.scores_path(cycle))
    elif cfg.selection.strategy == "coreset":
        labelled_feats = model.latents(_images(train_by_id, pool.labelled), cfg.uncertainty.batch_size)
        unlabelled_feats = model.latents(_images(train_by_id, pool.unlabelled), cfg.uncertainty.batch_size)
    score_seconds = time.perf_counter() - started

    started = time.perf_counter()
    rng = selection_rng(cfg.selection, seed, cycle)
    batch = select_batch(cfg.selection, pool, rng, scores, labelled_feats, unlabelled_feats)
    select_seconds = time.perf_counter() - started
    return batch, score_seconds, select_seconds


def _run_cycles(
    cfg: ExperimentConfig,
    seed: int,
    store: ExperimentStore,
    results: list[CycleResult],
    split: Optional[DatasetSplit],
    runtime: RuntimeConfig,
) -> list[CycleResult]:
    split = split if split is not None else load_dataset(cfg.dataset, runtime.data_root)
    train_by_id = split.train_by_id()
    budget = cfg.selection.budget
    digest = cfg.digest()

    needed = cfg.n_init + cfg.cycles * budget
    if needed > len(split.train):
        logger.warning(
            f"{cfg.cycles} cycles of {budget} need {needed} training slices, only {len(split.train)} exist; "
            "the run will stop early"
        )

    pool = init_pool(split, cfg.n_init, derive_seed(seed, "init"))
    model: Optional[TrainedModel] = None
    if results:
        for result in results[1:]:
            pool = oracle_annotate(pool, result.queried, budget)
        if len(pool.labelled) != results[-1].labelled_size:
            raise IntegrityError(
                f"Replayed pool has {len(pool.labelled)} labelled ids, record says {results[-1].labelled_size}"
            )
        model, stored_digest = TrainedModel.load(store.checkpoint_path(results[-1].cycle, seed), runtime.device)
        if stored_digest != digest or model.digest() != results[-1].checkpoint_sha256:
            raise IntegrityError(f"Checkpoint of cycle {results[-1].cycle} does not match the cycle record")
        logger.info(f"Resuming {store.experiment_id} after cycle {results[-1].cycle}")

    status = "complete"
    for cycle in range(len(results), cfg.cycles + 1):
        cycle_started = time.perf_counter()
        timings = {"score_seconds": 0.0, "select_seconds": 0.0}
        logger.info(f"[{store.experiment_id}] cycle {cycle}/{cfg.cycles}: {len(pool.labelled)} labelled")

        selection = None
        if cycle == 0:
            queried = list(pool.labelled)
        else:
            try:
                batch, timings["score_seconds"], timings["select_seconds"] = _select(
                    cfg, seed, cycle, pool, model, train_by_id, store,
                )
            except PoolExhaustedError as e:
                logger.warning(f"[{store.experiment_id}] stopping at cycle {cycle}: {e}")
                status = "exhausted"
                break
            selection = batch.to_dict()
            store.append_selection(cycle, selection)
            pool = oracle_annotate(pool, batch.sample_ids, budget)
            queried = list(batch.sample_ids)

        train_seed = derive_seed(seed, cycle, "train")
        model, history = train(
            cfg.model,
            labelled_samples(split, pool),
            replace(cfg.train, seed=train_seed),
            with_loss_module=cfg.with_loss_module,
            loss_cfg=cfg.loss_predictor,
            device=runtime.device,
            num_threads=runtime.num_threads,
        )
        if history.steps != cfg.train.total_steps:
            raise RuntimeError(f"Training ran {history.steps} steps, expected {cfg.train.total_steps}")
        model.save(store.checkpoint_path(cycle, seed), digest)

        started = time.perf_counter()
        metrics = evaluate_model(model, split.test, split.class_count, cfg.uncertainty.batch_size)
        timings["eval_seconds"] = time.perf_counter() - started
        timings["train_seconds"] = history.wall_time
        timings["total_seconds"] = time.perf_counter() - cycle_started

        result = CycleResult(
            cycle=cycle,
            queried=queried,
            labelled_size=len(pool.labelled),
            metrics=metrics,
            history_digest=_history_digest(history),
            train_seed=train_seed,
            config_digest=digest,
            checkpoint_sha256=model.digest(),
            distinct_volumes=distinct_volumes(queried),
            steps=history.steps,
            selection=selection,
            wall_time=timings["total_seconds"],
        )
        store.append_history(cycle, history.to_dict())
        store.append_timing(cycle, timings)
        store.append_cycle(result.to_record())
        results.append(result)

        dice = result.metric("3D", "dsc")
        logger.info(
            f"[{store.experiment_id}] cycle {cycle} done: 3D DSC {dice:.2f}, "
            f"{result.distinct_volumes} volumes in batch, {timings['total_seconds']:.1f}s"
        )

    store.set_status(status)
    return results


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    split: Optional[DatasetSplit] = None,
    runtime: Optional[RuntimeConfig] = None,
) -> list[CycleResult]:
    """
    Run (or continue) one experiment for one seed.

    An existing experiment directory with the same config digest is resumed;
    one with a different digest is refused.

    Args:
        cfg: Experiment configuration
        seed: Master seed (initial set, per-cycle training, scoring and selection streams)
        split: Preloaded dataset (loaded from cfg.dataset when omitted)
        runtime: Process settings (from the environment when omitted)

    Returns:
        CycleResult list, cycle 0 first
    """
    runtime = runtime or load_config()
    store = ExperimentStore.for_experiment(cfg.output_dir, cfg.experiment_id(seed))
    if store.exists():
        return resume(store.path, split=split, runtime=runtime, expected_digest=cfg.digest())

    split = split if split is not None else load_dataset(cfg.dataset, runtime.data_root)
    store.create(cfg.to_dict(), cfg.digest(), seed)
    return _run_cycles(cfg, seed, store, [], split, runtime)


def resume(
    output_dir: Union[str, Path],
    split: Optional[DatasetSplit] = None,
    runtime: Optional[RuntimeConfig] = None,
    expected_digest: Optional[str] = None,
) -> list[CycleResult]:
    """
    Continue an experiment from its first missing cycle.

    Committed cycles are never recomputed; a finished experiment is returned as is.

    Raises:
        IntegrityError: corrupted records or a config digest mismatch
    """
    runtime = runtime or load_config()
    store = ExperimentStore(Path(output_dir))
    manifest = store.read_manifest()
    cfg = ExperimentConfig.from_dict(manifest["config"])

    if cfg.digest() != manifest["config_digest"]:
        raise IntegrityError(f"{store.manifest_path}: stored config does not match its digest")
    if expected_digest is not None and expected_digest != manifest["config_digest"]:
        raise IntegrityError(
            f"Experiment {store.experiment_id} was run with a different configuration; "
            "use another output_dir or name"
        )

    results = [CycleResult.from_record(r) for r in store.read_cycles()]
    for result in results:
        if result.config_digest != manifest["config_digest"]:
            raise IntegrityError(f"Cycle {result.cycle} was produced by a different configuration")

    if manifest["status"] != "running":
        logger.info(f"Experiment {store.experiment_id} is {manifest['status']}, nothing to do")
        return results

    store.prune_uncommitted(len(results))
    return _run_cycles(cfg, manifest["seed"], store, results, split, runtime)


# ---------------------------------------------------------------------------
# Aggregation across seeds and strategies
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """A stored experiment loaded for aggregation."""
    experiment_id: str
    strategy: str
    tag: str
    seed: int
    status: str
    config: dict
    cycles: list[CycleResult]
    timings: list[dict] = field(default_factory=list)


@dataclass
class AggregateSummary:
    """Aggregated tables; every frame is sorted for deterministic output."""
    metrics: pd.DataFrame
    per_cycle: pd.DataFrame
    overall: pd.DataFrame
    pvalues: pd.DataFrame
    timing: pd.DataFrame


def load_runs(output_dir: Union[str, Path]) -> list[RunRecord]:
    """Every experiment under an output directory with at least one committed cycle."""
    runs = []
    for store in iter_experiments(output_dir):
        manifest = store.read_manifest()
        cycles = [CycleResult.from_record(r) for r in store.read_cycles()]
        if not cycles:
            logger.warning(f"Skipping {store.experiment_id}: no completed cycles")
            continue
        config = manifest["config"]
        runs.append(RunRecord(
            experiment_id=store.experiment_id,
            strategy=config["name"],
            tag=config.get("tag", "default"),
            seed=manifest["seed"],
            status=manifest["status"],
            config=config,
            cycles=cycles,
            timings=[t for t in store.read_timings() if t.get("cycle", 0) < len(cycles)],
        ))
    return runs


def _metric_rows(run: RunRecord, n_cycles: int) -> list[dict]:
    selection = run.config.get("selection", {})
    base = {
        "experiment_id": run.experiment_id,
        "tag": run.tag,
        "strategy": run.strategy,
        "seed": run.seed,
        "n_init": run.config.get("n_init"),
        "budget": selection.get("budget"),
        "pool_mode": selection.get("pool_mode"),
        "q": str(selection.get("q")),
    }
    rows = []
    for result in run.cycles[:n_cycles]:
        common = {**base, "cycle": result.cycle, "labelled_size": result.labelled_size}
        for record in result.metrics:
            value = record.mean if record.mean is not None else np.nan
            rows.append({**common, "scope": record.scope, "metric": record.metric, "value": value})
        rows.append({**common, "scope": "query", "metric": "distinct_volumes", "value": float(result.distinct_volumes)})
    return rows


def _pvalues(frame: pd.DataFrame, n_perm: int) -> pd.DataFrame:
    columns = ["tag", "strategy_a", "strategy_b", "scope", "metric", "n_pairs", "p_value"]
    rows = []
    later = frame[frame["cycle"] >= 1]
    for tag, tag_frame in later.groupby("tag", sort=True):
        strategies = sorted(tag_frame["strategy"].unique())
        for a, b in itertools.combinations(strategies, 2):
            for (scope, metric), metric_frame in tag_frame.groupby(["scope", "metric"], sort=True):
                if scope == "query":
                    continue
                left = metric_frame[metric_frame["strategy"] == a].set_index(["seed", "cycle"])["value"].sort_index()
                right = metric_frame[metric_frame["strategy"] == b].set_index(["seed", "cycle"])["value"].sort_index()
                p_value = np.nan
                n_pairs = 0
                if left.index.equals(right.index):
                    valid = left.notna().to_numpy() & right.notna().to_numpy()
                    n_pairs = int(valid.sum())
                    if n_pairs >= 2:
                        rng = np.random.default_rng(derive_seed("pvalue", tag, a, b, scope, metric))
                        p_value = paired_permutation_test(
                            left.to_numpy()[valid], right.to_numpy()[valid], n_perm, rng,
                        )
                rows.append({
                    "tag": tag, "strategy_a": a, "strategy_b": b, "scope": scope, "metric": metric,
                    "n_pairs": n_pairs, "p_value": p_value,
                })
    return pd.DataFrame(rows, columns=columns)


def aggregate_runs(runs: Sequence[RunRecord], n_perm: int = 10_000) -> AggregateSummary:
    """
    Mean and std over seeds per (tag, strategy, cycle), and per (tag, strategy)
    over cycles >= 1, plus paired permutation p-values between strategies.

    Runs of one strategy with different cycle counts are cut to their common
    prefix. p-values only cover strategy pairs with identical (seed, cycle)
    coverage.
    """
    if not runs:
        raise ValueError("No completed runs to aggregate")

    prefix: dict[tuple[str, str], int] = {}
    for run in runs:
        key = (run.tag, run.strategy)
        prefix[key] = min(prefix.get(key, len(run.cycles)), len(run.cycles))
    for run in runs:
        common = prefix[(run.tag, run.strategy)]
        if len(run.cycles) != common:
            logger.warning(
                f"{run.experiment_id} has {len(run.cycles)} cycles; aggregating the common prefix of {common}"
            )

    rows = [row for run in runs for row in _metric_rows(run, prefix[(run.tag, run.strategy)])]
    metrics = pd.DataFrame(rows).sort_values(
        ["tag", "strategy", "scope", "metric", "seed", "cycle"], kind="mergesort",
    ).reset_index(drop=True)

    keys = ["tag", "strategy", "scope", "metric"]
    per_cycle = (
        metrics.groupby(keys + ["cycle"], sort=True)
        .agg(
            labelled_size=("labelled_size", "mean"),
            mean=("value", "mean"),
            std=("value", lambda v: float(np.std(v.dropna(), ddof=0)) if v.notna().any() else np.nan),
            n_runs=("value", "count"),
        )
        .reset_index()
    )

    run_means = (
        metrics[metrics["cycle"] >= 1]
        .groupby(keys + ["seed", "n_init", "budget", "pool_mode", "q"], sort=True, dropna=False)["value"]
        .mean()
        .reset_index()
    )
    overall = (
        run_means.groupby(keys, sort=True)
        .agg(
            mean=("value", "mean"),
            std=("value", lambda v: float(np.std(v.dropna(), ddof=0)) if v.notna().any() else np.nan),
            n_runs=("value", "count"),
            n_init=("n_init", "first"),
            budget=("budget", "first"),
            pool_mode=("pool_mode", "first"),
            q=("q", "first"),
        )
        .reset_index()
    )

    timing_rows = [
        {"tag": run.tag, "strategy": run.strategy, "seed": run.seed, **{k: v for k, v in t.items()}}
        for run in runs for t in run.timings if t.get("cycle", 0) >= 1
    ]
    timing_columns = ["score_seconds", "select_seconds", "train_seconds", "eval_seconds", "total_seconds"]
    if timing_rows:
        timing = (
            pd.DataFrame(timing_rows)
            .groupby(["tag", "strategy"], sort=True)[timing_columns]
            .mean()
            .reset_index()
        )
    else:
        timing = pd.DataFrame(columns=["tag", "strategy"] + timing_columns)

    return AggregateSummary(
        metrics=metrics,
        per_cycle=per_cycle,
        overall=overall,
        pvalues=_pvalues(metrics, n_perm),
        timing=timing,
    )


def aggregate_directory(output_dir: Union[str, Path], n_perm: int = 10_000) -> AggregateSummary:
    runs = load_runs(output_dir)
    if not runs:
        raise FileNotFoundError(f"No completed experiments under {output_dir}")
    return aggregate_runs(runs, n_perm)
