"""
Runs (strategy x seed) experiments, in parallel worker processes when asked.
Each worker owns its experiment directory; nothing else is shared.
"""

import asyncio
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

from .config import ExperimentConfig, RuntimeConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentPlan:
    """One experiment to run."""
    cfg: ExperimentConfig
    seed: int

    @property
    def experiment_id(self) -> str:
        return self.cfg.experiment_id(self.seed)


@dataclass
class PlanOutcome:
    experiment_id: str
    ok: bool
    status: str
    cycles: int = 0
    error: Optional[str] = None


def plan_experiments(configs: Sequence[ExperimentConfig], seeds: Optional[Sequence[int]] = None) -> list[ExperimentPlan]:
    """Every (strategy, seed) pair; `seeds` replaces the seeds listed in the configs."""
    plans = []
    for cfg in configs:
        for seed in (seeds if seeds else cfg.seeds):
            plans.append(ExperimentPlan(cfg, int(seed)))
    return plans


def _run_one(config: dict, seed: int, runtime: dict) -> PlanOutcome:
    """Worker entry point; takes plain dicts so it pickles under spawn."""
    from .al_loop import run_experiment
    from .results_store import ExperimentStore

    cfg = ExperimentConfig.from_dict(config)
    runtime_cfg = RuntimeConfig(**runtime)
    logging.basicConfig(
        level=getattr(logging, runtime_cfg.log_level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    experiment_id = cfg.experiment_id(seed)
    try:
        results = run_experiment(cfg, seed, runtime=runtime_cfg)
        status = ExperimentStore.for_experiment(cfg.output_dir, experiment_id).read_manifest()["status"]
        return PlanOutcome(experiment_id, ok=True, status=status, cycles=len(results))
    except Exception as e:
        logging.getLogger(__name__).error(f"Experiment {experiment_id} failed: {e}")
        return PlanOutcome(experiment_id, ok=False, status="failed", error=f"{type(e).__name__}: {e}")


async def run_plans(plans: Sequence[ExperimentPlan], workers: int, runtime: RuntimeConfig) -> list[PlanOutcome]:
    """
    Run plans in a pool of spawned worker processes.

    Args:
        plans: Experiments to run
        workers: Number of worker processes (1 runs everything in this process)
        runtime: Process settings passed to every worker

    Returns:
        One outcome per plan, in plan order
    """
    runtime_dict = asdict(runtime)
    if workers <= 1 or len(plans) <= 1:
        return [_run_one(plan.cfg.to_dict(), plan.seed, runtime_dict) for plan in plans]

    loop = asyncio.get_running_loop()
    context = multiprocessing.get_context("spawn")
    logger.info(f"Running {len(plans)} experiments on {workers} worker processes")
    with ProcessPoolExecutor(max_workers=workers, mp_context=context) as executor:
        outcomes = await asyncio.gather(*[
            loop.run_in_executor(executor, _run_one, plan.cfg.to_dict(), plan.seed, runtime_dict)
            for plan in plans
        ])
    return list(outcomes)


def run_plans_sync(plans: Sequence[ExperimentPlan], workers: int, runtime: RuntimeConfig) -> list[PlanOutcome]:
    return asyncio.run(run_plans(plans, workers, runtime))
