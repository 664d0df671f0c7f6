"""
Active Segmenter - pool-based active learning for 2D medical image segmentation.

Uncertainty scorers (entropy, MC dropout, TTA, learned loss) combined with
random, top-k, stochastic-batch and core-set query strategies.
"""

from .src import (
    load_config,
    load_experiment_file,
    ExperimentConfig,
    run_experiment,
    resume,
    aggregate_runs,
)

__all__ = [
    "load_config",
    "load_experiment_file",
    "ExperimentConfig",
    "run_experiment",
    "resume",
    "aggregate_runs",
]
