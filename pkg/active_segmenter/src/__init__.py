"""
Active Segmenter source modules.
"""

from .config import (
    load_config,
    load_experiment_file,
    ConfigError,
    RuntimeConfig,
    ExperimentConfig,
    DatasetConfig,
    SegModelConfig,
    LossPredictorConfig,
    TrainConfig,
    UncertaintyConfig,
    SelectionConfig,
)
from .data_pipeline import (
    VolumeRecord,
    SliceSample,
    DatasetSplit,
    PoolState,
    PoolError,
    normalize_intensity,
    volume_to_slices,
    generate_synthetic_dataset,
    load_dataset,
    init_pool,
    oracle_annotate,
)
from .seg_model import UNet, LossPredictor, ForwardResult, TrainedModel, forward, predict_loss, ranking_loss
from .trainer import TrainHistory, lr_at, augment, train
from .uncertainty import ScoreTable, pixel_entropy, jsd, aggregate_pixels, score_pool
from .selection import (
    CandidateBatch,
    random_select,
    topk_select,
    build_stochastic_pool,
    stochastic_batch_select,
    coreset_select,
    select_batch,
    selection_rng,
)
from .evaluation import MetricRecord, dsc, hd95, evaluate_model, paired_permutation_test
from .results_store import ExperimentStore, IntegrityError
from .al_loop import CycleResult, AggregateSummary, PoolExhaustedError, run_experiment, resume, aggregate_runs

__all__ = [
    # Config
    "load_config",
    "load_experiment_file",
    "ConfigError",
    "RuntimeConfig",
    "ExperimentConfig",
    "DatasetConfig",
    "SegModelConfig",
    "LossPredictorConfig",
    "TrainConfig",
    "UncertaintyConfig",
    "SelectionConfig",
    # Data
    "VolumeRecord",
    "SliceSample",
    "DatasetSplit",
    "PoolState",
    "PoolError",
    "normalize_intensity",
    "volume_to_slices",
    "generate_synthetic_dataset",
    "load_dataset",
    "init_pool",
    "oracle_annotate",
    # Model and training
    "UNet",
    "LossPredictor",
    "ForwardResult",
    "TrainedModel",
    "forward",
    "predict_loss",
    "ranking_loss",
    "TrainHistory",
    "lr_at",
    "augment",
    "train",
    # Scoring and selection
    "ScoreTable",
    "pixel_entropy",
    "jsd",
    "aggregate_pixels",
    "score_pool",
    "CandidateBatch",
    "random_select",
    "topk_select",
    "build_stochastic_pool",
    "stochastic_batch_select",
    "coreset_select",
    "select_batch",
    "selection_rng",
    # Evaluation and experiments
    "MetricRecord",
    "dsc",
    "hd95",
    "evaluate_model",
    "paired_permutation_test",
    "ExperimentStore",
    "IntegrityError",
    "CycleResult",
    "AggregateSummary",
    "PoolExhaustedError",
    "run_experiment",
    "resume",
    "aggregate_runs",
]
