"""
Shared test configuration and utilities.
"""

import os
import sys
import traceback
from typing import Callable, Sequence

# Add project root to path for imports
_tests_dir = os.path.dirname(os.path.abspath(__file__))
_package_dir = os.path.dirname(_tests_dir)
_project_root = os.path.dirname(_package_dir)
sys.path.insert(0, _project_root)

from dotenv import load_dotenv
# Load .env from package dir first, then project root
load_dotenv(os.path.join(_package_dir, '.env'))
load_dotenv(os.path.join(_project_root, '.env'))

import numpy as np

from active_segmenter.src.config import (
    DatasetConfig,
    ExperimentConfig,
    LossPredictorConfig,
    SegModelConfig,
    SelectionConfig,
    TrainConfig,
    UncertaintyConfig,
)
from active_segmenter.src.data_pipeline import DatasetSplit, SliceSample, generate_synthetic_dataset


ENV_VARS = [
    "ACTIVE_SEG_DATA_ROOT",
    "ACTIVE_SEG_OUTPUT_ROOT",
    "ACTIVE_SEG_DEVICE",
    "ACTIVE_SEG_NUM_THREADS",
]


def check_env_vars() -> dict:
    """Check which optional environment variables are set."""
    return {var: bool(os.getenv(var)) for var in ENV_VARS}


def run_suite(title: str, tests: Sequence[Callable[[], None]]) -> bool:
    """
    Run plain assert-style test functions and print a result table.

    Returns:
        True if every test passed
    """
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)

    results = {}
    for test in tests:
        name = test.__name__.removeprefix("test_")
        summary = (test.__doc__ or name).strip().splitlines()[0]
        print("\n" + "=" * 60)
        print(f"TEST: {summary}")
        print("=" * 60)
        try:
            test()
            results[name] = True
            print("  ✓ passed")
        except Exception as e:
            results[name] = False
            print(f"  ✗ {type(e).__name__}: {e}")
            traceback.print_exc()

    print("\n" + "=" * 60)
    print("TEST RESULTS")
    print("=" * 60)
    for name, passed in results.items():
        print(f"  {name}: {'✓ PASS' if passed else '✗ FAIL'}")

    all_passed = all(results.values())
    print("=" * 60)
    print("ALL TESTS PASSED!" if all_passed else "SOME TESTS FAILED")
    return all_passed


def tiny_dataset_config(n_volumes: int = 6, slices: int = 4, size=(8, 8), seed: int = 0) -> DatasetConfig:
    return DatasetConfig(
        source="synthetic",
        seed=seed,
        n_volumes=n_volumes,
        slices_per_volume=slices,
        size=tuple(size),
        class_count=2,
    )


def tiny_dataset(n_volumes: int = 6, slices: int = 4, size=(8, 8), seed: int = 0) -> DatasetSplit:
    return generate_synthetic_dataset(seed, n_volumes, slices, tuple(size), 2)


def toy_model_config(depth: int = 1, base_channels: int = 2, dropout_rate: float = 0.5) -> SegModelConfig:
    return SegModelConfig(depth=depth, base_channels=base_channels, class_count=2, dropout_rate=dropout_rate)


def fast_train_config(epochs: int = 2, iters_per_epoch: int = 5, batch_size: int = 2, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        epochs=epochs,
        iters_per_epoch=iters_per_epoch,
        batch_size=batch_size,
        warmup_epochs=min(1, epochs),
        seed=seed,
    )


def tiny_experiment(
    output_dir: str,
    strategy: str = "stochastic_batch",
    scorer: str = "entropy",
    name: str = "",
    budget: int = 2,
    n_init: int = 4,
    cycles: int = 3,
    train: TrainConfig = None,
    dataset: DatasetConfig = None,
    **selection,
) -> ExperimentConfig:
    """Experiment on a tiny synthetic dataset with a toy UNet and a few training steps."""
    return ExperimentConfig(
        name=name or f"{scorer}-{strategy}",
        dataset=dataset or tiny_dataset_config(),
        model=toy_model_config(),
        loss_predictor=LossPredictorConfig(tap_projection_dim=4, detach_after_epoch=1),
        train=train or fast_train_config(),
        uncertainty=UncertaintyConfig(k_inferences=3, batch_size=8),
        selection=SelectionConfig(strategy=strategy, budget=budget, **selection),
        scorer=scorer,
        n_init=n_init,
        cycles=cycles,
        seeds=(0,),
        output_dir=output_dir,
    )


def make_sample(image: np.ndarray, mask: np.ndarray = None, volume_id: str = "v", slice_index: int = 0) -> SliceSample:
    image = np.asarray(image, dtype=np.float32)
    mask = np.zeros(image.shape, dtype=np.int64) if mask is None else np.asarray(mask, dtype=np.int64)
    return SliceSample(volume_id=volume_id, slice_index=slice_index, image=image, mask=mask)


class ConstantModel:
    """Returns the same probability map for every image."""

    has_dropout = False
    device = "cpu"

    def __init__(self, prob: np.ndarray):
        self.prob = np.asarray(prob, dtype=np.float64)

    def predict_probabilities(self, images, stochastic_dropout=False, generator=None):
        return np.repeat(self.prob[None], len(images), axis=0)


class PixelwiseModel:
    """
    Foreground probability equals the pixel intensity, clipped to [0, 1].

    Commutes with any rotation of the input.
    """

    has_dropout = False
    device = "cpu"

    def predict_probabilities(self, images, stochastic_dropout=False, generator=None):
        foreground = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
        return np.stack([1.0 - foreground, foreground], axis=1)


class IntensityLossModel:
    """Predicted loss = mean image intensity."""

    has_dropout = False
    device = "cpu"
    is_loss_predictor_trained = True

    def predict_probabilities(self, images, stochastic_dropout=False, generator=None):
        return PixelwiseModel().predict_probabilities(images)

    def predict_losses(self, images):
        return np.asarray(images, dtype=np.float64).mean(axis=(1, 2))
