#!/usr/bin/env python3
"""
Trainer tests.
Tests the learning-rate schedule, augmentation and the fixed-step training loop.
"""

import logging

import numpy as np

from . import conftest
from active_segmenter.src.config import LossPredictorConfig, TrainConfig
from active_segmenter.src.image_utils import rotate_plane
from active_segmenter.src.trainer import augment, lr_at, train

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def test_lr_schedule_protocol():
    """Default schedule: 1e-6 start, 2e-4 after warmup, ~0 at the last of 18,750 steps"""
    cfg = TrainConfig()
    total = cfg.total_steps
    warmup_end = cfg.warmup_epochs * cfg.iters_per_epoch
    assert total == 18_750 and warmup_end == 2_500

    assert abs(lr_at(0, cfg) - 1e-6) < 1e-18
    assert abs(lr_at(warmup_end, cfg) - 2e-4) < 1e-15
    assert lr_at(total - 1, cfg) < 1e-9

    trace = np.array([lr_at(step, cfg) for step in range(total)])
    assert np.all(np.diff(trace[:warmup_end + 1]) >= 0.0)
    assert np.all(np.diff(trace[warmup_end:]) <= 0.0)
    assert int(np.argmax(trace)) == warmup_end
    print(f"  peak {trace.max():.3e} at step {int(np.argmax(trace))}, final {trace[-1]:.3e}")

    for bad in (-1, total):
        try:
            lr_at(bad, cfg)
        except ValueError:
            pass
        else:
            raise AssertionError(f"step {bad} accepted")


def test_lr_without_warmup():
    """Without warmup the schedule starts at the peak"""
    cfg = TrainConfig(epochs=2, iters_per_epoch=5, warmup_epochs=0)
    assert abs(lr_at(0, cfg) - cfg.lr_init * cfg.warmup_factor) < 1e-18
    assert lr_at(cfg.total_steps - 1, cfg) < 1e-12


def test_augment_identity():
    """Zero rotation and zero noise leave the sample unchanged"""
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, size=(12, 12))
    mask = (image > 0.5).astype(np.int64)
    sample = conftest.make_sample(image, mask)

    out = augment(sample, np.random.default_rng(1), rotation_deg=(0.0, 0.0), noise_sigma=0.0)
    np.testing.assert_array_equal(out.image, sample.image)
    np.testing.assert_array_equal(out.mask, sample.mask)
    assert out.sample_id == sample.sample_id


def test_augment_random():
    """Augmentation keeps label values, adds noise and is seeded"""
    rng = np.random.default_rng(0)
    mask = np.zeros((16, 16), dtype=np.int64)
    mask[4:12, 5:11] = 1
    mask[6:9, 6:9] = 2
    sample = conftest.make_sample(rng.uniform(0, 1, size=(16, 16)), mask)

    a = augment(sample, np.random.default_rng(5), (-10.0, 10.0), 0.01)
    b = augment(sample, np.random.default_rng(5), (-10.0, 10.0), 0.01)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert set(np.unique(a.mask).tolist()) <= {0, 1, 2}
    assert a.image.dtype == np.float32 and a.mask.shape == (16, 16)
    assert not np.array_equal(a.image, sample.image)


def test_augment_noise_level():
    """Residual after undoing the rotation is pure noise: mean |r| close to sigma * sqrt(2 / pi)"""
    rng = np.random.default_rng(0)
    sample = conftest.make_sample(rng.uniform(0, 1, size=(32, 32)).astype(np.float32), np.zeros((32, 32), np.int64))
    rotated = rotate_plane(sample.image, 6.0, order=1, cval=0.0)

    residuals = []
    for draw in range(50):
        out = augment(sample, np.random.default_rng(draw), rotation_deg=(6.0, 6.0), noise_sigma=0.01)
        residuals.append(np.abs(out.image - rotated).ravel())
    mean_abs = float(np.mean(np.concatenate(residuals)))

    print(f"  mean |residual| {mean_abs:.5f} vs {0.01 * np.sqrt(2 / np.pi):.5f}")
    assert abs(mean_abs - 0.01 * np.sqrt(2 / np.pi)) < 3e-4


def test_train_steps_and_trace():
    """Training runs exactly epochs x iters steps and records lr at each epoch start"""
    split = conftest.tiny_dataset()
    cfg = conftest.fast_train_config(epochs=3, iters_per_epoch=4)
    model, history = train(conftest.toy_model_config(), split.train[:6], cfg)

    assert history.steps == 12
    assert len(history.epoch_losses) == 3 and all(np.isfinite(history.epoch_losses))
    assert history.lr_trace == [lr_at(epoch * 4, cfg) for epoch in range(3)]
    assert model.loss_predictor is None and not model.is_loss_predictor_trained
    assert model.predict_masks(np.stack([s.image for s in split.test])).shape == (len(split.test), 8, 8)


def test_train_deterministic():
    """Same seed gives the same loss trace and weights"""
    split = conftest.tiny_dataset()
    cfg = conftest.fast_train_config(epochs=2, iters_per_epoch=5, seed=7)
    model_a, history_a = train(conftest.toy_model_config(), split.train[:6], cfg)
    model_b, history_b = train(conftest.toy_model_config(), split.train[:6], cfg)
    assert history_a.epoch_losses == history_b.epoch_losses
    assert model_a.digest() == model_b.digest()

    model_c, _ = train(conftest.toy_model_config(), split.train[:6], conftest.fast_train_config(seed=8))
    assert model_c.digest() != model_a.digest()


def test_train_with_loss_module():
    """Joint training marks the loss predictor as trained"""
    split = conftest.tiny_dataset()
    loss_cfg = LossPredictorConfig(tap_projection_dim=4, detach_after_epoch=1)
    model, history = train(
        conftest.toy_model_config(), split.train[:6], conftest.fast_train_config(epochs=2, batch_size=4),
        with_loss_module=True, loss_cfg=loss_cfg,
    )
    assert history.steps == 10
    assert model.is_loss_predictor_trained
    losses = model.predict_losses(np.stack([s.image for s in split.test]))
    assert losses.shape == (len(split.test),) and np.all(np.isfinite(losses))

    default_model, _ = train(
        conftest.toy_model_config(), split.train[:6], conftest.fast_train_config(epochs=1),
        with_loss_module=True,
    )
    assert default_model.loss_predictor.cfg == LossPredictorConfig()


def test_train_rejects_empty_set():
    """Training needs at least one labelled slice"""
    try:
        train(conftest.toy_model_config(), [], conftest.fast_train_config())
    except ValueError:
        pass
    else:
        raise AssertionError("empty labelled set accepted")


def main():
    return conftest.run_suite("TRAINER TESTS", [
        test_lr_schedule_protocol,
        test_lr_without_warmup,
        test_augment_identity,
        test_augment_random,
        test_augment_noise_level,
        test_train_steps_and_trace,
        test_train_deterministic,
        test_train_with_loss_module,
        test_train_rejects_empty_set,
    ])


if __name__ == "__main__":
    success = main()
    exit(0 if success else 1)
