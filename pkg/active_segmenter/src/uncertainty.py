"""
Per-sample uncertainty scores over the unlabelled pool.

Scorers work with any model exposing
`predict_probabilities(images, stochastic_dropout=False, generator=None)`;
the dropout, TTA and loss scorers additionally use `has_dropout`,
`predict_losses` and `is_loss_predictor_trained`.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from scipy.special import entr

from .config import UncertaintyConfig
from .data_pipeline import SliceSample
from .image_utils import derive_seed, rotate_plane

logger = logging.getLogger(__name__)

SCORER_NAMES = ("entropy", "dropout", "tta", "learnloss")
_NONNEGATIVE = ("entropy", "dropout", "tta")


@dataclass
class ScoreTable:
    """Scores of every unlabelled sample for one cycle and one scorer."""
    scorer_name: str
    scores: dict[str, float] = field(default_factory=dict)
    cycle: int = 0
    model_digest: str = ""

    def __post_init__(self):
        if self.scorer_name not in SCORER_NAMES:
            raise ValueError(f"Unknown scorer '{self.scorer_name}'")
        for sample_id, score in self.scores.items():
            if not math.isfinite(score):
                raise ValueError(f"Non-finite score {score} for {sample_id}")
            if self.scorer_name in _NONNEGATIVE and score < 0.0:
                raise ValueError(f"Negative {self.scorer_name} score {score} for {sample_id}")

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, sample_id: str) -> float:
        return self.scores[sample_id]

    def check_covers(self, sample_ids: Sequence[str]) -> None:
        """Raise unless the table scores exactly these ids."""
        expected = set(sample_ids)
        actual = set(self.scores)
        if expected != actual:
            missing = sorted(expected - actual)[:5]
            extra = sorted(actual - expected)[:5]
            raise ValueError(f"Score table does not match the pool (missing {missing}, extra {extra})")

    def to_tsv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame({"sample_id": list(self.scores), "score": list(self.scores.values())})
        with open(path, "w", newline="") as f:
            f.write(f"# scorer={self.scorer_name}\n")
            f.write(f"# cycle={self.cycle}\n")
            f.write(f"# model_digest={self.model_digest}\n")
            frame.to_csv(f, sep="\t", index=False, float_format="%.17g", lineterminator="\n")
        return path

    @classmethod
    def from_tsv(cls, path: Union[str, Path]) -> "ScoreTable":
        path = Path(path)
        meta = {}
        with open(path) as f:
            for line in f:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()

        frame = pd.read_csv(path, sep="\t", comment="#", dtype={"sample_id": str, "score": float})
        return cls(
            scorer_name=meta.get("scorer", ""),
            scores=dict(zip(frame["sample_id"], frame["score"].astype(float))),
            cycle=int(meta.get("cycle", 0)),
            model_digest=meta.get("model_digest", ""),
        )


def _check_distribution(prob: np.ndarray, name: str = "prob") -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 3 or prob.shape[0] < 2:
        raise ValueError(f"{name} must have shape (C, H, W) with C >= 2, got {prob.shape}")
    if not np.all(np.isfinite(prob)) or prob.min() < -1e-9:
        raise ValueError(f"{name} contains negative or non-finite probabilities")
    if not np.allclose(prob.sum(axis=0), 1.0, atol=1e-5):
        raise ValueError(f"{name} does not sum to 1 over classes")
    return np.clip(prob, 0.0, 1.0)


def pixel_entropy(prob: np.ndarray) -> np.ndarray:
    """Shannon entropy (natural log) per pixel of a (C, H, W) probability map."""
    prob = _check_distribution(prob)
    return entr(prob).sum(axis=0)


def jsd(probs: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    """
    Jensen-Shannon divergence per pixel across K probability maps:
    entropy of the mean map minus the mean of the entropies. Bounded by ln K.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 4 or probs.shape[0] < 2:
        raise ValueError(f"jsd needs K >= 2 maps of shape (C, H, W), got {probs.shape}")
    probs = np.stack([_check_distribution(p, f"probs[{k}]") for k, p in enumerate(probs)])

    entropy_of_mean = entr(probs.mean(axis=0)).sum(axis=0)
    mean_entropy = entr(probs).sum(axis=1).mean(axis=0)
    return np.maximum(entropy_of_mean - mean_entropy, 0.0)


def aggregate_pixels(values: np.ndarray, mode: str = "mean", top_fraction: float = 0.1) -> float:
    """Reduce a pixel map to one score: mean, sum, or mean of the top fraction."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("Cannot aggregate an empty map")
    if not np.all(np.isfinite(values)):
        raise ValueError("Pixel map contains non-finite values")

    if mode == "mean":
        return float(values.mean())
    if mode == "sum":
        return float(values.sum())
    if mode == "top":
        k = max(1, int(math.ceil(top_fraction * values.size)))
        return float(np.partition(values, values.size - k)[values.size - k:].mean())
    raise ValueError(f"Unknown aggregation '{mode}'")


def score_entropy(model, sample: SliceSample, aggregation: str = "mean", top_fraction: float = 0.1) -> float:
    prob = model.predict_probabilities(np.asarray(sample.image)[None])[0]
    return aggregate_pixels(pixel_entropy(prob), aggregation, top_fraction)


def score_dropout(
    model,
    sample: SliceSample,
    k: int = 8,
    generator: Optional[torch.Generator] = None,
    aggregation: str = "mean",
    top_fraction: float = 0.1,
) -> float:
    """JSD over K forward passes with dropout active and batch norm frozen."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not model.has_dropout:
        logger.warning("Dropout scorer on a model without dropout: score is 0")
        return 0.0

    images = np.repeat(np.asarray(sample.image)[None], k, axis=0)
    probs = model.predict_probabilities(images, stochastic_dropout=True, generator=generator)
    return aggregate_pixels(jsd(probs), aggregation, top_fraction)


def _unrotate_probabilities(prob: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a (C, H, W) map back; pixels from outside the image become uniform."""
    class_count = prob.shape[0]
    restored = rotate_plane(prob, -angle, order=1, cval=1.0 / class_count)
    restored = np.clip(restored, 0.0, None)
    return restored / np.maximum(restored.sum(axis=0, keepdims=True), 1e-12)


def score_tta(
    model,
    sample: SliceSample,
    k: int = 8,
    rng: Optional[np.random.Generator] = None,
    rotation_range: Sequence[float] = (-10.0, 10.0),
    noise_sigma: float = 0.01,
    angles: Optional[Sequence[float]] = None,
    aggregation: str = "mean",
    top_fraction: float = 0.1,
) -> float:
    """
    JSD over predictions for K transformed copies of the image.

    Each copy gets Gaussian noise and then a rotation; its prediction is
    rotated back before comparison. Explicit `angles` replace the random draw.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if angles is None:
        angles = rng.uniform(rotation_range[0], rotation_range[1], size=k)
    angles = [float(a) for a in angles]
    if len(angles) < 2:
        raise ValueError(f"TTA needs at least 2 transforms, got {len(angles)}")

    base = np.asarray(sample.image, dtype=np.float64)
    images = []
    for angle in angles:
        noisy = base + rng.normal(0.0, noise_sigma, size=base.shape) if noise_sigma > 0.0 else base
        images.append(rotate_plane(noisy, angle, order=1, cval=0.0))

    probs = model.predict_probabilities(np.stack(images).astype(np.float32))
    restored = [_unrotate_probabilities(p, angle) for p, angle in zip(probs, angles)]
    return aggregate_pixels(jsd(restored), aggregation, top_fraction)


def score_learnloss(model, sample: SliceSample) -> float:
    """Predicted loss, used as the score."""
    if not model.is_loss_predictor_trained:
        raise ValueError("Loss predictor has not been trained")
    return float(model.predict_losses(np.asarray(sample.image)[None])[0])


def _generator_for(model, seed: int) -> torch.Generator:
    return torch.Generator(device=getattr(model, "device", "cpu")).manual_seed(seed)


def score_pool(
    model,
    samples: Sequence[SliceSample],
    scorer: str,
    cfg: UncertaintyConfig,
    master_seed: int,
    cycle: int,
    model_digest: str = "",
) -> ScoreTable:
    """
    Score every sample with one scorer.

    Stochastic scorers draw from a per-sample stream derived from
    (master_seed, cycle, scorer, sample id), so scores do not depend on pool
    order or on how the pool is split across workers.
    """
    if scorer not in SCORER_NAMES:
        raise ValueError(f"Unknown scorer '{scorer}'")

    scores: dict[str, float] = {}
    if not samples:
        return ScoreTable(scorer, scores, cycle, model_digest)

    if scorer == "entropy":
        for start in range(0, len(samples), cfg.batch_size):
            chunk = samples[start:start + cfg.batch_size]
            probs = model.predict_probabilities(np.stack([s.image for s in chunk]))
            for sample, prob in zip(chunk, probs):
                scores[sample.sample_id] = aggregate_pixels(pixel_entropy(prob), cfg.aggregation, cfg.top_fraction)

    elif scorer == "dropout":
        if not model.has_dropout:
            logger.warning("Dropout scorer with dropout_rate 0: every score is 0")
        for sample in samples:
            generator = _generator_for(model, derive_seed(master_seed, cycle, scorer, sample.sample_id))
            scores[sample.sample_id] = score_dropout(
                model, sample, cfg.k_inferences, generator, cfg.aggregation, cfg.top_fraction,
            ) if model.has_dropout else 0.0

    elif scorer == "tta":
        for sample in samples:
            rng = np.random.default_rng(derive_seed(master_seed, cycle, scorer, sample.sample_id))
            scores[sample.sample_id] = score_tta(
                model, sample, cfg.k_inferences, rng, cfg.rotation_range, cfg.noise_sigma,
                aggregation=cfg.aggregation, top_fraction=cfg.top_fraction,
            )

    else:
        if not model.is_loss_predictor_trained:
            raise ValueError("Loss predictor has not been trained")
        for start in range(0, len(samples), cfg.batch_size):
            chunk = samples[start:start + cfg.batch_size]
            losses = model.predict_losses(np.stack([s.image for s in chunk]))
            for sample, loss in zip(chunk, losses):
                scores[sample.sample_id] = float(loss)

    table = ScoreTable(scorer, scores, cycle, model_digest)
    values = np.fromiter(scores.values(), dtype=np.float64)
    logger.info(
        f"Scored {len(table)} samples with {scorer}: "
        f"mean {values.mean():.4g}, min {values.min():.4g}, max {values.max():.4g}"
    )
    return table
