"""
Segmentation metrics (DSC, HD95) on slices and volumes, and the paired permutation test.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data_pipeline import SliceSample

logger = logging.getLogger(__name__)

UNITS = {"dsc": "percent", "hd95": "mm"}


@dataclass
class MetricRecord:
    """
    One metric at one scope, per foreground class and averaged.

    HD95 values are None where undefined (a mask side is empty); those cases
    are left out of the averages and counted in undefined_count.
    """
    scope: str
    metric: str
    per_class: dict[int, Optional[float]] = field(default_factory=dict)
    mean: Optional[float] = None
    undefined_count: int = 0

    @property
    def unit(self) -> str:
        return UNITS[self.metric]

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "metric": self.metric,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "mean": self.mean,
            "undefined_count": self.undefined_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricRecord":
        return cls(
            scope=data["scope"],
            metric=data["metric"],
            per_class={int(k): v for k, v in data["per_class"].items()},
            mean=data["mean"],
            undefined_count=data["undefined_count"],
        )


def _check_shapes(pred_mask: np.ndarray, target_mask: np.ndarray) -> None:
    if np.shape(pred_mask) != np.shape(target_mask):
        raise ValueError(f"Mask shapes differ: {np.shape(pred_mask)} vs {np.shape(target_mask)}")


def dsc(pred_mask: np.ndarray, target_mask: np.ndarray, class_id: int) -> float:
    """Dice coefficient in percent for one class; 100 when the class is absent from both."""
    _check_shapes(pred_mask, target_mask)
    x = np.asarray(pred_mask) == class_id
    y = np.asarray(target_mask) == class_id
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(x, y).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background face-neighbour (or the image border)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _directed_hd95(x: np.ndarray, y: np.ndarray, spacing: Sequence[float]) -> float:
    distance_to_y = ndimage.distance_transform_edt(~y, sampling=spacing)
    return float(np.percentile(distance_to_y[boundary(x)], 95))


def hd95(pred_mask: np.ndarray, target_mask: np.ndarray, spacing: Sequence[float]) -> Optional[float]:
    """
    Symmetric 95th-percentile boundary distance in mm for binary masks.

    For each boundary pixel of one mask the distance to the nearest pixel of
    the other mask is taken; the result is the larger of the two 95th
    percentiles. Returns None if either mask is empty.
    """
    _check_shapes(pred_mask, target_mask)
    x = np.asarray(pred_mask, dtype=bool)
    y = np.asarray(target_mask, dtype=bool)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != x.ndim or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must give {x.ndim} positive values, got {spacing}")
    if not x.any() or not y.any():
        return None
    return max(_directed_hd95(x, y, spacing), _directed_hd95(y, x, spacing))


def _record(scope: str, metric: str, values: dict[int, list[Optional[float]]]) -> MetricRecord:
    per_class = {}
    undefined = 0
    for class_id, class_values in sorted(values.items()):
        defined = [v for v in class_values if v is not None]
        undefined += len(class_values) - len(defined)
        per_class[class_id] = float(np.mean(defined)) if defined else None
    means = [v for v in per_class.values() if v is not None]
    return MetricRecord(
        scope=scope,
        metric=metric,
        per_class=per_class,
        mean=float(np.mean(means)) if means else None,
        undefined_count=undefined,
    )


def evaluate_predictions(
    predictions: Sequence[np.ndarray],
    samples: Sequence[SliceSample],
    class_count: int,
) -> list[MetricRecord]:
    """
    2D and 3D DSC and HD95 from predicted masks aligned with samples.

    2D metrics are computed per slice and averaged; 3D metrics stack each
    volume's slices in slice order and are averaged over volumes. Averages
    cover foreground classes only.
    """
    if not samples:
        raise ValueError("Cannot evaluate an empty split")
    if len(predictions) != len(samples):
        raise ValueError(f"{len(predictions)} predictions for {len(samples)} samples")

    foreground = range(1, class_count)
    slice_dsc = defaultdict(list)
    slice_hd = defaultdict(list)
    volumes = defaultdict(list)

    for pred, sample in zip(predictions, samples):
        _check_shapes(pred, sample.mask)
        volumes[sample.volume_id].append((sample.slice_index, pred, sample))
        for c in foreground:
            slice_dsc[c].append(dsc(pred, sample.mask, c))
            slice_hd[c].append(hd95(pred == c, sample.mask == c, sample.pixel_spacing))

    volume_dsc = defaultdict(list)
    volume_hd = defaultdict(list)
    for volume_id in sorted(volumes):
        entries = sorted(volumes[volume_id], key=lambda e: e[0])
        pred_volume = np.stack([e[1] for e in entries])
        target_volume = np.stack([e[2].mask for e in entries])
        first = entries[0][2]
        spacing = (first.slice_thickness, *first.pixel_spacing)
        for c in foreground:
            volume_dsc[c].append(dsc(pred_volume, target_volume, c))
            volume_hd[c].append(hd95(pred_volume == c, target_volume == c, spacing))

    records = [
        _record("2D", "dsc", slice_dsc),
        _record("2D", "hd95", slice_hd),
        _record("3D", "dsc", volume_dsc),
        _record("3D", "hd95", volume_hd),
    ]
    summary = ", ".join(
        f"{r.scope} {r.metric} {r.mean:.2f}" if r.mean is not None else f"{r.scope} {r.metric} n/a"
        for r in records
    )
    logger.info(f"Evaluation on {len(samples)} slices / {len(volumes)} volumes: {summary}")
    return records


def evaluate_model(model, samples: Sequence[SliceSample], class_count: int, batch_size: int = 32) -> list[MetricRecord]:
    """Predict every sample and evaluate against its stored mask."""
    if not samples:
        raise ValueError("Cannot evaluate an empty split")
    predictions = model.predict_masks(np.stack([s.image for s in samples]), batch_size=batch_size)
    return evaluate_predictions(list(predictions), samples, class_count)


def find_record(records: Sequence[MetricRecord], scope: str, metric: str) -> MetricRecord:
    for record in records:
        if record.scope == scope and record.metric == metric:
            return record
    raise KeyError(f"No {scope} {metric} record")


def paired_permutation_test(
    a: Sequence[float],
    b: Sequence[float],
    n_perm: int = 10_000,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Two-sided sign-flip permutation test on the mean paired difference.

    p = (1 + #{|T_perm| >= |T_obs|}) / (n_perm + 1)
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"Paired lists must have equal length, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ValueError("Paired permutation test needs at least 2 pairs")
    if n_perm < 1:
        raise ValueError(f"n_perm must be >= 1, got {n_perm}")

    rng = rng if rng is not None else np.random.default_rng(0)
    diff = a - b
    observed = abs(diff.mean())
    signs = rng.choice(np.array([-1.0, 1.0]), size=(n_perm, len(diff)))
    permuted = np.abs((signs * diff).mean(axis=1))
    count = int(np.sum(permuted >= observed * (1.0 - 1e-12)))
    return (1 + count) / (n_perm + 1)
