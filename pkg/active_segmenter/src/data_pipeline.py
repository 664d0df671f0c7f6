"""
Volume ingestion, slice preprocessing, synthetic datasets and pool state.

Volumes are normalized per scan, resampled to isotropic spacing and cut
into 2D slices along their short axis. Slices are the unit of annotation:
the labelled/unlabelled pool holds their ids ("{volume_id}:{slice_index}").
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .config import DatasetConfig
from .image_utils import percentile_bounds, resample_volume, resize_plane

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


class PoolError(ValueError):
    """Annotation request that a correct selection can never produce."""


def _read_only(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def sample_volume(sample_id: str) -> str:
    """Volume id part of a sample id."""
    return sample_id.rsplit(":", 1)[0]


@dataclass(frozen=True, eq=False)
class VolumeRecord:
    """A 3D scan with per-voxel class labels."""
    volume_id: str
    intensities: np.ndarray
    labels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise ValueError(f"Volume {self.volume_id}: expected 3D intensities, got shape {self.intensities.shape}")
        if self.intensities.shape != self.labels.shape:
            raise ValueError(
                f"Volume {self.volume_id}: intensities {self.intensities.shape} and labels {self.labels.shape} differ"
            )
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"Volume {self.volume_id}: spacing must be three positive values, got {self.spacing}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"Volume {self.volume_id}: labels must be integers, got {self.labels.dtype}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError(f"Volume {self.volume_id}: negative class index in labels")

    def check_classes(self, class_count: int) -> None:
        if self.labels.size and self.labels.max() >= class_count:
            raise ValueError(
                f"Volume {self.volume_id}: class index {int(self.labels.max())} >= class_count {class_count}"
            )


@dataclass(frozen=True, eq=False)
class SliceSample:
    """One 2D image/mask pair traceable to its volume."""
    volume_id: str
    slice_index: int
    image: np.ndarray
    mask: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    slice_thickness: float = 1.0

    def __post_init__(self):
        if self.slice_index < 0:
            raise ValueError(f"slice_index must be >= 0, got {self.slice_index}")
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2D shapes")

    @property
    def sample_id(self) -> str:
        return f"{self.volume_id}:{self.slice_index}"


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Volume-disjoint train/validation/test slices."""
    train: tuple[SliceSample, ...]
    validation: tuple[SliceSample, ...]
    test: tuple[SliceSample, ...]
    class_count: int

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")

        seen_ids = set()
        owner: dict[str, str] = {}
        for split_name in SPLITS:
            for sample in getattr(self, split_name):
                if sample.sample_id in seen_ids:
                    raise ValueError(f"Duplicate sample id {sample.sample_id}")
                seen_ids.add(sample.sample_id)
                previous = owner.setdefault(sample.volume_id, split_name)
                if previous != split_name:
                    raise ValueError(
                        f"Volume {sample.volume_id} contributes to both '{previous}' and '{split_name}'"
                    )

    def all_samples(self) -> list[SliceSample]:
        return [*self.train, *self.validation, *self.test]

    def by_id(self) -> dict[str, SliceSample]:
        return {s.sample_id: s for s in self.all_samples()}

    def train_by_id(self) -> dict[str, SliceSample]:
        return {s.sample_id: s for s in self.train}


@dataclass(frozen=True)
class PoolState:
    """Disjoint labelled/unlabelled ids over the training slices."""
    labelled: tuple[str, ...]
    unlabelled: tuple[str, ...]
    cycle: int = 0
    n_init: int = 0

    def __post_init__(self):
        overlap = set(self.labelled) & set(self.unlabelled)
        if overlap:
            raise PoolError(f"Ids both labelled and unlabelled: {sorted(overlap)[:5]}")
        if len(set(self.labelled)) != len(self.labelled) or len(set(self.unlabelled)) != len(self.unlabelled):
            raise PoolError("Pool contains duplicate ids")

    @property
    def all_ids(self) -> set[str]:
        return set(self.labelled) | set(self.unlabelled)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def normalize_intensity(volume: VolumeRecord) -> VolumeRecord:
    """
    Clip intensities to the scan's 1st/99th percentiles and map them to [0, 1].

    A degenerate scan (p1 == p99) maps to all zeros.
    """
    if volume.intensities.size == 0:
        raise ValueError(f"Volume {volume.volume_id} has no voxels")

    data = volume.intensities.astype(np.float64)
    p1, p99 = percentile_bounds(data)
    if p99 <= p1:
        logger.debug(f"Volume {volume.volume_id} is constant, mapping to zeros")
        normalized = np.zeros_like(data)
    else:
        normalized = (np.clip(data, p1, p99) - p1) / (p99 - p1)

    return VolumeRecord(
        volume_id=volume.volume_id,
        intensities=normalized.astype(np.float32),
        labels=volume.labels,
        spacing=volume.spacing,
    )


def volume_to_slices(
    volume: VolumeRecord,
    target_spacing: float,
    target_size: Sequence[int],
) -> list[SliceSample]:
    """
    Resample to isotropic spacing, slice along the short axis and resize each slice.

    Intensities use linear interpolation, labels nearest-neighbour.
    The short axis is the one with the fewest voxels after resampling.
    """
    target_size = tuple(int(s) for s in target_size)
    if len(target_size) != 2 or min(target_size) < 1:
        raise ValueError(f"target_size must be two positive ints, got {target_size}")
    if target_spacing <= 0:
        raise ValueError(f"target_spacing must be > 0, got {target_spacing}")
    if min(volume.intensities.shape) < 1:
        raise ValueError(f"Volume {volume.volume_id} is empty: shape {volume.intensities.shape}")

    image = resample_volume(volume.intensities, volume.spacing, target_spacing, order=1)
    labels = resample_volume(volume.labels, volume.spacing, target_spacing, order=0)
    if min(image.shape) < 1:
        raise ValueError(f"Volume {volume.volume_id} has no slices after resampling")

    axis = int(np.argmin(image.shape))
    image = np.moveaxis(image, axis, 0)
    labels = np.moveaxis(labels, axis, 0)

    pixel_spacing = tuple(
        float(target_spacing * (n_in - 1) / (n_out - 1)) if n_out > 1 and n_in > 1 else float(target_spacing)
        for n_in, n_out in zip(image.shape[1:], target_size)
    )

    slices = []
    for z in range(image.shape[0]):
        plane = np.clip(resize_plane(image[z], target_size, order=1), 0.0, 1.0).astype(np.float32)
        mask = resize_plane(labels[z], target_size, order=0).astype(np.int64)
        slices.append(SliceSample(
            volume_id=volume.volume_id,
            slice_index=z,
            image=_read_only(plane),
            mask=_read_only(mask),
            pixel_spacing=pixel_spacing,
            slice_thickness=float(target_spacing),
        ))
    return slices


def preprocess_volumes(
    volumes: dict[str, list[VolumeRecord]],
    class_count: int,
    target_spacing: float,
    target_size: Sequence[int],
) -> DatasetSplit:
    """Normalize and slice every volume of every split."""
    samples = {}
    for split_name in SPLITS:
        split_samples = []
        for volume in volumes.get(split_name, []):
            volume.check_classes(class_count)
            split_samples.extend(volume_to_slices(normalize_intensity(volume), target_spacing, target_size))
        samples[split_name] = tuple(split_samples)

    split = DatasetSplit(
        train=samples["train"],
        validation=samples["validation"],
        test=samples["test"],
        class_count=class_count,
    )
    logger.info(
        f"Dataset ready: {len(split.train)} train, {len(split.validation)} validation, "
        f"{len(split.test)} test slices ({class_count} classes)"
    )
    return split


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _split_counts(n_volumes: int, test_fraction: float, validation_fraction: float) -> tuple[int, int, int]:
    n_test = max(1, int(round(n_volumes * test_fraction)))
    n_val = max(1, int(round(n_volumes * validation_fraction)))
    while n_volumes - n_test - n_val < 1:
        if n_test >= n_val and n_test > 1:
            n_test -= 1
        elif n_val > 1:
            n_val -= 1
        else:
            raise ValueError(f"Cannot split {n_volumes} volumes into three non-empty splits")
    return n_volumes - n_test - n_val, n_val, n_test


def _synthetic_volume(
    rng: np.random.Generator,
    volume_id: str,
    depth: int,
    size: tuple[int, int],
    class_count: int,
) -> VolumeRecord:
    height, width = size
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    labels = np.zeros((depth, height, width), dtype=np.int64)

    radius_scale = min(height, width) / np.sqrt(class_count - 1)
    for class_id in range(1, class_count):
        for _ in range(int(rng.integers(1, 3))):
            r0 = rng.uniform(0.12, 0.22) * radius_scale
            cy = rng.uniform(0.3, 0.7) * height
            cx = rng.uniform(0.3, 0.7) * width
            drift_y, drift_x = rng.uniform(-0.1, 0.1, size=2) * np.array([height, width])
            elongation = rng.uniform(0.8, 1.25)
            for z in range(depth):
                t = z / max(depth - 1, 1)
                radius = r0 * (0.6 + 0.4 * np.sin(np.pi * t))
                centre_y = cy + drift_y * (t - 0.5)
                centre_x = cx + drift_x * (t - 0.5)
                inside = (((yy - centre_y) / (radius * elongation)) ** 2
                          + ((xx - centre_x) / (radius / elongation)) ** 2) <= 1.0
                labels[z][inside] = class_id

    bias = rng.uniform(-0.5, 0.5)
    contrast = rng.uniform(0.8, 1.2)
    class_levels = np.concatenate([[0.0], np.arange(1, class_count) * rng.uniform(0.6, 1.0, class_count - 1)])
    image = bias + contrast * class_levels[labels]
    image = ndimage.gaussian_filter(image, sigma=(0.0, 1.0, 1.0))
    image = image + rng.normal(0.0, 0.08, size=image.shape)

    return VolumeRecord(
        volume_id=volume_id,
        intensities=image.astype(np.float32),
        labels=labels,
        spacing=(1.0, 1.0, 1.0),
    )


def generate_synthetic_volumes(
    seed: int,
    n_volumes: int,
    slices_per_volume: int,
    size: Sequence[int],
    class_count: int,
    test_fraction: float = 0.2,
    validation_fraction: float = 0.1,
) -> dict[str, list[VolumeRecord]]:
    """
    Raw synthetic volumes assigned to volume-disjoint splits.

    Each volume stacks slices with 1-2 smooth blobs per foreground class that
    drift and swell slowly along the stack, over a per-volume intensity bias
    and contrast, so slices of one volume are strongly correlated.
    """
    size = tuple(int(s) for s in size)
    if n_volumes < 3:
        raise ValueError(f"n_volumes must be >= 3 to populate all splits, got {n_volumes}")
    if slices_per_volume < 1:
        raise ValueError(f"slices_per_volume must be >= 1, got {slices_per_volume}")
    if len(size) != 2 or min(size) < 4:
        raise ValueError(f"size must be (H, W) with H, W >= 4, got {size}")
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")

    rng = np.random.default_rng(seed)
    volumes = [
        _synthetic_volume(rng, f"vol{i:03d}", slices_per_volume, size, class_count)
        for i in range(n_volumes)
    ]
    order = rng.permutation(n_volumes)
    n_train, n_val, _ = _split_counts(n_volumes, test_fraction, validation_fraction)

    assigned = {
        "train": sorted(order[:n_train].tolist()),
        "validation": sorted(order[n_train:n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val:].tolist()),
    }
    return {name: [volumes[i] for i in indices] for name, indices in assigned.items()}


def generate_synthetic_dataset(
    seed: int,
    n_volumes: int,
    slices_per_volume: int,
    size: Sequence[int],
    class_count: int,
    test_fraction: float = 0.2,
    validation_fraction: float = 0.1,
) -> DatasetSplit:
    """Deterministic synthetic dataset, preprocessed like real scans."""
    volumes = generate_synthetic_volumes(
        seed, n_volumes, slices_per_volume, size, class_count, test_fraction, validation_fraction,
    )
    return preprocess_volumes(volumes, class_count, target_spacing=1.0, target_size=size)


# ---------------------------------------------------------------------------
# On-disk layout: <root>/<split>/<volume_id>/{image.npy, label.npy, meta.json}
# ---------------------------------------------------------------------------

def write_volumes(root: Union[str, Path], volumes: dict[str, list[VolumeRecord]], class_count: int) -> Path:
    """Write volumes in the dataset root layout."""
    root = Path(root)
    for split_name in SPLITS:
        for volume in volumes.get(split_name, []):
            volume_dir = root / split_name / volume.volume_id
            volume_dir.mkdir(parents=True, exist_ok=True)
            np.save(volume_dir / "image.npy", np.asarray(volume.intensities))
            np.save(volume_dir / "label.npy", np.asarray(volume.labels))
            meta = {"spacing": list(volume.spacing), "class_count": class_count}
            (volume_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    logger.info(f"Wrote {sum(len(v) for v in volumes.values())} volumes to {root}")
    return root


def read_volumes(root: Union[str, Path]) -> tuple[dict[str, list[VolumeRecord]], int]:
    """
    Read a dataset root.

    Returns:
        Tuple of (volumes per split, class_count)
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset root does not exist: {root}")

    volumes: dict[str, list[VolumeRecord]] = {}
    class_counts = set()
    for split_name in SPLITS:
        split_dir = root / split_name
        records = []
        if split_dir.is_dir():
            for volume_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                meta = json.loads((volume_dir / "meta.json").read_text())
                class_counts.add(int(meta["class_count"]))
                records.append(VolumeRecord(
                    volume_id=volume_dir.name,
                    intensities=np.load(volume_dir / "image.npy"),
                    labels=np.load(volume_dir / "label.npy"),
                    spacing=tuple(float(s) for s in meta["spacing"]),
                ))
        volumes[split_name] = records

    if not class_counts:
        raise FileNotFoundError(f"No volumes found under {root}")
    if len(class_counts) != 1:
        raise ValueError(f"Volumes under {root} disagree on class_count: {sorted(class_counts)}")
    return volumes, class_counts.pop()


def read_nifti_volume(image_path: Union[str, Path], label_path: Union[str, Path], volume_id: Optional[str] = None) -> VolumeRecord:
    """Read a NIfTI image/label pair (requires nibabel)."""
    import nibabel as nib

    image = nib.load(str(image_path))
    label = nib.load(str(label_path))
    zooms = tuple(float(z) for z in image.header.get_zooms()[:3])
    return VolumeRecord(
        volume_id=volume_id or Path(image_path).name.split(".")[0],
        intensities=np.asarray(image.get_fdata(), dtype=np.float32),
        labels=np.rint(np.asarray(label.get_fdata())).astype(np.int64),
        spacing=zooms,
    )


def load_dataset(cfg: DatasetConfig, data_root: str = "") -> DatasetSplit:
    """Build the dataset described by a DatasetConfig."""
    if cfg.source == "synthetic":
        volumes = generate_synthetic_volumes(
            cfg.seed, cfg.n_volumes, cfg.slices_per_volume, cfg.size, cfg.class_count,
            cfg.test_fraction, cfg.validation_fraction,
        )
        class_count = cfg.class_count
    else:
        root = cfg.root or data_root
        if not root:
            raise FileNotFoundError("No dataset root: set dataset.root or ACTIVE_SEG_DATA_ROOT")
        volumes, class_count = read_volumes(root)
        if class_count != cfg.class_count:
            raise ValueError(f"Dataset at {root} has {class_count} classes, config expects {cfg.class_count}")

    return preprocess_volumes(volumes, class_count, cfg.target_spacing, cfg.input_size)


# ---------------------------------------------------------------------------
# Pool state and the simulated oracle
# ---------------------------------------------------------------------------

def init_pool(split: DatasetSplit, n_init: int, rng_seed: int) -> PoolState:
    """Draw the initial labelled set uniformly without replacement."""
    if n_init <= 0:
        raise ValueError(f"n_init must be > 0, got {n_init}")
    ids = [s.sample_id for s in split.train]
    if n_init > len(ids):
        raise ValueError(f"n_init={n_init} exceeds the {len(ids)} training slices")

    rng = np.random.default_rng(rng_seed)
    chosen = set(rng.choice(len(ids), size=n_init, replace=False).tolist())
    labelled = tuple(ids[i] for i in sorted(chosen))
    unlabelled = tuple(sid for i, sid in enumerate(ids) if i not in chosen)
    logger.info(f"Initial pool: {len(labelled)} labelled, {len(unlabelled)} unlabelled")
    return PoolState(labelled=labelled, unlabelled=unlabelled, cycle=0, n_init=n_init)


def oracle_annotate(pool: PoolState, queried: Iterable[str], budget: Optional[int] = None) -> PoolState:
    """
    Reveal the stored ground truth for queried ids by moving them to the labelled set.

    Raises:
        PoolError: duplicate, already labelled or unknown ids, or a wrong batch size
    """
    queried = list(queried)
    if not queried:
        raise PoolError("Empty annotation request")
    if len(set(queried)) != len(queried):
        raise PoolError(f"Duplicate ids in annotation request: {queried}")
    if budget is not None and len(queried) != budget:
        raise PoolError(f"Expected {budget} ids, got {len(queried)}")

    labelled = set(pool.labelled)
    unlabelled = set(pool.unlabelled)
    for sample_id in queried:
        if sample_id in labelled:
            raise PoolError(f"Sample {sample_id} is already labelled")
        if sample_id not in unlabelled:
            raise PoolError(f"Unknown sample {sample_id}")

    queried_set = set(queried)
    return PoolState(
        labelled=pool.labelled + tuple(queried),
        unlabelled=tuple(s for s in pool.unlabelled if s not in queried_set),
        cycle=pool.cycle + 1,
        n_init=pool.n_init,
    )


def labelled_samples(split: DatasetSplit, pool: PoolState) -> list[SliceSample]:
    """Training slices whose masks the oracle has revealed."""
    by_id = split.train_by_id()
    return [by_id[sid] for sid in pool.labelled]


def distinct_volumes(sample_ids: Iterable[str]) -> int:
    """Number of distinct source volumes among sample ids."""
    return len({sample_volume(sid) for sid in sample_ids})
