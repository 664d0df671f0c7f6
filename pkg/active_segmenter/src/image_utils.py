"""
Array conversion utilities.
Handles resampling, resizing and rotation of volumes and image planes,
plus stable seeds and digests shared by the pipeline and the results store.
"""

import hashlib
import json
from typing import Sequence

import numpy as np
from scipy import ndimage


def percentile_bounds(values: np.ndarray, low: float = 1.0, high: float = 99.0) -> tuple[float, float]:
    """Per-array percentiles, linearly interpolated between order statistics."""
    lo, hi = np.percentile(values, [low, high])
    return float(lo), float(hi)


def resampled_length(n: int, spacing: float, target_spacing: float) -> int:
    """Samples along an axis after resampling: floor(physical extent / target spacing) + 1."""
    return int(np.floor((n - 1) * spacing / target_spacing + 1e-9)) + 1


def resample_volume(
    array: np.ndarray,
    spacing: Sequence[float],
    target_spacing: float,
    order: int,
) -> np.ndarray:
    """
    Resample a volume to isotropic spacing.

    Output voxel i along an axis sits at physical position i * target_spacing,
    so the first voxel is kept and the extent is truncated, never padded.

    Args:
        array: 3D array
        spacing: Voxel spacing per axis (mm)
        target_spacing: Isotropic output spacing (mm)
        order: 1 for intensities, 0 for labels
    """
    shape = tuple(resampled_length(n, s, target_spacing) for n, s in zip(array.shape, spacing))
    if shape == array.shape and all(s == target_spacing for s in spacing):
        return array.copy()

    scale = [target_spacing / s for s in spacing]
    return ndimage.affine_transform(
        array,
        scale,
        output_shape=shape,
        order=order,
        mode="nearest",
    )


def resize_plane(plane: np.ndarray, size: Sequence[int], order: int) -> np.ndarray:
    """
    Resize a 2D plane so corner pixel centres map onto corner pixel centres.

    No anti-aliasing is applied before downsampling.
    """
    size = tuple(int(s) for s in size)
    if plane.shape == size:
        return plane.copy()

    matrix = [(n_in - 1) / (n_out - 1) if n_out > 1 else 0.0 for n_in, n_out in zip(plane.shape, size)]
    return ndimage.affine_transform(
        plane,
        matrix,
        output_shape=size,
        order=order,
        mode="nearest",
    )


def rotate_plane(array: np.ndarray, angle: float, order: int, cval: float = 0.0) -> np.ndarray:
    """
    Rotate the last two axes of an array about the image centre.

    Args:
        array: (H, W) or (C, H, W) array
        angle: Degrees, counter-clockwise
        order: 1 for bilinear, 0 for nearest-neighbour
        cval: Fill value for pixels rotated in from outside the image
    """
    if angle == 0:
        return array.copy()

    axes = (array.ndim - 1, array.ndim - 2)
    return ndimage.rotate(
        array,
        angle,
        axes=axes,
        reshape=False,
        order=order,
        mode="constant",
        cval=cval,
    )


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from arbitrary keys (same value in every process)."""
    text = "/".join(str(k) for k in keys)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def canonical_json(payload) -> str:
    """JSON text with sorted keys and no whitespace."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
