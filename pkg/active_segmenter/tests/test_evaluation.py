#!/usr/bin/env python3
"""
Evaluation tests.
Tests DSC and HD95 against brute-force oracles, slice/volume evaluation and
the paired permutation test.
"""

import logging

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from . import conftest
from active_segmenter.src.evaluation import (
    boundary,
    dsc,
    evaluate_model,
    evaluate_predictions,
    find_record,
    hd95,
    paired_permutation_test,
)

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def _dsc_oracle(pred: np.ndarray, target: np.ndarray, class_id: int) -> float:
    x = {tuple(p) for p in np.argwhere(pred == class_id)}
    y = {tuple(p) for p in np.argwhere(target == class_id)}
    if not x and not y:
        return 100.0
    return 200.0 * len(x & y) / (len(x) + len(y))


def _boundary_oracle(mask: np.ndarray) -> list[tuple[int, int]]:
    height, width = mask.shape
    points = []
    for i in range(height):
        for j in range(width):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < height and 0 <= nj < width) or not mask[ni, nj]:
                    points.append((i, j))
                    break
    return points


def _hd95_oracle(x: np.ndarray, y: np.ndarray, spacing) -> float:
    def directed(a, b):
        edge = np.array(_boundary_oracle(a), dtype=np.float64) * spacing
        others = np.argwhere(b).astype(np.float64) * spacing
        distances = np.sqrt(((edge[:, None, :] - others[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
        return float(np.percentile(distances, 95))
    return max(directed(x, y), directed(y, x))


def test_dsc_examples():
    """DSC hand cases: identical 100, disjoint 0, 2x2 overlap 66.67, both empty 100"""
    mask = np.array([[1, 1], [0, 0]])
    assert dsc(mask, mask, 1) == 100.0
    assert dsc(mask, 1 - mask, 1) == 0.0
    pred = np.array([[1, 0], [0, 0]])
    target = np.array([[1, 1], [0, 0]])
    assert abs(dsc(pred, target, 1) - 200.0 / 3.0) < 1e-12
    assert dsc(np.zeros((2, 2)), np.zeros((2, 2)), 1) == 100.0
    try:
        dsc(np.zeros((2, 2)), np.zeros((3, 3)), 1)
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")


def test_boundary():
    """Boundary pixels touch background across a face or the image border"""
    square = np.zeros((5, 5), dtype=bool)
    square[1:4, 1:4] = True
    ring = boundary(square)
    assert ring.sum() == 8 and not ring[2, 2]

    full = np.ones((4, 4), dtype=bool)
    assert boundary(full).sum() == 12


def test_hd95_examples():
    """HD95 hand cases: identical 0, one-pixel shift 1 mm, spacing scales, empty undefined"""
    x = np.zeros((12, 12), dtype=bool)
    x[4:8, 4:8] = True
    shifted = np.roll(x, 1, axis=1)
    assert hd95(x, x, (1.0, 1.0)) == 0.0
    assert abs(hd95(x, shifted, (1.0, 1.0)) - 1.0) < 1e-12
    assert abs(hd95(x, shifted, (1.0, 2.5)) - 2.5) < 1e-12
    assert hd95(x, np.zeros_like(x), (1.0, 1.0)) is None
    assert hd95(np.zeros_like(x), x, (1.0, 1.0)) is None


def test_metric_oracles():
    """100 random 16x16 mask pairs: DSC exact and HD95 within 1e-9 of brute force"""
    rng = np.random.default_rng(0)
    undefined = 0
    for trial in range(100):
        density = rng.uniform(0.02, 0.6)
        pred = (rng.uniform(size=(16, 16)) < density).astype(np.int64)
        target = (rng.uniform(size=(16, 16)) < density).astype(np.int64)
        if trial % 10 == 0:
            target[:] = 0
        spacing = (1.0, 1.0) if trial % 2 else tuple(rng.uniform(0.5, 2.0, size=2))

        assert dsc(pred, target, 1) == _dsc_oracle(pred, target, 1)
        value = hd95(pred == 1, target == 1, spacing)
        if not pred.any() or not target.any():
            assert value is None
            undefined += 1
            continue
        assert abs(value - _hd95_oracle(pred == 1, target == 1, np.asarray(spacing))) < 1e-9
    print(f"  {100 - undefined} defined HD95 pairs matched, {undefined} undefined")


def test_metric_symmetry_and_translation():
    """DSC and HD95 are symmetric, unchanged by a shared shift and HD95 never exceeds Hausdorff"""
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(50):
        pred = rng.uniform(size=(16, 16)) < rng.uniform(0.05, 0.5)
        target = rng.uniform(size=(16, 16)) < rng.uniform(0.05, 0.5)
        if not pred.any() or not target.any():
            continue
        spacing = tuple(rng.uniform(0.5, 2.0, size=2))

        assert dsc(pred, target, 1) == dsc(target, pred, 1)
        value = hd95(pred, target, spacing)
        assert value == hd95(target, pred, spacing)

        def placed(mask, dy, dx):
            canvas = np.zeros((32, 32), dtype=bool)
            canvas[dy:dy + 16, dx:dx + 16] = mask
            return canvas

        near = placed(pred, 2, 3), placed(target, 2, 3)
        far = placed(pred, 9, 11), placed(target, 9, 11)
        assert dsc(*near, 1) == dsc(*far, 1)
        assert abs(hd95(*near, spacing) - hd95(*far, spacing)) < 1e-9

        x = np.argwhere(pred) * np.asarray(spacing)
        y = np.argwhere(target) * np.asarray(spacing)
        hausdorff = max(directed_hausdorff(x, y)[0], directed_hausdorff(y, x)[0])
        assert value <= hausdorff + 1e-9
        checked += 1
    assert checked > 30


def test_volume_order_invariance():
    """Shuffling the evaluated slices (and so the volume order) leaves every mean unchanged"""
    split = conftest.tiny_dataset(n_volumes=6, slices=4, size=(16, 16))
    rng = np.random.default_rng(2)
    predictions = [
        np.where(rng.uniform(size=s.mask.shape) < 0.1, rng.integers(0, split.class_count, size=s.mask.shape), s.mask)
        for s in split.test
    ]
    base = evaluate_predictions(predictions, split.test, split.class_count)

    order = rng.permutation(len(split.test))
    shuffled = evaluate_predictions([predictions[i] for i in order], [split.test[i] for i in order], split.class_count)
    for record in base:
        other = find_record(shuffled, record.scope, record.metric)
        assert other.undefined_count == record.undefined_count
        if record.mean is None:
            assert other.mean is None
        else:
            assert abs(other.mean - record.mean) < 1e-9


def test_evaluate_perfect_predictor():
    """Ground-truth predictions give 100 DSC and 0 HD95"""
    split = conftest.tiny_dataset(n_volumes=6, slices=4, size=(16, 16))
    records = evaluate_predictions([s.mask for s in split.test], split.test, split.class_count)
    assert find_record(records, "3D", "dsc").mean == 100.0
    assert find_record(records, "2D", "dsc").mean == 100.0
    assert find_record(records, "3D", "hd95").mean == 0.0
    assert find_record(records, "3D", "hd95").undefined_count == 0
    assert {r.unit for r in records} == {"percent", "mm"}


def test_evaluate_background_predictor():
    """All-background predictions give 0 DSC and undefined HD95 for every volume"""
    split = conftest.tiny_dataset(n_volumes=6, slices=4, size=(16, 16))
    volumes = {s.volume_id for s in split.test}
    for volume_id in volumes:
        assert any(s.mask.any() for s in split.test if s.volume_id == volume_id)

    records = evaluate_predictions([np.zeros_like(s.mask) for s in split.test], split.test, split.class_count)
    assert find_record(records, "3D", "dsc").mean == 0.0
    hd = find_record(records, "3D", "hd95")
    assert hd.mean is None and hd.undefined_count == len(volumes)


def test_volume_metrics_use_slice_order_and_thickness():
    """3D metrics stack slices by index and measure across slices with the slice thickness"""
    masks = [np.zeros((6, 6), dtype=np.int64) for _ in range(3)]
    masks[1][2:4, 2:4] = 1
    target = [m.copy() for m in masks]
    pred = [np.zeros_like(m) for m in masks]
    pred[2][2:4, 2:4] = 1

    samples = [
        conftest.make_sample(np.zeros((6, 6)), t, volume_id="vol", slice_index=z)
        for z, t in enumerate(target)
    ]
    thick = [type(s)(s.volume_id, s.slice_index, s.image, s.mask, (1.0, 1.0), 2.0) for s in samples]
    order = [2, 0, 1]
    records = evaluate_predictions([pred[i] for i in order], [thick[i] for i in order], class_count=2)
    assert abs(find_record(records, "3D", "hd95").mean - 2.0) < 1e-12
    assert find_record(records, "3D", "dsc").mean == 0.0
    assert find_record(records, "2D", "hd95").undefined_count == 3


def test_single_volume_identity():
    """With one volume the 3D DSC is the DSC of the stacked masks"""
    rng = np.random.default_rng(3)
    target = (rng.uniform(size=(4, 10, 10)) < 0.3).astype(np.int64)
    pred = (rng.uniform(size=(4, 10, 10)) < 0.3).astype(np.int64)
    samples = [conftest.make_sample(np.zeros((10, 10)), target[z], slice_index=z) for z in range(4)]
    records = evaluate_predictions(list(pred), samples, class_count=2)
    assert find_record(records, "3D", "dsc").mean == dsc(pred, target, 1)
    assert abs(find_record(records, "3D", "hd95").mean - hd95(pred == 1, target == 1, (1.0, 1.0, 1.0))) < 1e-12


def test_evaluate_model():
    """evaluate_model predicts every sample and scores it"""
    class MaskModel:
        def __init__(self, samples):
            self.lookup = {s.image.tobytes(): s.mask for s in samples}

        def predict_masks(self, images, batch_size=32):
            return np.stack([self.lookup[np.asarray(i, dtype=np.float32).tobytes()] for i in images])

    split = conftest.tiny_dataset(n_volumes=6, slices=4, size=(16, 16))
    records = evaluate_model(MaskModel(split.test), split.test, split.class_count)
    assert find_record(records, "3D", "dsc").mean == 100.0
    try:
        find_record(records, "3D", "assd")
    except KeyError:
        pass
    else:
        raise AssertionError("unknown record found")


def test_paired_permutation_test():
    """Identical lists give p = 1; a large constant shift gives p near 1 / (n_perm + 1)"""
    rng = np.random.default_rng(0)
    a = rng.normal(70.0, 2.0, size=20)
    assert paired_permutation_test(a, a.copy()) == 1.0

    b = a - 10.0 + rng.normal(0.0, 0.1, size=20)
    n_perm = 10_000
    p = paired_permutation_test(a, b, n_perm=n_perm, rng=np.random.default_rng(1))
    print(f"  shifted lists: p = {p:.2e}")
    assert p <= 3 / (n_perm + 1)
    assert paired_permutation_test(a, b, n_perm, np.random.default_rng(1)) == p

    for bad in ((a, b[:5], n_perm), (a[:1], b[:1], n_perm), (a, b, 0)):
        try:
            paired_permutation_test(*bad)
        except ValueError:
            pass
        else:
            raise AssertionError("invalid permutation test input accepted")


def main():
    return conftest.run_suite("EVALUATION TESTS", [
        test_dsc_examples,
        test_boundary,
        test_hd95_examples,
        test_metric_oracles,
        test_metric_symmetry_and_translation,
        test_volume_order_invariance,
        test_evaluate_perfect_predictor,
        test_evaluate_background_predictor,
        test_volume_metrics_use_slice_order_and_thickness,
        test_single_volume_identity,
        test_evaluate_model,
        test_paired_permutation_test,
    ])


if __name__ == "__main__":
    success = main()
    exit(0 if success else 1)
