#!/usr/bin/env python3
"""
Query strategy tests.
Tests random, top-k, stochastic-batch and core-set selection, including the
limit cases where stochastic batches reduce to random or top-k selection.
"""

import itertools
import logging

import numpy as np
from scipy.stats import chisquare

from . import conftest
from active_segmenter.src.config import SelectionConfig
from active_segmenter.src.data_pipeline import PoolState
from active_segmenter.src.selection import (
    CandidateBatch,
    build_stochastic_pool,
    coreset_select,
    random_select,
    resolve_q,
    select_batch,
    selection_rng,
    stochastic_batch_select,
    topk_select,
)
from active_segmenter.src.uncertainty import ScoreTable

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXAMPLE = ScoreTable("entropy", {"a": 0.9, "b": 0.7, "c": 0.2, "d": 0.1})


def _expect_error(call, message: str) -> None:
    try:
        call()
    except ValueError:
        return
    raise AssertionError(message)


def test_topk_examples():
    """Top-k picks the highest scores, ties by id"""
    assert topk_select(EXAMPLE, 2).sample_ids == ("a", "b")
    assert topk_select(EXAMPLE, 1).sample_ids == ("a",)
    tied = ScoreTable("entropy", {"d": 0.5, "b": 0.5, "c": 0.5, "a": 0.5})
    assert topk_select(tied, 3).sample_ids == ("a", "b", "c")
    assert abs(topk_select(EXAMPLE, 2).batch_score - 0.8) < 1e-12
    _expect_error(lambda: topk_select(EXAMPLE, 5), "oversized budget accepted")


def test_random_select():
    """Random selection is seeded and covers the pool when B = |U|"""
    ids = [f"s{i}" for i in range(12)]
    whole = random_select(ids, 12, np.random.default_rng(0))
    assert sorted(whole.sample_ids) == sorted(ids) and whole.batch_score is None
    assert random_select(ids, 4, np.random.default_rng(3)) == random_select(ids, 4, np.random.default_rng(3))
    _expect_error(lambda: random_select(ids, 13, np.random.default_rng(0)), "oversized budget accepted")


def test_partition_pool():
    """Partition mode: Q = floor(|U| / B) disjoint batches, leftovers sit out"""
    ids = [f"s{i:02d}" for i in range(25)]
    batches = build_stochastic_pool(ids, 10, "partition", "auto", np.random.default_rng(0))
    assert len(batches) == 2 and all(len(b) == 10 for b in batches)
    used = [i for b in batches for i in b]
    assert len(set(used)) == 20 and set(used) <= set(ids)
    assert resolve_q(SelectionConfig(budget=10), 25) == 2

    again = build_stochastic_pool(ids, 10, "partition", None, np.random.default_rng(0))
    assert again == batches
    _expect_error(lambda: build_stochastic_pool(ids, 10, "partition", 3, np.random.default_rng(0)),
                  "partition mode accepted a foreign Q")


def test_resample_pool():
    """Resample mode: Q batches of distinct ids, ids may repeat across batches"""
    ids = [f"s{i:02d}" for i in range(30)]
    batches = build_stochastic_pool(ids, 15, "resample", 100, np.random.default_rng(0))
    assert len(batches) == 100
    assert all(len(set(b)) == 15 for b in batches)
    counts = {}
    for batch in batches:
        for sample_id in batch:
            counts[sample_id] = counts.get(sample_id, 0) + 1
    assert max(counts.values()) > 1
    assert resolve_q(SelectionConfig(budget=15, pool_mode="resample", q=100), 30) == 100
    _expect_error(lambda: build_stochastic_pool(ids, 15, "resample", "auto", np.random.default_rng(0)),
                  "resample mode without Q accepted")


def test_stochastic_batch_examples():
    """Batch score is the mean member score; ties go to the lowest batch index"""
    chosen = stochastic_batch_select(EXAMPLE, [("a", "c"), ("b", "d")])
    assert set(chosen.sample_ids) == {"a", "c"}
    assert abs(chosen.batch_score - 0.55) < 1e-12 and chosen.batch_index == 0 and chosen.pool_size == 2

    single = stochastic_batch_select(EXAMPLE, [("c", "d")])
    assert single.sample_ids == ("c", "d")

    pairs = list(itertools.combinations("abcd", 2))
    assert set(stochastic_batch_select(EXAMPLE, pairs).sample_ids) == set(topk_select(EXAMPLE, 2).sample_ids)

    tied = stochastic_batch_select(EXAMPLE, [("b", "c"), ("a", "d"), ("d", "a")])
    assert tied.batch_index == 1

    _expect_error(lambda: stochastic_batch_select(EXAMPLE, [("a", "z")]), "missing score accepted")
    _expect_error(lambda: stochastic_batch_select(EXAMPLE, []), "empty pool accepted")


def test_all_subsets_equal_topk():
    """With every B-subset as a candidate, stochastic batches pick the top-k set"""
    ids = [f"s{i}" for i in range(6)]
    subsets = list(itertools.combinations(ids, 2))
    assert len(subsets) == 15

    rng = np.random.default_rng(0)
    for _ in range(50):
        scores = ScoreTable("entropy", dict(zip(ids, rng.uniform(0, 1, size=6).tolist())))
        assert set(stochastic_batch_select(scores, subsets).sample_ids) == set(topk_select(scores, 2).sample_ids)


def test_single_batch_is_random():
    """Q = 1 returns the drawn batch whatever the scores, uniformly over pairs"""
    ids = [f"s{i}" for i in range(10)]
    pairs = list(itertools.combinations(ids, 2))
    draws = 10_000
    rng = np.random.default_rng(0)
    counts = dict.fromkeys(pairs, 0)
    for _ in range(draws):
        batches = build_stochastic_pool(ids, 2, "resample", 1, rng)
        scores = ScoreTable("entropy", dict(zip(ids, rng.uniform(0, 1, size=10).tolist())))
        chosen = stochastic_batch_select(scores, batches)
        assert chosen.sample_ids == tuple(batches[0])
        counts[tuple(sorted(chosen.sample_ids))] += 1

    p = 1.0 / len(pairs)
    sigma = np.sqrt(draws * p * (1.0 - p))
    deviations = np.abs(np.array(list(counts.values())) - draws * p) / sigma
    p_value = chisquare(list(counts.values())).pvalue
    print(f"  {len(pairs)} pairs, max deviation {deviations.max():.2f} sigma, chi-square p = {p_value:.3f}")
    # About 0.12 of 45 pairs land past 3 sigma by chance
    assert int(np.sum(deviations > 3.0)) <= 2
    assert deviations.max() < 4.0
    assert p_value > 0.001


def test_affine_score_invariance():
    """Rescaling scores by a > 0 and shifting by b leaves the chosen batch unchanged"""
    ids = [f"s{i}" for i in range(40)]
    rng = np.random.default_rng(3)
    for _ in range(100):
        batches = build_stochastic_pool(ids, 4, "resample", 12, rng)
        raw = rng.uniform(0, 1, size=len(ids))
        a, b = float(rng.uniform(0.1, 10.0)), float(rng.uniform(-5.0, 5.0))
        base = stochastic_batch_select(ScoreTable("entropy", dict(zip(ids, raw.tolist()))), batches)
        moved = stochastic_batch_select(ScoreTable("entropy", dict(zip(ids, (a * raw + b).tolist()))), batches)
        assert moved.batch_index == base.batch_index
        assert moved.sample_ids == base.sample_ids


def _grouped_scores(rng: np.random.Generator) -> tuple[ScoreTable, dict]:
    scores = {}
    group_of = {}
    for group in range(10):
        level = 0.9 if group == 0 else 0.1 + 0.01 * group
        for member in range(10):
            sample_id = f"g{group}m{member}"
            scores[sample_id] = level + rng.uniform(0.0, 1e-3)
            group_of[sample_id] = group
    return ScoreTable("entropy", scores), group_of


def test_diversity_over_topk():
    """Stochastic batches cover at least two more groups than top-k when one group dominates"""
    rng = np.random.default_rng(0)
    cfg = SelectionConfig(strategy="stochastic_batch", budget=10)
    sb_groups, topk_groups = [], []
    for _ in range(200):
        scores, group_of = _grouped_scores(rng)
        pool = sorted(scores.scores)
        sb = select_batch(cfg, pool, rng, scores)
        topk = topk_select(scores, 10)
        sb_groups.append(len({group_of[i] for i in sb.sample_ids}))
        topk_groups.append(len({group_of[i] for i in topk.sample_ids}))

    oracle_rng = np.random.default_rng(1)
    groups = np.repeat(np.arange(10), 10)
    levels = np.where(groups == 0, 0.9, 0.1 + 0.01 * groups)
    oracle = []
    for _ in range(2000):
        order = oracle_rng.permutation(100)
        batch_scores = (levels + oracle_rng.uniform(0.0, 1e-3, size=100))[order].reshape(10, 10).mean(axis=1)
        winner = order.reshape(10, 10)[int(np.argmax(batch_scores))]
        oracle.append(len(set(groups[winner].tolist())))

    assert set(topk_groups) == {1}
    print(f"  mean groups: stochastic batch {np.mean(sb_groups):.2f} (oracle {np.mean(oracle):.2f}), "
          f"top-k {np.mean(topk_groups):.2f}")
    assert abs(np.mean(sb_groups) - np.mean(oracle)) < 0.5
    assert np.mean(sb_groups) - np.mean(topk_groups) >= 2.0


def test_coreset_examples():
    """k-center greedy on hand-checked 1D features"""
    labelled = np.array([[0.0]])
    unlabelled = np.array([[1.0], [5.0], [6.0]])
    ids = ["u1", "u5", "u6"]

    one = coreset_select(labelled, unlabelled, 1, ids)
    assert one.sample_ids == ("u6",) and one.batch_score == 6.0

    two = coreset_select(labelled, unlabelled, 2, ids)
    assert two.sample_ids == ("u6", "u1")

    same = coreset_select(np.zeros((2, 3)), np.zeros((5, 3)), 3, ["e", "d", "c", "b", "a"])
    assert same.sample_ids == ("a", "b", "c") and same.batch_score == 0.0

    bootstrap = coreset_select(np.zeros((0, 1)), np.array([[0.0], [1.0], [10.0]]), 2, ["x", "y", "z"])
    assert bootstrap.sample_ids == ("z", "x")

    _expect_error(lambda: coreset_select(np.zeros((1, 2)), unlabelled, 1, ids), "feature dims mismatch accepted")
    _expect_error(lambda: coreset_select(labelled, unlabelled, 1, ids[:2]), "id count mismatch accepted")


def test_select_batch_dispatch():
    """select_batch routes to each strategy and checks its inputs"""
    pool = PoolState(labelled=("l0",), unlabelled=("a", "b", "c", "d"))
    rng = np.random.default_rng(0)

    assert len(select_batch(SelectionConfig(strategy="random", budget=2), pool, rng).sample_ids) == 2
    assert select_batch(SelectionConfig(strategy="topk", budget=2), pool, rng, EXAMPLE).sample_ids == ("a", "b")

    sb = select_batch(SelectionConfig(strategy="stochastic_batch", budget=2), pool, rng, EXAMPLE)
    assert sb.pool_size == 2 and sb.mode == "partition" and len(sb.sample_ids) == 2

    resampled = select_batch(
        SelectionConfig(strategy="stochastic_batch", budget=2, pool_mode="resample", q=6), pool, rng, EXAMPLE,
    )
    assert resampled.pool_size == 6 and resampled.mode == "resample"

    core = select_batch(
        SelectionConfig(strategy="coreset", budget=1), pool, rng,
        labelled_feats=np.zeros((1, 2)), unlabelled_feats=np.array([[0.0, 1.0], [3.0, 4.0], [1.0, 0.0], [0.0, 0.0]]),
    )
    assert core.sample_ids == ("b",)

    partial = ScoreTable("entropy", {"a": 0.1, "b": 0.2})
    _expect_error(lambda: select_batch(SelectionConfig(strategy="topk", budget=2), pool, rng), "missing scores accepted")
    _expect_error(lambda: select_batch(SelectionConfig(strategy="topk", budget=2), pool, rng, partial),
                  "partial score table accepted")
    _expect_error(lambda: select_batch(SelectionConfig(strategy="coreset", budget=1), pool, rng),
                  "core-set without features accepted")


def test_selection_rng_and_tie_break():
    """The selection stream is fixed by (run seed, cycle, selection seed); only index ties are supported"""
    cfg = SelectionConfig()
    first = selection_rng(cfg, 7, 2).integers(0, 2**31, size=8)
    np.testing.assert_array_equal(first, selection_rng(cfg, 7, 2).integers(0, 2**31, size=8))
    assert not np.array_equal(first, selection_rng(cfg, 7, 3).integers(0, 2**31, size=8))
    assert not np.array_equal(first, selection_rng(SelectionConfig(seed=1), 7, 2).integers(0, 2**31, size=8))

    tied = ScoreTable("entropy", {"a": 0.5, "b": 0.5, "c": 0.5, "d": 0.5})
    assert stochastic_batch_select(tied, [("c", "d"), ("a", "b")]).batch_index == 0
    _expect_error(lambda: stochastic_batch_select(tied, [("a", "b")], tie_break="random"),
                  "unknown tie_break accepted")
    try:
        SelectionConfig(tie_break="random")
    except Exception as e:
        assert "tie_break" in str(e)
    else:
        raise AssertionError("config accepted an unknown tie_break")


def test_candidate_batch():
    """Candidate batches reject duplicates and serialize their provenance"""
    _expect_error(lambda: CandidateBatch(("a", "a"), 0.5), "duplicate ids accepted")
    record = CandidateBatch(("a", "b"), 0.5, 3, 10, "stochastic_batch", "partition").to_dict()
    assert record == {
        "strategy": "stochastic_batch", "ids": ["a", "b"], "batch_score": 0.5,
        "batch_index": 3, "q": 10, "mode": "partition",
    }


def main():
    return conftest.run_suite("SELECTION TESTS", [
        test_topk_examples,
        test_random_select,
        test_partition_pool,
        test_resample_pool,
        test_stochastic_batch_examples,
        test_all_subsets_equal_topk,
        test_single_batch_is_random,
        test_affine_score_invariance,
        test_diversity_over_topk,
        test_coreset_examples,
        test_select_batch_dispatch,
        test_selection_rng_and_tie_break,
        test_candidate_batch,
    ])


if __name__ == "__main__":
    success = main()
    exit(0 if success else 1)
