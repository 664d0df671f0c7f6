"""
Query strategies: random, top-k uncertainty, stochastic batches and core-set.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from .config import SelectionConfig
from .data_pipeline import PoolState
from .image_utils import derive_seed
from .uncertainty import ScoreTable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateBatch:
    """Ids chosen for annotation and where they came from."""
    sample_ids: tuple[str, ...]
    batch_score: Optional[float]
    batch_index: Optional[int] = None
    pool_size: Optional[int] = None
    strategy: str = ""
    mode: Optional[str] = None

    def __post_init__(self):
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError(f"Candidate batch has duplicate ids: {self.sample_ids}")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "ids": list(self.sample_ids),
            "batch_score": self.batch_score,
            "batch_index": self.batch_index,
            "q": self.pool_size,
            "mode": self.mode,
        }


def _unlabelled_ids(pool: Union[PoolState, Sequence[str]]) -> list[str]:
    return list(pool.unlabelled) if isinstance(pool, PoolState) else list(pool)


def _check_budget(n_available: int, budget: int) -> None:
    if budget < 1:
        raise ValueError(f"Budget must be >= 1, got {budget}")
    if n_available < budget:
        raise ValueError(f"Pool of {n_available} samples cannot fill a batch of {budget}")


def random_select(pool: Union[PoolState, Sequence[str]], budget: int, rng: np.random.Generator) -> CandidateBatch:
    """B ids uniformly without replacement; no batch score."""
    ids = _unlabelled_ids(pool)
    _check_budget(len(ids), budget)
    chosen = rng.choice(len(ids), size=budget, replace=False)
    return CandidateBatch(
        sample_ids=tuple(ids[i] for i in chosen),
        batch_score=None,
        strategy="random",
    )


def topk_select(scores: ScoreTable, budget: int) -> CandidateBatch:
    """The B highest scores; ties go to the smaller sample id."""
    _check_budget(len(scores), budget)
    ranked = sorted(scores.scores.items(), key=lambda item: (-item[1], item[0]))[:budget]
    return CandidateBatch(
        sample_ids=tuple(sample_id for sample_id, _ in ranked),
        batch_score=float(np.mean([score for _, score in ranked])),
        strategy="topk",
    )


def resolve_q(cfg: SelectionConfig, n_unlabelled: int) -> int:
    """Number of candidate batches for a pool of this size."""
    if cfg.pool_mode == "partition":
        return n_unlabelled // cfg.budget
    return int(cfg.q)


def build_stochastic_pool(
    unlabelled: Sequence[str],
    budget: int,
    mode: str,
    q: Union[int, str, None],
    rng: np.random.Generator,
) -> list[tuple[str, ...]]:
    """
    Random candidate batches.

    Partition: a random permutation of the pool cut into floor(|U| / B)
    disjoint batches; the |U| mod B leftover ids sit out this cycle.
    Resample: Q batches, each drawn without replacement, independently of
    one another, so ids may appear in several batches.
    """
    ids = list(unlabelled)
    _check_budget(len(ids), budget)

    if mode == "partition":
        n_batches = len(ids) // budget
        if q not in (None, "auto") and q != n_batches:
            raise ValueError(f"Partition mode fixes Q = floor({len(ids)}/{budget}) = {n_batches}, got Q={q}")
        order = rng.permutation(len(ids))
        return [
            tuple(ids[i] for i in order[j * budget:(j + 1) * budget])
            for j in range(n_batches)
        ]

    if mode == "resample":
        if not isinstance(q, (int, np.integer)) or isinstance(q, bool) or q < 1:
            raise ValueError(f"Resample mode needs an explicit Q >= 1, got {q!r}")
        return [
            tuple(ids[i] for i in rng.choice(len(ids), size=budget, replace=False))
            for _ in range(int(q))
        ]

    raise ValueError(f"Unknown pool mode '{mode}'")


def stochastic_batch_select(
    scores: ScoreTable,
    pool_batches: Sequence[Sequence[str]],
    mode: Optional[str] = None,
    tie_break: str = "lowest_batch_index",
) -> CandidateBatch:
    """
    Pick the candidate batch with the highest mean score.

    Ties go to the lowest batch index.
    """
    if tie_break != "lowest_batch_index":
        raise ValueError(f"Unsupported tie_break '{tie_break}'")
    if not pool_batches:
        raise ValueError("Empty stochastic pool")

    means = np.empty(len(pool_batches), dtype=np.float64)
    for index, batch in enumerate(pool_batches):
        try:
            means[index] = np.mean([scores[sample_id] for sample_id in batch])
        except KeyError as e:
            raise ValueError(f"No score for pooled sample {e.args[0]}") from None

    winner = int(np.argmax(means))
    return CandidateBatch(
        sample_ids=tuple(pool_batches[winner]),
        batch_score=float(means[winner]),
        batch_index=winner,
        pool_size=len(pool_batches),
        strategy="stochastic_batch",
        mode=mode,
    )


def coreset_select(
    labelled_feats: np.ndarray,
    unlabelled_feats: np.ndarray,
    budget: int,
    unlabelled_ids: Optional[Sequence[str]] = None,
) -> CandidateBatch:
    """
    k-center greedy over Euclidean features.

    Each pick is the unlabelled point farthest from its nearest covered point
    (labelled or already picked), ties going to the smallest id. Without
    labelled points the first pick is the point farthest from the unlabelled
    centroid. The batch score is the covering radius before the first pick.
    """
    unlabelled_feats = np.asarray(unlabelled_feats, dtype=np.float64)
    labelled_feats = np.asarray(labelled_feats, dtype=np.float64)
    if unlabelled_feats.ndim != 2:
        raise ValueError(f"Unlabelled features must be (N, D), got {unlabelled_feats.shape}")
    if labelled_feats.size == 0:
        labelled_feats = labelled_feats.reshape(0, unlabelled_feats.shape[1])
    if labelled_feats.ndim != 2 or labelled_feats.shape[1] != unlabelled_feats.shape[1]:
        raise ValueError(
            f"Feature dims differ: labelled {labelled_feats.shape[1]}, unlabelled {unlabelled_feats.shape[1]}"
        )
    if unlabelled_ids is None:
        unlabelled_ids = [str(i) for i in range(len(unlabelled_feats))]
    if len(unlabelled_ids) != len(unlabelled_feats):
        raise ValueError("One id per unlabelled feature vector is required")
    _check_budget(len(unlabelled_ids), budget)

    order = sorted(range(len(unlabelled_ids)), key=lambda i: unlabelled_ids[i])
    ids = [unlabelled_ids[i] for i in order]
    feats = unlabelled_feats[order]

    picks: list[int] = []
    if len(labelled_feats) == 0:
        centroid_dist = cdist(feats, feats.mean(axis=0, keepdims=True)).ravel()
        radius = float(centroid_dist.max())
        first = int(np.argmax(centroid_dist))
        picks.append(first)
        min_dist = cdist(feats, feats[first:first + 1]).ravel()
    else:
        min_dist = cdist(feats, labelled_feats).min(axis=1)
        radius = float(min_dist.max())

    while len(picks) < budget:
        candidates = min_dist.copy()
        candidates[picks] = -np.inf
        pick = int(np.argmax(candidates))
        picks.append(pick)
        min_dist = np.minimum(min_dist, cdist(feats, feats[pick:pick + 1]).ravel())

    return CandidateBatch(
        sample_ids=tuple(ids[i] for i in picks),
        batch_score=radius,
        strategy="coreset",
    )


def selection_rng(cfg: SelectionConfig, master_seed: int, cycle: int) -> np.random.Generator:
    """Random stream for one cycle's selection; `cfg.seed` offsets it from the run seed."""
    return np.random.default_rng(derive_seed(master_seed, cycle, "select", cfg.seed))


def select_batch(
    cfg: SelectionConfig,
    pool: Union[PoolState, Sequence[str]],
    rng: np.random.Generator,
    scores: Optional[ScoreTable] = None,
    labelled_feats: Optional[np.ndarray] = None,
    unlabelled_feats: Optional[np.ndarray] = None,
) -> CandidateBatch:
    """Dispatch to the configured strategy."""
    ids = _unlabelled_ids(pool)

    if cfg.strategy == "random":
        batch = random_select(ids, cfg.budget, rng)

    elif cfg.strategy == "topk":
        if scores is None:
            raise ValueError("Top-k selection needs a score table")
        scores.check_covers(ids)
        batch = topk_select(scores, cfg.budget)

    elif cfg.strategy == "stochastic_batch":
        if scores is None:
            raise ValueError("Stochastic batch selection needs a score table")
        scores.check_covers(ids)
        q = "auto" if cfg.pool_mode == "partition" else cfg.q
        pool_batches = build_stochastic_pool(ids, cfg.budget, cfg.pool_mode, q, rng)
        batch = stochastic_batch_select(scores, pool_batches, mode=cfg.pool_mode, tie_break=cfg.tie_break)

    elif cfg.strategy == "coreset":
        if labelled_feats is None or unlabelled_feats is None:
            raise ValueError("Core-set selection needs labelled and unlabelled features")
        batch = coreset_select(labelled_feats, unlabelled_feats, cfg.budget, ids)

    else:
        raise ValueError(f"Unknown strategy '{cfg.strategy}'")

    score_text = f"{batch.batch_score:.4g}" if batch.batch_score is not None else "n/a"
    logger.info(
        f"Selected {len(batch.sample_ids)} samples with {cfg.strategy} "
        f"(score {score_text}, Q={batch.pool_size}): {list(batch.sample_ids)}"
    )
    return batch
