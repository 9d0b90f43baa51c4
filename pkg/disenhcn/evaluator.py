"""Full-ranking evaluation: Recall@K and NDCG@K over every activity."""
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from disenhcn.data import DatasetBundle, ObservedIndex, Record, user_record_counts
from disenhcn.errors import DataError, ShapeError
from disenhcn.model import FinalEmbeddings
from disenhcn.schemas import MetricsReport

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
SPARSITY_EDGES = (5, 20)


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1-based rank; ties go to the smaller activity index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= target < len(scores):
        raise ShapeError(f"target {target} outside {len(scores)} candidates")
    s = scores[target]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero(scores[:target] == s))


def ranks_from_scores(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise `rank_of_target` for an (n x N_A) score block."""
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    s = scores[rows, targets][:, None]
    before = np.arange(scores.shape[1])[None, :] < targets[:, None]
    return 1 + np.count_nonzero(scores > s, axis=1) + np.count_nonzero((scores == s) & before, axis=1)


def metrics_from_ranks(ranks: np.ndarray, k: int, keep_ranks: bool = False) -> MetricsReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if not len(ranks):
        raise DataError("cannot evaluate an empty record set")
    hit = ranks <= k
    gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    n = len(ranks)
    # fsum keeps the means independent of record order
    return MetricsReport(
        recall_at_k=math.fsum(hit.astype(np.float64)) / n,
        ndcg_at_k=math.fsum(gains) / n,
        k=k,
        n_records=n,
        per_record_ranks=ranks.tolist() if keep_ranks else None,
    )


def _excluded_mask(exclude: ObservedIndex, block: np.ndarray, n_activities: int) -> np.ndarray:
    mask = np.zeros((len(block), n_activities), dtype=bool)
    for i, (u, l, t, a) in enumerate(block.tolist()):
        for other in exclude.activities((u, l, t)):
            if other != a:
                mask[i, other] = True
    return mask


def record_ranks(
    emb: FinalEmbeddings,
    records: Sequence[Record],
    exclude: Optional[ObservedIndex] = None,
    block_size: int = BLOCK_SIZE,
) -> np.ndarray:
    records = np.asarray(records, dtype=np.int64).reshape(-1, 4)
    ranks = np.empty(len(records), dtype=np.int64)
    for start in range(0, len(records), block_size):
        block = records[start:start + block_size]
        scores = emb.score_contexts(block[:, 0], block[:, 1], block[:, 2])
        if exclude is not None:
            scores[_excluded_mask(exclude, block, emb.n_activities)] = -np.inf
        ranks[start:start + len(block)] = ranks_from_scores(scores, block[:, 3])
    return ranks


def evaluate(
    emb: FinalEmbeddings,
    records: Sequence[Record],
    k: int = 10,
    exclude: Optional[ObservedIndex] = None,
    keep_ranks: bool = False,
) -> MetricsReport:
    """Rank every activity for each record's (u, l, t) and average the hits.

    ``exclude`` removes other activities observed with the same context
    (typically the training index) from the candidates.
    """
    if not len(records):
        raise DataError("cannot evaluate an empty record set")
    report = metrics_from_ranks(record_ranks(emb, records, exclude), k, keep_ranks)
    logger.debug("Recall@%d=%.4f NDCG@%d=%.4f over %d records", k, report.recall_at_k, k, report.ndcg_at_k,
                 report.n_records)
    return report


def popularity_baseline(bundle: DatasetBundle, k: int = 10, records: Sequence[Record] = None) -> MetricsReport:
    """Rank activities by training frequency for every test record."""
    if not bundle.train:
        raise DataError("popularity baseline needs a non-empty training set")
    records = bundle.test if records is None else records
    if not records:
        raise DataError("cannot evaluate an empty record set")
    counts = np.bincount([r.a for r in bundle.train], minlength=bundle.vocab.n_activities).astype(np.float64)
    targets = np.asarray([r.a for r in records], dtype=np.int64)
    ranks = np.empty(len(targets), dtype=np.int64)
    for start in range(0, len(targets), BLOCK_SIZE):
        chunk = targets[start:start + BLOCK_SIZE]
        ranks[start:start + len(chunk)] = ranks_from_scores(np.tile(counts, (len(chunk), 1)), chunk)
    return metrics_from_ranks(ranks, k)


def sparsity_labels(edges: Sequence[int]) -> List[str]:
    labels = [f"<{edges[0]}"]
    labels += [f"{lo}-{hi - 1}" for lo, hi in zip(edges[:-1], edges[1:])]
    labels.append(f">={edges[-1]}")
    return labels


def evaluate_by_sparsity(
    emb: FinalEmbeddings,
    bundle: DatasetBundle,
    k: int = 10,
    edges: Sequence[int] = SPARSITY_EDGES,
    records: Sequence[Record] = None,
) -> List[Tuple[str, MetricsReport]]:
    """Metrics per group of users binned by their number of training records."""
    edges = sorted(edges)
    records = bundle.test if records is None else records
    counts = user_record_counts(bundle)
    groups = np.digitize([counts[r.u] for r in records], edges)

    results = []
    for g, label in enumerate(sparsity_labels(edges)):
        members = [r for r, group in zip(records, groups) if group == g]
        if members:
            results.append((label, evaluate(emb, members, k)))
    return results
