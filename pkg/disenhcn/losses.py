"""Pairwise ranking loss, L2 penalty and distance-correlation independence loss."""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict

import numpy as np

from disenhcn.autodiff import Node, Tape
from disenhcn.errors import DataError
from disenhcn.model import ForwardResult
from disenhcn.schemas import ASPECTS, L2Scope, TrainConfig

logger = logging.getLogger(__name__)

DCOR_FLOOR = 1e-10

EMBEDDING_TABLES = ("P0", "Q0", "R0", "S0")


@dataclass
class PairwiseBatch:
    """Aligned arrays: one (u, l, t, positive, negative) tuple per row."""

    users: np.ndarray
    locations: np.ndarray
    times: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        n = len(self.users)
        if any(len(x) != n for x in (self.locations, self.times, self.positives, self.negatives)):
            raise DataError("pairwise batch arrays differ in length")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def unique_users(self) -> np.ndarray:
        return np.unique(self.users)


@dataclass
class LossBreakdown:
    bpr: float
    l2: float
    independence: float
    total: float
    root: Node = None


def batch_scores(tape: Tape, result: ForwardResult, users, locations, times, activities) -> Node:
    """n x 1 column of predicted scores for aligned index arrays."""
    columns = []
    for s, index in zip(ASPECTS, (locations, times, activities)):
        user_rows = tape.row_select(result.users[s], users)
        entity_rows = tape.row_select(result.entities[s], index)
        columns.append(tape.hadamard_dense(user_rows, entity_rows))
    c = columns[0].shape[1]
    ones = tape.constant(np.ones((c, 1)))
    total = tape.add(tape.add(columns[0], columns[1]), columns[2])
    return tape.matmul(total, ones)


def bpr_loss(tape: Tape, pos_scores: Node, neg_scores: Node) -> Node:
    if pos_scores.shape[0] == 0:
        raise DataError("BPR loss over an empty batch")
    return tape.mean_all(tape.sigmoid_logloss(tape.sub(pos_scores, neg_scores)))


def _squared_norm(tape: Tape, x: Node) -> Node:
    return tape.sum_all(tape.square(x))


def l2_term(tape: Tape, leaves: Dict[str, Node], batch: PairwiseBatch, scope: L2Scope = L2Scope.TOUCHED) -> Node:
    """Squared layer-0 embeddings plus every non-embedding parameter, over batch size.

    With ``scope=touched`` only the rows of users and entities present in the
    batch count.
    """
    if scope == L2Scope.TOUCHED:
        touched = {
            "P0": batch.unique_users,
            "Q0": np.unique(batch.locations),
            "R0": np.unique(batch.times),
            "S0": np.unique(np.concatenate([batch.positives, batch.negatives])),
        }
        terms = [_squared_norm(tape, tape.row_select(leaves[name], rows)) for name, rows in touched.items()]
    else:
        terms = [_squared_norm(tape, leaves[name]) for name in EMBEDDING_TABLES]
    terms += [_squared_norm(tape, node) for name, node in leaves.items() if name not in EMBEDDING_TABLES]

    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return tape.scale(total, 1.0 / max(len(batch), 1))


def _centered_distances(tape: Tape, x: Node) -> Node:
    return tape.double_center(tape.sqrt_eps(tape.pairwise_sq_dists(x)))


def distance_correlation(tape: Tape, x: Node, y: Node) -> Node:
    """Sample distance correlation between the rows of x and y, in [0, 1]."""
    n = x.shape[0]
    if n < 2 or y.shape[0] != n:
        raise DataError(f"distance correlation needs two samples of equal size >= 2, got {n} and {y.shape[0]}")
    a = _centered_distances(tape, x)
    b = _centered_distances(tape, y)

    dcov2 = tape.clip(tape.mean_all(tape.hadamard_dense(a, b)), lo=0.0)
    dvar_x = tape.clip(tape.mean_all(tape.square(a)), lo=0.0)
    dvar_y = tape.clip(tape.mean_all(tape.square(b)), lo=0.0)
    # A sample whose centred distances sit at the ε level is constant.
    if min(dvar_x.item(), dvar_y.item()) < DCOR_FLOOR ** 2:
        return tape.constant(np.zeros((1, 1)))
    denominator = tape.sqrt(tape.sqrt(tape.hadamard_dense(dvar_x, dvar_y)))
    if denominator.item() < DCOR_FLOOR:
        return tape.constant(np.zeros((1, 1)))
    return tape.clip(tape.div(tape.sqrt(dcov2), denominator), 0.0, 1.0)


def independence_loss(tape: Tape, chunks: Dict, users) -> Node:
    """Sum of pairwise distance correlations between the aspect chunks of ``users``."""
    users = np.asarray(users, dtype=np.int64)
    if len(users) < 2:
        raise DataError("independence loss needs at least two distinct users")
    rows = {s: tape.row_select(chunks[s], users) for s in ASPECTS}
    total = None
    for s1, s2 in combinations(ASPECTS, 2):
        term = distance_correlation(tape, rows[s1], rows[s2])
        total = term if total is None else tape.add(total, term)
    return total


def total_loss(tape: Tape, batch: PairwiseBatch, result: ForwardResult, cfg: TrainConfig) -> LossBreakdown:
    pos = batch_scores(tape, result, batch.users, batch.locations, batch.times, batch.positives)
    neg = batch_scores(tape, result, batch.users, batch.locations, batch.times, batch.negatives)
    bpr = bpr_loss(tape, pos, neg)
    l2 = l2_term(tape, result.leaves, batch, cfg.l2_scope)

    unique_users = batch.unique_users
    if len(unique_users) >= 2:
        ind = independence_loss(tape, result.users, unique_users)
    else:
        logger.debug("Batch has a single user; independence term skipped")
        ind = tape.constant(np.zeros((1, 1)))

    total = tape.add(tape.add(bpr, tape.scale(l2, cfg.l2_lambda)), tape.scale(ind, cfg.gamma))
    return LossBreakdown(bpr=bpr.item(), l2=l2.item(), independence=ind.item(), total=total.item(), root=total)
