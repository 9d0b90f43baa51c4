import math

import numpy as np
import pytest

from disenhcn.data import ObservedIndex, Record
from disenhcn.errors import DataError, ShapeError
from disenhcn.evaluator import (
    evaluate,
    evaluate_by_sparsity,
    metrics_from_ranks,
    popularity_baseline,
    rank_of_target,
    ranks_from_scores,
    record_ranks,
    sparsity_labels,
)
from disenhcn.hypergraph import build_equivalent_adjacencies, build_incidence
from disenhcn.model import FinalEmbeddings, final_embeddings, init_params
from disenhcn.schemas import ModelConfig


def one_context(activity_scores):
    """Embeddings for one user/location/time whose scores are ``activity_scores``."""
    zeros = np.zeros((1, 1))
    return FinalEmbeddings(
        P_L=zeros, P_T=zeros, P_A=np.ones((1, 1)), Q=zeros, R=zeros,
        S=np.asarray(activity_scores, dtype=float)[:, None],
    )


@pytest.fixture
def trained_like(tiny_bundle):
    cfg = ModelConfig(d=6)
    params = init_params(cfg, tiny_bundle.vocab, np.random.default_rng(4))
    return final_embeddings(params, build_equivalent_adjacencies(build_incidence(tiny_bundle)), cfg)


class TestRanks:
    @pytest.mark.parametrize("target,expected", [(0, 4), (1, 1), (2, 2), (3, 3)])
    def test_ties_go_to_smaller_index(self, target, expected):
        assert rank_of_target([0.1, 0.5, 0.5, 0.2], target) == expected

    def test_all_equal(self):
        assert rank_of_target(np.zeros(5), 4) == 5

    def test_target_out_of_range(self):
        with pytest.raises(ShapeError):
            rank_of_target([1.0, 2.0], 2)

    def test_block_matches_single(self, rng):
        scores = rng.integers(0, 4, size=(20, 7)).astype(float)
        targets = rng.integers(0, 7, size=20)
        expected = [rank_of_target(row, t) for row, t in zip(scores, targets)]
        assert ranks_from_scores(scores, targets).tolist() == expected

    @pytest.mark.parametrize("shift", [-3.5, 0.25, 1024.0])
    def test_shifting_every_score_keeps_ranks(self, rng, shift):
        # integer scores and dyadic shifts add exactly, so ties survive the shift
        scores = rng.integers(0, 4, size=(30, 6)).astype(float)
        targets = rng.integers(0, 6, size=30)
        np.testing.assert_array_equal(ranks_from_scores(scores + shift, targets), ranks_from_scores(scores, targets))
        assert [rank_of_target(row + shift, t) for row, t in zip(scores, targets)] == \
            ranks_from_scores(scores, targets).tolist()


class TestMetrics:
    def test_recall_and_ndcg(self):
        report = metrics_from_ranks([1, 3, 11], k=10)
        assert report.recall_at_k == pytest.approx(2 / 3)
        assert report.ndcg_at_k == pytest.approx(0.5)
        assert report.n_records == 3

    def test_single_hit_at_top(self):
        report = metrics_from_ranks([1], k=1)
        assert (report.recall_at_k, report.ndcg_at_k) == (1.0, 1.0)

    def test_monotone_in_k_and_bounded_by_recall(self, rng):
        ranks = rng.integers(1, 30, size=50)
        previous = 0.0
        for k in range(1, 30):
            report = metrics_from_ranks(ranks, k)
            assert report.recall_at_k >= previous
            assert report.ndcg_at_k <= report.recall_at_k
            previous = report.recall_at_k

    def test_order_independent(self, rng):
        ranks = rng.integers(1, 12, size=101)
        a = metrics_from_ranks(ranks, 5)
        b = metrics_from_ranks(ranks[::-1], 5)
        assert (a.recall_at_k, a.ndcg_at_k) == (b.recall_at_k, b.ndcg_at_k)

    def test_empty(self):
        with pytest.raises(DataError):
            metrics_from_ranks([], 10)

    def test_json_layout(self):
        payload = metrics_from_ranks([2], k=10).to_json_dict()
        assert set(payload) == {"k", "recall", "ndcg", "n_records"}
        assert payload["ndcg"] == pytest.approx(1 / math.log2(3))


class TestEvaluate:
    def test_exclusion_removes_other_observed_activities(self):
        emb = one_context([3.0, 2.0, 1.0])
        record = [Record(0, 0, 0, 1)]
        assert evaluate(emb, record, k=1).recall_at_k == 0.0
        train = ObservedIndex.build([Record(0, 0, 0, 0), Record(0, 0, 0, 1)])
        report = evaluate(emb, record, k=1, exclude=train, keep_ranks=True)
        assert report.per_record_ranks == [1]

    def test_blocks_do_not_change_ranks(self, trained_like, tiny_bundle):
        records = tiny_bundle.all_records()
        assert record_ranks(trained_like, records, block_size=2).tolist() == record_ranks(trained_like, records).tolist()

    def test_ranks_kept_on_request(self, trained_like, tiny_bundle):
        assert evaluate(trained_like, tiny_bundle.test).per_record_ranks is None
        assert len(evaluate(trained_like, tiny_bundle.test, keep_ranks=True).per_record_ranks) == 3

    def test_full_ranking_k_covers_everything(self, trained_like, tiny_bundle):
        assert evaluate(trained_like, tiny_bundle.test, k=6).recall_at_k == 1.0

    def test_empty_records(self, trained_like):
        with pytest.raises(DataError):
            evaluate(trained_like, [])


class TestPopularity:
    def test_ranks_by_training_frequency(self, tiny_bundle):
        # counts 3,3,3,2,2,2: test targets a5, a2, a0 rank 6, 3, 1
        report = popularity_baseline(tiny_bundle, k=3)
        assert report.recall_at_k == pytest.approx(2 / 3)
        assert report.ndcg_at_k == pytest.approx(0.5)

    def test_empty_train(self, tiny_bundle):
        bundle = type(tiny_bundle)(vocab=tiny_bundle.vocab, train=[], valid=[], test=tiny_bundle.test)
        with pytest.raises(DataError):
            popularity_baseline(bundle)


class TestSparsity:
    def test_labels(self):
        assert sparsity_labels((5, 20)) == ["<5", "5-19", ">=20"]

    def test_groups_partition_the_records(self, trained_like, tiny_bundle):
        groups = evaluate_by_sparsity(trained_like, tiny_bundle, k=10, edges=(3,))
        assert [label for label, _ in groups] == ["<3", ">=3"]
        assert [r.n_records for _, r in groups] == [1, 2]

    def test_empty_groups_skipped(self, trained_like, tiny_bundle):
        groups = evaluate_by_sparsity(trained_like, tiny_bundle)
        assert [label for label, _ in groups] == ["<5"]
