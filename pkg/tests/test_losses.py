import math

import numpy as np
import pytest

from disenhcn.autodiff import Tape, finite_diff_check
from disenhcn.errors import DataError
from disenhcn.hypergraph import build_equivalent_adjacencies, build_incidence
from disenhcn.losses import (
    PairwiseBatch,
    batch_scores,
    bpr_loss,
    distance_correlation,
    independence_loss,
    l2_term,
    total_loss,
)
from disenhcn.model import forward, init_params
from disenhcn.schemas import ASPECTS, L2Scope, ModelConfig, TrainConfig


def reference_dcor(x, y, eps=1e-10):
    n = len(x)

    def centered(z):
        d = [[math.sqrt(sum((z[i][k] - z[j][k]) ** 2 for k in range(len(z[i]))) + eps) for j in range(n)]
             for i in range(n)]
        row = [sum(d[i]) / n for i in range(n)]
        col = [sum(d[i][j] for i in range(n)) / n for j in range(n)]
        grand = sum(row) / n
        return [[d[i][j] - row[i] - col[j] + grand for j in range(n)] for i in range(n)]

    a, b = centered(x.tolist()), centered(y.tolist())
    mean = lambda f: sum(f(i, j) for i in range(n) for j in range(n)) / (n * n)
    dcov2 = max(mean(lambda i, j: a[i][j] * b[i][j]), 0.0)
    dvar_x = max(mean(lambda i, j: a[i][j] ** 2), 0.0)
    dvar_y = max(mean(lambda i, j: b[i][j] ** 2), 0.0)
    denominator = (dvar_x * dvar_y) ** 0.25
    if denominator < 1e-10:
        return 0.0
    return min(max(math.sqrt(dcov2) / denominator, 0.0), 1.0)


def dcor(x, y):
    tape = Tape()
    return distance_correlation(tape, tape.constant(x), tape.constant(y)).item()


def batch_from(records, n_activities):
    rows = np.asarray(records, dtype=np.int64)
    return PairwiseBatch(
        users=rows[:, 0], locations=rows[:, 1], times=rows[:, 2],
        positives=rows[:, 3], negatives=(rows[:, 3] + 1) % n_activities,
    )


class TestBpr:
    @pytest.mark.parametrize("margin,expected", [(0.0, math.log(2.0)), (math.log(3.0), math.log(4.0 / 3.0))])
    def test_values(self, margin, expected):
        tape = Tape()
        loss = bpr_loss(tape, tape.constant([[margin + 1.0]]), tape.constant([[1.0]]))
        assert loss.item() == pytest.approx(expected)

    def test_mean_over_batch(self):
        tape = Tape()
        loss = bpr_loss(tape, tape.constant([[0.0], [math.log(3.0)]]), tape.constant([[0.0], [0.0]]))
        assert loss.item() == pytest.approx((math.log(2.0) + math.log(4.0 / 3.0)) / 2)

    def test_empty_batch(self):
        tape = Tape()
        with pytest.raises(DataError):
            bpr_loss(tape, tape.constant(np.zeros((0, 1))), tape.constant(np.zeros((0, 1))))


class TestL2:
    def leaves(self, tape, first_user_row):
        p0 = np.zeros((3, 2))
        p0[0] = first_user_row
        p0[2] = [1.0, 0.0]
        return {
            "P0": tape.leaf(p0),
            "Q0": tape.leaf(np.zeros((2, 2))),
            "R0": tape.leaf(np.zeros((2, 2))),
            "S0": tape.leaf(np.zeros((4, 2))),
            "W_L": tape.leaf(np.zeros((2, 2))),
        }

    def test_touched_rows_over_batch_size(self):
        tape = Tape()
        batch = batch_from([(0, 0, 0, 0), (0, 1, 1, 1)], 4)
        value = l2_term(tape, self.leaves(tape, [3.0, 4.0]), batch).item()
        assert value == pytest.approx(25.0 / 2)

    def test_full_scope_counts_untouched_rows(self):
        tape = Tape()
        batch = batch_from([(0, 0, 0, 0), (0, 1, 1, 1)], 4)
        value = l2_term(tape, self.leaves(tape, [3.0, 4.0]), batch, L2Scope.FULL).item()
        assert value == pytest.approx(26.0 / 2)

    def test_non_embedding_parameters_always_count(self):
        tape = Tape()
        leaves = self.leaves(tape, [0.0, 0.0])
        leaves["W_L"] = tape.leaf(np.full((2, 2), 0.5))
        value = l2_term(tape, leaves, batch_from([(1, 0, 0, 0)], 4)).item()
        assert value == pytest.approx(1.0)

    def test_gradient_is_2x_over_n(self):
        tape = Tape()
        leaves = self.leaves(tape, [3.0, 4.0])
        tape.backward(l2_term(tape, leaves, batch_from([(0, 0, 0, 0), (0, 1, 1, 1)], 4)))
        assert leaves["P0"].grad[0].tolist() == [3.0, 4.0]
        assert leaves["P0"].grad[2].tolist() == [0.0, 0.0]


class TestDistanceCorrelation:
    def test_identical_samples(self, rng):
        x = rng.normal(size=(16, 3))
        assert dcor(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_sample_gives_zero(self, rng):
        assert dcor(rng.normal(size=(10, 2)), np.ones((10, 2))) == 0.0

    @pytest.mark.parametrize("fill", [0.1, 0.3, 0.7, 1.7, math.pi])
    def test_inexact_constants_give_zero(self, rng, fill):
        x = rng.normal(size=(64, 40))
        assert dcor(x, np.full((64, 40), fill)) == 0.0
        assert dcor(np.full((64, 40), fill), x) == 0.0

    def test_repeated_row_gives_zero(self, rng):
        x = rng.normal(size=(64, 40))
        assert dcor(x, np.tile(rng.normal(size=(1, 40)), (64, 1))) == 0.0

    def test_coincident_rows_have_zero_distance(self, rng):
        row = rng.normal(size=(1, 40))
        tape = Tape()
        d = tape.pairwise_sq_dists(tape.constant(np.vstack([row, row, row + 1.0])))
        assert d.value[0, 1] == d.value[1, 0] == 0.0
        assert d.value[0, 2] == pytest.approx(40.0)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            x = rng.normal(size=(n, 2))
            y = rng.normal(size=(n, 3))
            assert abs(dcor(x, y) - reference_dcor(x, y)) <= 1e-10

    def test_symmetric(self, rng):
        x, y = rng.normal(size=(12, 2)), rng.normal(size=(12, 4))
        assert dcor(x, y) == pytest.approx(dcor(y, x), abs=1e-12)

    def test_invariances(self, rng):
        x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        base = dcor(x, y)
        rotation, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        assert dcor(x + 7.0, y) == pytest.approx(base, abs=1e-8)
        assert dcor(x @ rotation, y) == pytest.approx(base, abs=1e-8)
        assert dcor(5.0 * x, y) == pytest.approx(base, abs=1e-6)

    def test_bounds(self, rng):
        for _ in range(10):
            value = dcor(rng.normal(size=(6, 2)), rng.normal(size=(6, 2)))
            assert 0.0 <= value <= 1.0

    def test_needs_two_samples(self):
        with pytest.raises(DataError):
            dcor(np.ones((1, 2)), np.ones((1, 2)))
        with pytest.raises(DataError):
            dcor(np.ones((3, 2)), np.ones((4, 2)))

    def test_gradient(self, rng):
        y = rng.normal(size=(7, 2))

        def loss_fn(params):
            tape = Tape()
            x = tape.leaf(params["x"])
            root = distance_correlation(tape, x, tape.constant(y))
            tape.backward(root)
            return root.item(), {"x": x.grad}

        report = finite_diff_check(loss_fn, {"x": rng.normal(size=(7, 2))}, h=1e-6, tolerance=1e-5)
        assert report.passed


class TestIndependence:
    def test_identical_chunks_sum_to_three(self, rng):
        tape = Tape()
        x = tape.constant(rng.normal(size=(8, 2)))
        value = independence_loss(tape, {s: x for s in ASPECTS}, np.arange(8)).item()
        assert value == pytest.approx(3.0, abs=1e-10)

    def test_independent_gaussians_are_small(self):
        # The sample statistic is biased upward and the bias grows with chunk width;
        # at the default width of 40 independent chunks already sum to about 1.8.
        rng = np.random.default_rng(0)
        tape = Tape()
        chunks = {s: tape.constant(rng.normal(size=(256, 2))) for s in ASPECTS}
        assert independence_loss(tape, chunks, np.arange(256)).item() < 0.6

    def test_single_user(self, rng):
        tape = Tape()
        chunks = {s: tape.constant(rng.normal(size=(3, 2))) for s in ASPECTS}
        with pytest.raises(DataError):
            independence_loss(tape, chunks, [1])


class TestTotalLoss:
    @pytest.fixture
    def model(self, tiny_bundle):
        cfg = ModelConfig(d=6)
        params = init_params(cfg, tiny_bundle.vocab, np.random.default_rng(1))
        adj = build_equivalent_adjacencies(build_incidence(tiny_bundle))
        return cfg, params, adj, batch_from(tiny_bundle.train, 6)

    def test_components_add_up(self, model):
        cfg, params, adj, batch = model
        tape = Tape()
        train_cfg = TrainConfig(l2_lambda=0.1, gamma=0.5)
        loss = total_loss(tape, batch, forward(params, adj, cfg, tape), train_cfg)
        assert loss.total == pytest.approx(loss.bpr + 0.1 * loss.l2 + 0.5 * loss.independence)
        assert loss.independence > 0.0

    def test_gamma_zero(self, model):
        cfg, params, adj, batch = model
        tape = Tape()
        loss = total_loss(tape, batch, forward(params, adj, cfg, tape), TrainConfig(gamma=0.0, l2_lambda=1e-3))
        assert loss.total == pytest.approx(loss.bpr + 1e-3 * loss.l2)

    def test_pure_bpr(self, model):
        cfg, params, adj, batch = model
        tape = Tape()
        loss = total_loss(tape, batch, forward(params, adj, cfg, tape), TrainConfig(gamma=0.0, l2_lambda=0.0))
        assert loss.total == loss.bpr

    def test_single_user_batch_skips_independence(self, model, tiny_bundle):
        cfg, params, adj, _ = model
        batch = batch_from([r for r in tiny_bundle.train if r.u == 0], 6)
        tape = Tape()
        loss = total_loss(tape, batch, forward(params, adj, cfg, tape), TrainConfig())
        assert loss.independence == 0.0
        tape.backward(loss.root)

    def test_scores_match_embeddings(self, model):
        cfg, params, adj, batch = model
        tape = Tape()
        result = forward(params, adj, cfg, tape)
        scores = batch_scores(tape, result, batch.users, batch.locations, batch.times, batch.positives).value
        emb = result.embeddings()
        expected = [emb.score(u, l, t, a) for u, l, t, a in
                    zip(batch.users, batch.locations, batch.times, batch.positives)]
        np.testing.assert_allclose(scores[:, 0], expected)
