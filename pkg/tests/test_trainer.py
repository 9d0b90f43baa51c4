import os

import numpy as np
import pandas as pd
import pytest

from conftest import make_vocab
from disenhcn import trainer
from disenhcn.data import DatasetBundle, Record
from disenhcn.errors import CheckpointError, DataError, TrainingError
from disenhcn.schemas import ModelConfig, TrainConfig
from disenhcn.trainer import LOG_COLUMNS, epoch_rng, fit, gradient_check, sample_epoch_batches

MODEL = ModelConfig(d=6)


def quick(**overrides):
    return TrainConfig(**{"epochs": 3, "batch_size": 8, "lr": 1e-2, "seed": 5, **overrides})


@pytest.fixture(scope="module")
def wide_bundle():
    # 5000 distinct contexts with one activity each
    train = [Record(u, l, t, (u + l + t) % 20) for u in range(50) for l in range(10) for t in range(10)]
    return DatasetBundle(vocab=make_vocab(50, 10, 10, 20), train=train, valid=[], test=[])


class TestSampling:
    def test_batch_sizes(self, wide_bundle):
        batches = list(sample_epoch_batches(wide_bundle, TrainConfig(), epoch_rng(1, 0)))
        assert [len(b) for b in batches] == [2048, 2048, 904]

    def test_every_positive_once_per_epoch(self, wide_bundle):
        batches = list(sample_epoch_batches(wide_bundle, TrainConfig(batch_size=700), epoch_rng(1, 0)))
        seen = np.concatenate([np.stack([b.users, b.locations, b.times, b.positives], axis=1) for b in batches])
        assert sorted(map(tuple, seen.tolist())) == sorted(map(tuple, wide_bundle.train))

    def test_negatives_unobserved(self, wide_bundle):
        for batch in sample_epoch_batches(wide_bundle, TrainConfig(), epoch_rng(3, 2)):
            for u, l, t, a in zip(batch.users, batch.locations, batch.times, batch.negatives):
                assert (int(u), int(l), int(t), int(a)) not in wide_bundle.observed

    def test_same_seed_and_epoch_same_batches(self, tiny_bundle):
        def draw(seed, epoch):
            return [b.negatives.tolist() + b.users.tolist()
                    for b in sample_epoch_batches(tiny_bundle, quick(), epoch_rng(seed, epoch))]

        assert draw(5, 1) == draw(5, 1)
        assert draw(5, 1) != draw(5, 2)

    def test_several_negatives_per_positive(self, tiny_bundle):
        batches = list(sample_epoch_batches(tiny_bundle, quick(negatives_per_positive=3), epoch_rng(0, 0)))
        assert sum(len(b) for b in batches) == 3 * len(tiny_bundle.train)


class TestSchedule:
    def test_step_decay(self):
        cfg = TrainConfig(lr=1e-3, lr_decay=0.1, lr_decay_every=20)
        assert cfg.lr_at(0) == 1e-3
        assert cfg.lr_at(45) == pytest.approx(1e-5)

    def test_milestones(self):
        cfg = TrainConfig(lr=1e-3, lr_schedule="milestones", lr_milestones="50,100")
        assert cfg.lr_at(49) == 1e-3
        assert cfg.lr_at(50) == pytest.approx(5e-4)
        assert cfg.lr_at(100) == pytest.approx(2.5e-4)


class TestFit:
    def test_adjacency_built_once(self, tiny_bundle, monkeypatch):
        calls = []
        original = trainer.build_equivalent_adjacencies

        def spy(*args, **kwargs):
            calls.append(args)
            return original(*args, **kwargs)

        monkeypatch.setattr(trainer, "build_equivalent_adjacencies", spy)
        fit(tiny_bundle, MODEL, quick())
        assert len(calls) == 1

    def test_best_is_max_recall(self, tiny_bundle):
        result = fit(tiny_bundle, MODEL, quick(epochs=5, patience=10))
        log = result.log
        assert list(log.columns) == LOG_COLUMNS
        assert result.best.best_recall == log["val_recall10"].max()
        assert result.best.epoch == int(log["val_recall10"].idxmax())
        assert result.last.epoch == 4

    def test_patience_stops_training(self, tiny_bundle):
        # steps this small leave every parameter unchanged, so nothing improves after epoch 0
        result = fit(tiny_bundle, MODEL, quick(epochs=10, patience=1, lr=1e-300))
        assert result.stopped_early
        assert len(result.log) == 2
        assert result.best.epoch == 0

    def test_writes_checkpoints_and_log(self, tiny_bundle, tmp_path):
        fit(tiny_bundle, MODEL, quick(epochs=2), out_dir=str(tmp_path))
        assert {"best.ckpt", "last.ckpt", "train_log.csv"} <= set(os.listdir(tmp_path))
        assert list(pd.read_csv(tmp_path / "train_log.csv")["epoch"]) == [0, 1]

    def test_resume_continues_the_same_run(self, tiny_bundle, tmp_path):
        straight = fit(tiny_bundle, MODEL, quick(epochs=4))
        first = fit(tiny_bundle, MODEL, quick(epochs=2), out_dir=str(tmp_path))
        resumed = fit(tiny_bundle, MODEL, quick(epochs=4), out_dir=str(tmp_path),
                      resume=first.last, resume_best=first.best)
        np.testing.assert_array_equal(resumed.log["total"].to_numpy(), straight.log["total"].to_numpy()[2:])
        np.testing.assert_array_equal(resumed.last.params["P0"], straight.last.params["P0"])
        assert resumed.last.adam.step == straight.last.adam.step
        assert list(pd.read_csv(tmp_path / "train_log.csv")["epoch"]) == [0, 1, 2, 3]

    def test_resume_rejects_other_model(self, tiny_bundle):
        first = fit(tiny_bundle, MODEL, quick(epochs=1))
        with pytest.raises(CheckpointError):
            fit(tiny_bundle, ModelConfig(d=9), quick(epochs=2), resume=first.last)

    def test_divergent_step_stops_before_saving(self, tiny_bundle, tmp_path):
        # one batch per epoch, so the overflow surfaces in the parameters rather than the loss
        with pytest.raises(TrainingError, match="epoch 0: parameters became non-finite"):
            fit(tiny_bundle, MODEL, quick(batch_size=64, lr=float("inf")), out_dir=str(tmp_path))
        assert not (tmp_path / "best.ckpt").exists()

    def test_needs_validation_records(self, tiny_bundle):
        bundle = DatasetBundle(vocab=tiny_bundle.vocab, train=tiny_bundle.train, valid=[], test=tiny_bundle.test)
        with pytest.raises(DataError, match="validation"):
            fit(bundle, MODEL, quick())


def test_gradient_check_passes():
    report = gradient_check()
    assert report.passed, report.to_json_dict()
    assert report.n_checked > 0
