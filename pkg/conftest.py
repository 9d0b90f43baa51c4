import numpy as np
import pytest

from disenhcn.data import DatasetBundle, Record, Vocab, build_vocab, encode, split
from disenhcn.schemas import SynthSpec
from disenhcn import synth


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end training runs")


def make_vocab(n_users, n_locations, n_times, n_activities) -> Vocab:
    return Vocab(
        users=[f"u{i}" for i in range(n_users)],
        locations=[f"l{i}" for i in range(n_locations)],
        times=[f"t{i}" for i in range(n_times)],
        activities=[f"a{i}" for i in range(n_activities)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_bundle() -> DatasetBundle:
    """5 users, 4 locations, 3 times, 6 activities; hand-written splits."""
    train = [
        Record(0, 0, 0, 0), Record(0, 1, 1, 1), Record(0, 2, 2, 2), Record(0, 0, 1, 3),
        Record(1, 0, 0, 1), Record(1, 1, 0, 2), Record(1, 3, 2, 0),
        Record(2, 2, 1, 3), Record(2, 3, 1, 4), Record(2, 2, 2, 5),
        Record(3, 1, 2, 4), Record(3, 0, 0, 5), Record(3, 3, 1, 0),
        Record(4, 3, 0, 2), Record(4, 2, 2, 1),
    ]
    valid = [Record(0, 1, 0, 4), Record(2, 0, 2, 1), Record(4, 1, 1, 3)]
    test = [Record(1, 2, 1, 5), Record(3, 2, 0, 2), Record(4, 0, 2, 0)]
    return DatasetBundle(vocab=make_vocab(5, 4, 3, 6), train=train, valid=valid, test=test)


@pytest.fixture(scope="session")
def synth_bundle() -> DatasetBundle:
    """The default planted corpus, split 80/10/10 without filtering."""
    records = synth.generate(SynthSpec())
    vocab = build_vocab(records)
    return split(encode(records, vocab), (0.8, 0.1, 0.1), seed=2023, vocab=vocab)
