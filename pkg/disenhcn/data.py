"""Quadruple ingestion, filtering, vocabularies, splitting and negative sampling."""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd

from disenhcn.errors import DataError, UsageError
from disenhcn.schemas import FilterConfig

logger = logging.getLogger(__name__)

HEADER = ["user_id", "location_id", "time_id", "activity_id"]
FAMILIES = ("users", "locations", "times", "activities")
SPLITS = ("train", "valid", "test")
REJECTION_DRAWS = 100


class RawRecord(NamedTuple):
    user: str
    location: str
    time: str
    activity: str


class Record(NamedTuple):
    u: int
    l: int
    t: int
    a: int


Context = Tuple[int, int, int]


@dataclass
class Vocab:
    """Four bijections raw id <-> dense index, indices assigned by first occurrence."""

    users: List[str] = field(default_factory=list)
    locations: List[str] = field(default_factory=list)
    times: List[str] = field(default_factory=list)
    activities: List[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = {}
        for family in FAMILIES:
            ids = getattr(self, family)
            index = {raw: i for i, raw in enumerate(ids)}
            if len(index) != len(ids):
                raise DataError(f"duplicate ids in vocabulary '{family}'")
            self._index[family] = index

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_activities(self) -> int:
        return len(self.activities)

    def index_of(self, family: str, raw_id: str) -> int:
        try:
            return self._index[family][raw_id]
        except KeyError:
            raise DataError(f"unknown {family[:-1]} id '{raw_id}'") from None

    def to_json(self) -> dict:
        return {family: list(getattr(self, family)) for family in FAMILIES}

    @classmethod
    def from_json(cls, payload: dict) -> "Vocab":
        missing = [f for f in FAMILIES if f not in payload]
        if missing:
            raise DataError(f"vocab.json is missing arrays: {', '.join(missing)}")
        return cls(**{f: [str(x) for x in payload[f]] for f in FAMILIES})

    def hashes(self) -> Dict[str, str]:
        """SHA-256 of each id array; used to pair checkpoints with bundles."""
        return {
            family: hashlib.sha256(
                json.dumps(getattr(self, family), separators=(",", ":")).encode("utf-8")
            ).hexdigest()
            for family in FAMILIES
        }


@dataclass
class ObservedIndex:
    """Membership over every quadruple of train, valid and test, keyed by (u, l, t)."""

    by_context: Dict[Context, FrozenSet[int]]

    @classmethod
    def build(cls, records: Iterable[Record]) -> "ObservedIndex":
        grouped: Dict[Context, set] = {}
        for r in records:
            grouped.setdefault((r.u, r.l, r.t), set()).add(r.a)
        return cls({ctx: frozenset(acts) for ctx, acts in grouped.items()})

    def activities(self, context: Context) -> FrozenSet[int]:
        return self.by_context.get(context, frozenset())

    def __contains__(self, record) -> bool:
        u, l, t, a = record
        return a in self.by_context.get((u, l, t), ())

    def __len__(self) -> int:
        return sum(len(acts) for acts in self.by_context.values())


@dataclass
class DatasetBundle:
    vocab: Vocab
    train: List[Record]
    valid: List[Record]
    test: List[Record]
    observed: ObservedIndex = None

    def __post_init__(self):
        if self.observed is None:
            self.observed = ObservedIndex.build(self.all_records())

    def all_records(self) -> List[Record]:
        return list(self.train) + list(self.valid) + list(self.test)


def ingest_csv(path: str) -> List[RawRecord]:
    """Read a `user_id,location_id,time_id,activity_id` CSV into raw records."""
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")

    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    header = lines[0].split(",") if lines else []
    if [h.strip() for h in header] != HEADER:
        raise DataError(f"malformed header in {path}: expected '{','.join(HEADER)}'")

    # Index i holds file line i + 2; blank lines are skipped but keep their numbers.
    rows = pd.Series(lines[1:], dtype=object)
    rows = rows[rows.str.strip() != ""]
    fields = rows.str.split(",")
    bad = (fields.str.len() != len(HEADER)) | fields.map(lambda f: "" in f)
    if bad.any():
        line = int(bad.idxmax()) + 2
        raise DataError(f"wrong column count or empty field on line {line} of {path}")

    records = [RawRecord(*f) for f in fields.tolist()]
    logger.info("Ingested %d records from %s", len(records), path)
    return records


def apply_filters(records: Sequence[RawRecord], cfg: FilterConfig) -> List[RawRecord]:
    """Drop sparse users and rare activities until nothing else changes."""
    if not records:
        return []
    frame = pd.DataFrame(list(records), columns=list(RawRecord._fields))

    while True:
        before = len(frame)
        if cfg.min_activity_frequency > 0:
            freq = frame.groupby("activity")["activity"].transform("size")
            frame = frame[freq >= cfg.min_activity_frequency]
        if cfg.min_locations_per_user > 0 or cfg.min_activities_per_user > 0:
            n_loc = frame.groupby("user")["location"].transform("nunique")
            n_act = frame.groupby("user")["activity"].transform("nunique")
            frame = frame[(n_loc >= cfg.min_locations_per_user) & (n_act >= cfg.min_activities_per_user)]
        if len(frame) == before:
            break

    logger.info("Filtering kept %d of %d records", len(frame), len(records))
    return [RawRecord(*row) for row in frame.itertuples(index=False, name=None)]


def build_vocab(records: Sequence[RawRecord]) -> Vocab:
    if not records:
        return Vocab()
    frame = pd.DataFrame(list(records), columns=list(RawRecord._fields))
    return Vocab(
        users=list(pd.unique(frame["user"])),
        locations=list(pd.unique(frame["location"])),
        times=list(pd.unique(frame["time"])),
        activities=list(pd.unique(frame["activity"])),
    )


def encode(records: Sequence[RawRecord], vocab: Vocab) -> List[Record]:
    return [
        Record(
            vocab.index_of("users", r.user),
            vocab.index_of("locations", r.location),
            vocab.index_of("times", r.time),
            vocab.index_of("activities", r.activity),
        )
        for r in records
    ]


def decode(records: Sequence[Record], vocab: Vocab) -> List[RawRecord]:
    try:
        return [
            RawRecord(vocab.users[r.u], vocab.locations[r.l], vocab.times[r.t], vocab.activities[r.a])
            for r in records
        ]
    except IndexError:
        raise DataError("record index outside the vocabulary") from None


def split(
    records: Sequence[Record],
    ratios: Tuple[float, float, float],
    seed: int,
    vocab: Vocab = None,
) -> DatasetBundle:
    """Deduplicate, shuffle with ``seed`` and cut into train/valid/test.

    Valid and test take ``floor(n * ratio)`` records each; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise UsageError(f"split ratios must be three positive numbers summing to 1, got {tuple(ratios)}")

    unique = list(dict.fromkeys(Record(*r) for r in records))
    if len(unique) < len(records):
        logger.info("Dropped %d duplicate quadruples before splitting", len(records) - len(unique))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(unique))
    shuffled = [unique[i] for i in order]

    n = len(shuffled)
    n_valid = int(np.floor(n * ratios[1]))
    n_test = int(np.floor(n * ratios[2]))
    n_train = n - n_valid - n_test

    if vocab is None:
        vocab = Vocab()
    return DatasetBundle(
        vocab=vocab,
        train=shuffled[:n_train],
        valid=shuffled[n_train:n_train + n_valid],
        test=shuffled[n_train + n_valid:],
    )


def sample_negative(bundle: DatasetBundle, context: Context, rng: np.random.Generator) -> int:
    """Uniform activity a* with (u, l, t, a*) unobserved anywhere in the corpus."""
    n_activities = bundle.vocab.n_activities
    seen = bundle.observed.activities(tuple(context))
    if len(seen) >= n_activities:
        raise DataError(f"no negative activity exists for context {tuple(context)}")

    for _ in range(REJECTION_DRAWS):
        candidate = int(rng.integers(n_activities))
        if candidate not in seen:
            return candidate

    complement = [a for a in range(n_activities) if a not in seen]
    return complement[int(rng.integers(len(complement)))]


def user_record_counts(bundle: DatasetBundle) -> np.ndarray:
    counts = np.zeros(bundle.vocab.n_users, dtype=np.int64)
    for r in bundle.train:
        counts[r.u] += 1
    return counts


def dataset_summary(bundle: DatasetBundle) -> Dict[str, float]:
    """Counts in the column order of the dataset statistics table."""
    v = bundle.vocab
    n_records = len(bundle.train) + len(bundle.valid) + len(bundle.test)
    cells = v.n_users * v.n_locations * v.n_times * v.n_activities
    return {
        "#User": v.n_users,
        "#Location": v.n_locations,
        "#Time": v.n_times,
        "#Activity": v.n_activities,
        "#Records": n_records,
        "Density": n_records / cells if cells else 0.0,
    }


def save_bundle(bundle: DatasetBundle, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "vocab.json"), "w", encoding="utf-8") as handle:
        json.dump(bundle.vocab.to_json(), handle, ensure_ascii=False, separators=(",", ":"))
    for name in SPLITS:
        frame = pd.DataFrame(getattr(bundle, name), columns=HEADER, dtype=np.int64)
        frame.to_csv(os.path.join(directory, f"{name}.csv"), index=False, lineterminator="\n")
    logger.info("Saved bundle to %s", directory)


def load_bundle(directory: str) -> DatasetBundle:
    vocab_path = os.path.join(directory, "vocab.json")
    if not os.path.exists(vocab_path):
        raise DataError(f"not a dataset bundle (no vocab.json): {directory}")
    with open(vocab_path, "r", encoding="utf-8") as handle:
        vocab = Vocab.from_json(json.load(handle))

    limits = np.array([vocab.n_users, vocab.n_locations, vocab.n_times, vocab.n_activities])
    splits = {}
    for name in SPLITS:
        path = os.path.join(directory, f"{name}.csv")
        if not os.path.exists(path):
            raise DataError(f"bundle split missing: {path}")
        frame = pd.read_csv(path, dtype=np.int64)
        if list(frame.columns) != HEADER:
            raise DataError(f"malformed header in {path}")
        values = frame.to_numpy()
        if len(values) and ((values < 0).any() or (values >= limits).any()):
            raise DataError(f"index outside the vocabulary in {path}")
        splits[name] = [Record(*map(int, row)) for row in values]

    return DatasetBundle(vocab=vocab, **splits)
