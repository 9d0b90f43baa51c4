"""Binary checkpoint container.

Layout (little-endian): magic ``DHCN``, u32 format version, u32 header
length, canonical JSON header, then every table as raw float64 in header
order: parameters first, then Adam first moments, then second moments.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from disenhcn.errors import CheckpointError
from disenhcn.model import ParameterSet
from disenhcn.optim import AdamState
from disenhcn.schemas import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"DHCN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_FLOAT = np.dtype("<f8")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    vocab_hashes: Dict[str, str]
    params: ParameterSet
    adam: AdamState
    epoch: int = -1
    best_recall: float = -1.0
    best_ndcg: float = -1.0
    best_epoch: int = -1
    epochs_without_improvement: int = 0
    extra: dict = field(default_factory=dict)

    def check_vocab(self, vocab_hashes: Dict[str, str]) -> None:
        for family, digest in self.vocab_hashes.items():
            if vocab_hashes.get(family) != digest:
                raise CheckpointError(f"checkpoint vocabulary '{family}' does not match the dataset bundle")


def _header(ckpt: Checkpoint) -> dict:
    return {
        "version": FORMAT_VERSION,
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "train_config": ckpt.train_config.model_dump(mode="json"),
        "vocab_hashes": ckpt.vocab_hashes,
        "tables": [{"name": name, "shape": list(shape)} for name, shape in ckpt.params.shapes().items()],
        "adam": {
            "step": ckpt.adam.step,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "eps": ckpt.adam.eps,
        },
        "epoch": ckpt.epoch,
        "best": {"recall": ckpt.best_recall, "ndcg": ckpt.best_ndcg, "epoch": ckpt.best_epoch},
        "epochs_without_improvement": ckpt.epochs_without_improvement,
        "extra": ckpt.extra,
    }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for source in (ckpt.params.tables, ckpt.adam.m, ckpt.adam.v):
        for name in ckpt.params.names():
            chunks.append(np.ascontiguousarray(source[name], dtype=_FLOAT).tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before the header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")

    start = _PREFIX.size
    if len(blob) < start + header_len:
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        tables = [(t["name"], tuple(t["shape"])) for t in header["tables"]]
        adam, best = header["adam"], header["best"]
        fields = dict(
            model_config=ModelConfig(**header["model_config"]),
            train_config=TrainConfig(**header["train_config"]),
            vocab_hashes=header["vocab_hashes"],
            epoch=int(header["epoch"]),
            best_recall=float(best["recall"]),
            best_ndcg=float(best["ndcg"]),
            best_epoch=int(best["epoch"]),
            epochs_without_improvement=int(header["epochs_without_improvement"]),
            extra=header.get("extra", {}),
        )
        adam_scalars = dict(step=int(adam["step"]), beta1=float(adam["beta1"]),
                            beta2=float(adam["beta2"]), eps=float(adam["eps"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

    payload = memoryview(blob)[start + header_len:]
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in tables]
    expected = 3 * sum(sizes) * _FLOAT.itemsize
    if len(payload) != expected:
        raise CheckpointError(f"checkpoint payload has {len(payload)} bytes, header describes {expected}")

    offset = 0
    sections = []
    for _ in range(3):
        section = {}
        for (name, shape), size in zip(tables, sizes):
            array = np.frombuffer(payload, dtype=_FLOAT, count=size, offset=offset)
            section[name] = array.astype(np.float64).reshape(shape)
            offset += size * _FLOAT.itemsize
        sections.append(section)

    return Checkpoint(
        params=ParameterSet(sections[0]),
        adam=AdamState(m=sections[1], v=sections[2], **adam_scalars),
        **fields,
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as handle:
        handle.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.debug("Wrote checkpoint %s (epoch %d)", path, ckpt.epoch)


def load_checkpoint(path: str, vocab_hashes: Optional[Dict[str, str]] = None) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as handle:
        ckpt = decode_checkpoint(handle.read())
    if vocab_hashes is not None:
        ckpt.check_vocab(vocab_hashes)
    return ckpt
