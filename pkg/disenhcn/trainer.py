"""Mini-batch training loop with early stopping and checkpointing."""
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import pandas as pd

from disenhcn.autodiff import GradCheckReport, Tape, finite_diff_check
from disenhcn.checkpoint import Checkpoint, save_checkpoint
from disenhcn.data import DatasetBundle, ObservedIndex, sample_negative
from disenhcn.errors import CheckpointError, DataError, TrainingError
from disenhcn.evaluator import evaluate
from disenhcn.hypergraph import AdjacencySet, build_equivalent_adjacencies, build_incidence
from disenhcn.losses import LossBreakdown, PairwiseBatch, total_loss
from disenhcn.model import ParameterSet, forward, init_params
from disenhcn.optim import AdamState, adam_step
from disenhcn.schemas import ModelConfig, TrainConfig
from disenhcn.synth import gradcheck_bundle

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "bpr", "l2", "ind", "total", "val_recall10", "val_ndcg10", "lr", "seconds"]
BEST_FILE = "best.ckpt"
LAST_FILE = "last.ckpt"
LOG_FILE = "train_log.csv"


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def sample_epoch_batches(bundle: DatasetBundle, cfg: TrainConfig, rng: np.random.Generator) -> Iterator[PairwiseBatch]:
    """Shuffle the training records and pair each with fresh negatives.

    ``batch_size`` counts positives; a batch holds ``negatives_per_positive``
    pairs per positive.
    """
    if not bundle.train:
        raise DataError("cannot train on an empty training set")
    train = np.asarray(bundle.train, dtype=np.int64)
    order = rng.permutation(len(train))
    k = cfg.negatives_per_positive

    for start in range(0, len(order), cfg.batch_size):
        rows = train[order[start:start + cfg.batch_size]]
        pairs = np.repeat(rows, k, axis=0)
        negatives = np.array(
            [sample_negative(bundle, (int(u), int(l), int(t)), rng) for u, l, t, _ in pairs.tolist()],
            dtype=np.int64,
        )
        yield PairwiseBatch(
            users=pairs[:, 0],
            locations=pairs[:, 1],
            times=pairs[:, 2],
            positives=pairs[:, 3],
            negatives=negatives,
        )


def loss_and_grads(
    params: ParameterSet,
    adjacency: AdjacencySet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    batch: PairwiseBatch,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """One forward and backward sweep; gradients keyed by parameter name."""
    tape = Tape()
    result = forward(params, adjacency, model_cfg, tape)
    loss = total_loss(tape, batch, result, train_cfg)
    if not math.isfinite(loss.total):
        raise TrainingError("non-finite loss")
    tape.backward(loss.root)
    return loss, {name: leaf.grad for name, leaf in result.leaves.items()}


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    log: pd.DataFrame
    adjacency: AdjacencySet
    stopped_early: bool


def fit(
    bundle: DatasetBundle,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: Optional[str] = None,
    resume: Optional[Checkpoint] = None,
    resume_best: Optional[Checkpoint] = None,
) -> FitResult:
    """Train until the epoch cap or until validation metrics stall for ``patience`` epochs.

    The best checkpoint is the one with the highest validation Recall@K.
    With ``out_dir`` set, ``best.ckpt``, ``last.ckpt`` and ``train_log.csv``
    are kept up to date every epoch.
    """
    if not bundle.valid:
        raise DataError("validation split is empty; early stopping needs it")
    hashes = bundle.vocab.hashes()

    adjacency = build_equivalent_adjacencies(build_incidence(bundle), model_cfg.enabled_types)
    exclude = ObservedIndex.build(bundle.train) if train_cfg.exclude_train else None

    if resume is not None:
        resume.check_vocab(hashes)
        if resume.model_config != model_cfg:
            raise CheckpointError("checkpoint model configuration differs from the requested one")
        params = resume.params.copy()
        adam = resume.adam.copy()
        start_epoch = resume.epoch + 1
        best_recall, best_ndcg = resume.best_recall, resume.best_ndcg
        stale = resume.epochs_without_improvement
        best = resume_best or resume
        logger.info("Resuming at epoch %d (Adam step %d)", start_epoch, adam.step)
    else:
        params = init_params(model_cfg, bundle.vocab, np.random.default_rng(train_cfg.seed))
        adam = AdamState.zeros_like(params)
        start_epoch = 0
        best_recall = best_ndcg = -1.0
        stale = 0
        best = None

    rows = []
    last = resume
    stopped_early = False
    for epoch in range(start_epoch, train_cfg.epochs):
        if stale >= train_cfg.patience:
            stopped_early = True
            break
        lr = train_cfg.lr_at(epoch)
        started = time.perf_counter()
        sums = np.zeros(4)
        n_batches = 0

        for b, batch in enumerate(sample_epoch_batches(bundle, train_cfg, epoch_rng(train_cfg.seed, epoch))):
            try:
                loss, grads = loss_and_grads(params, adjacency, model_cfg, train_cfg, batch)
                adam_step(params, grads, adam, lr)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            sums += (loss.bpr, loss.l2, loss.independence, loss.total)
            n_batches += 1
        if not params.all_finite():
            raise TrainingError(f"epoch {epoch}: parameters became non-finite; lower the learning rate")

        emb = forward(params, adjacency, model_cfg, Tape()).embeddings()
        metrics = evaluate(emb, bundle.valid, train_cfg.eval_k, exclude=exclude)

        improved_recall = metrics.recall_at_k > best_recall
        if improved_recall or metrics.ndcg_at_k > best_ndcg:
            stale = 0
        else:
            stale += 1
        best_recall = max(best_recall, metrics.recall_at_k)
        best_ndcg = max(best_ndcg, metrics.ndcg_at_k)

        last = Checkpoint(
            model_config=model_cfg,
            train_config=train_cfg,
            vocab_hashes=hashes,
            params=params.copy(),
            adam=adam.copy(),
            epoch=epoch,
            best_recall=best_recall,
            best_ndcg=best_ndcg,
            best_epoch=epoch if improved_recall else (best.epoch if best else -1),
            epochs_without_improvement=stale,
        )
        if improved_recall:
            best = last
            if out_dir:
                save_checkpoint(best, os.path.join(out_dir, BEST_FILE))

        means = sums / max(n_batches, 1)
        rows.append([epoch, *means.tolist(), metrics.recall_at_k, metrics.ndcg_at_k, lr,
                     time.perf_counter() - started])
        logger.info(
            "Epoch %d: loss %.5f (bpr %.5f) val recall@%d %.4f ndcg %.4f lr %.2e",
            epoch, means[3], means[0], train_cfg.eval_k, metrics.recall_at_k, metrics.ndcg_at_k, lr,
        )
        if out_dir:
            save_checkpoint(last, os.path.join(out_dir, LAST_FILE))
            _write_log(rows, out_dir, appending=resume is not None)

    if best is None:
        raise TrainingError("no epoch was trained; raise the epoch cap or drop --resume")
    if stopped_early:
        logger.info("Early stop after epoch %d; best recall@%d %.4f at epoch %d",
                    last.epoch, train_cfg.eval_k, best.best_recall, best.epoch)
    return FitResult(best=best, last=last, log=pd.DataFrame(rows, columns=LOG_COLUMNS),
                     adjacency=adjacency, stopped_early=stopped_early)


def _write_log(rows, out_dir: str, appending: bool) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOG_FILE)
    frame = pd.DataFrame(rows, columns=LOG_COLUMNS)
    if appending and os.path.exists(path):
        previous = pd.read_csv(path)
        previous = previous[previous["epoch"] < frame["epoch"].min()]
        frame = pd.concat([previous, frame], ignore_index=True)
    frame.to_csv(path, index=False, lineterminator="\n")


GRADCHECK_SEED = 7


def gradient_check(tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the full training loss on a tiny fixed model."""
    bundle = gradcheck_bundle()
    model_cfg = ModelConfig(d=6, layers=1)
    train_cfg = TrainConfig(l2_lambda=3e-5, gamma=3e-3)
    adjacency = build_equivalent_adjacencies(build_incidence(bundle), model_cfg.enabled_types)

    rng = np.random.default_rng(GRADCHECK_SEED)
    params = init_params(model_cfg, bundle.vocab, rng)
    # Off-zero biases so their gradient path is not trivially symmetric.
    for name in params.names():
        if name.startswith("b_"):
            params[name][:] = rng.uniform(-0.1, 0.1, size=params[name].shape)

    train = np.asarray(bundle.train, dtype=np.int64)
    batch = PairwiseBatch(
        users=train[:, 0],
        locations=train[:, 1],
        times=train[:, 2],
        positives=train[:, 3],
        negatives=(train[:, 3] + 1) % bundle.vocab.n_activities,
    )

    def loss_fn(tables):
        loss, grads = loss_and_grads(ParameterSet(tables), adjacency, model_cfg, train_cfg, batch)
        return loss.total, grads

    return finite_diff_check(loss_fn, params.tables, h=step, tolerance=tolerance)
