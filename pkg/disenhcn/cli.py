"""Command-line surface: synth | prepare | train | evaluate | predict | inspect | gradcheck.

Data products go to stdout; diagnostics go through logging on stderr.
"""
import argparse
import logging
import os
import sys
from typing import Dict, Iterable, List, Optional

import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from disenhcn import __version__, data, evaluator, reports, synth
from disenhcn.checkpoint import load_checkpoint
from disenhcn.config import configure_logging, settings
from disenhcn.errors import DataError, DisenHCNError, UsageError, VerificationError
from disenhcn.hypergraph import adjacency_stats, build_equivalent_adjacencies, build_incidence
from disenhcn.model import attention_report, final_embeddings
from disenhcn.schemas import FusionMode, RunConfig, SynthSpec
from disenhcn.trainer import BEST_FILE, LOG_FILE, fit, gradient_check

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
ECHO_KEYS = ("d", "layers", "enabled_types", "fusion", "conv", "gamma", "l2_lambda", "lr", "lr_decay",
             "lr_decay_every", "batch_size", "epochs", "patience", "seed")


class ArgumentParser(argparse.ArgumentParser):
    """Usage problems raise UsageError (exit 1) instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# Configuration
def _key_values(lines: Iterable[str], origin: str) -> Dict[str, str]:
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{origin}:{n}: expected key=value, got '{line}'")
        values[key.strip()] = value.strip()
    return values


def parse_config_file(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return _key_values(handle, path)


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}" for e in exc.errors())


def load_run_config(config_path: Optional[str], overrides: List[str], seed: Optional[int] = None) -> RunConfig:
    """Config file first, then each ``--set key=value``, then ``--seed``."""
    values = parse_config_file(config_path) if config_path else {}
    values.update(_key_values(overrides, "--set"))
    if seed is not None:
        values["seed"] = seed
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        raise UsageError(f"invalid configuration: {_validation_message(exc)}") from None


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.set or [], args.seed)


def _out_dir(args, cfg: RunConfig = None) -> str:
    return args.out or (cfg.out_dir if cfg is not None and cfg.out_dir else None) or settings.OUTPUT_DIR


def _load_model(args):
    bundle = data.load_bundle(args.bundle)
    ckpt = load_checkpoint(args.checkpoint, bundle.vocab.hashes())
    adjacency = build_equivalent_adjacencies(build_incidence(bundle), ckpt.model_config.enabled_types)
    return bundle, ckpt, adjacency


# Commands
def cmd_synth(args) -> int:
    values = {
        "n_users": args.users,
        "n_locations": args.locations,
        "n_times": args.times,
        "n_activities": args.activities,
        "clusters": args.clusters,
        "records_per_user": args.records_per_user,
        "noise_rate": args.noise,
        "seed": args.seed,
    }
    try:
        spec = SynthSpec(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as exc:
        raise UsageError(f"invalid synthetic spec: {_validation_message(exc)}") from None

    records = synth.generate(spec)
    path = os.path.join(_out_dir(args), "synth.csv")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    synth.write_csv(records, path)
    print(f"✅ Wrote {len(records)} synthetic records to {path}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    raw = data.ingest_csv(args.input)
    kept = data.apply_filters(raw, cfg.as_filter_config())
    if not kept:
        raise DataError("no records left after filtering; relax the min_* filter settings")

    vocab = data.build_vocab(kept)
    bundle = data.split(data.encode(kept, vocab), cfg.ratios, cfg.seed, vocab)
    data.save_bundle(bundle, out)
    print(reports.summary_table(data.dataset_summary(bundle)))
    print(f"✅ Bundle written to {out} (train {len(bundle.train)}, valid {len(bundle.valid)}, "
          f"test {len(bundle.test)})")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    bundle = data.load_bundle(args.bundle)

    resume = resume_best = None
    model_cfg = cfg.as_model_config()
    if args.resume:
        resume = load_checkpoint(args.resume, bundle.vocab.hashes())
        model_cfg = resume.model_config
        best_path = os.path.join(out, BEST_FILE)
        if os.path.exists(best_path):
            resume_best = load_checkpoint(best_path, bundle.vocab.hashes())

    echo = {**cfg.model_dump(mode="json"), **model_cfg.model_dump(mode="json")}
    for key in ECHO_KEYS:
        value = echo[key]
        print(f"{key}={','.join(map(str, value)) if isinstance(value, list) else value}")

    result = fit(bundle, model_cfg, cfg.as_train_config(), out_dir=out, resume=resume, resume_best=resume_best)
    best = result.best
    print(f"✅ Best validation recall@{cfg.eval_k} {best.best_recall:.4f} at epoch {best.epoch}")
    print(f"📁 {os.path.join(out, BEST_FILE)}, {os.path.join(out, LOG_FILE)}")
    return 0


def cmd_evaluate(args) -> int:
    bundle, ckpt, adjacency = _load_model(args)
    emb = final_embeddings(ckpt.params, adjacency, ckpt.model_config)
    records = getattr(bundle, args.split)
    exclude = data.ObservedIndex.build(bundle.train) if args.exclude_train else None

    report = evaluator.evaluate(emb, records, args.k, exclude=exclude, keep_ranks=bool(args.ranks_out))
    print(reports.metrics_json(report))
    if args.ranks_out:
        reports.write_ranks_csv(records, report.per_record_ranks, args.ranks_out)
    if args.baseline:
        print(reports.metrics_json(evaluator.popularity_baseline(bundle, args.k, records)))
    if args.by_sparsity:
        print(reports.sparsity_table(evaluator.evaluate_by_sparsity(emb, bundle, args.k, records=records)))
    if args.out:
        reports.write_json(report.to_json_dict(), os.path.join(args.out, "metrics.json"))
    return 0


def cmd_predict(args) -> int:
    bundle, ckpt, adjacency = _load_model(args)
    vocab = bundle.vocab
    u = vocab.index_of("users", args.user)
    l = vocab.index_of("locations", args.location)
    t = vocab.index_of("times", args.time)

    scores = final_embeddings(ckpt.params, adjacency, ckpt.model_config).score_all_activities(u, l, t)
    order = np.lexsort((np.arange(len(scores)), -scores))[:args.k]
    for line in reports.topk_lines([vocab.activities[a] for a in order], scores[order]):
        print(line)
    return 0


def cmd_inspect(args) -> int:
    _, ckpt, adjacency = _load_model(args)
    out = _out_dir(args)
    stats = adjacency_stats(adjacency)
    print(reports.to_json(stats, pretty=True))
    reports.write_json(stats, os.path.join(out, "adjacency_stats.json"))

    if ckpt.model_config.fusion != FusionMode.ATTENTION:
        logger.warning("Model uses %s fusion; attention report skipped", ckpt.model_config.fusion.value)
        return 0
    path = os.path.join(out, "attention.csv")
    reports.write_attention_csv(attention_report(ckpt.params, adjacency, ckpt.model_config), path)
    print(f"📊 Attention summary written to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_check(tolerance=args.tolerance, step=args.step)
    print(reports.to_json(report.to_json_dict(), pretty=True))
    if not report.passed:
        raise VerificationError(
            f"gradient check failed: max relative error {report.max_rel_error:.3e} at "
            f"{report.worst_parameter}{list(report.worst_index)} (tolerance {report.tolerance:g})"
        )
    print("✅ Gradient check passed")
    return 0


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, default=settings.THREADS, help="BLAS threads (1 = deterministic)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    parser = ArgumentParser(prog="disenhcn", description="Disentangled hypergraph activity prediction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = commands.add_parser("synth", parents=[common], help="generate a planted-preference corpus")
    p.add_argument("--users", type=int)
    p.add_argument("--locations", type=int)
    p.add_argument("--times", type=int)
    p.add_argument("--activities", type=int)
    p.add_argument("--clusters", help="cluster counts per aspect, e.g. 4,2,5")
    p.add_argument("--records-per-user", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(handler=cmd_synth)

    p = commands.add_parser("prepare", parents=[common], help="ingest, filter and split a CSV")
    p.add_argument("input", help="user_id,location_id,time_id,activity_id CSV")
    p.set_defaults(handler=cmd_prepare)

    p = commands.add_parser("train", parents=[common], help="train and keep the best checkpoint")
    p.add_argument("bundle", help="dataset bundle directory")
    p.add_argument("--resume", help="checkpoint to continue from (usually last.ckpt)")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("evaluate", parents=[common], help="Recall@K and NDCG@K on a split")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--exclude-train", action="store_true", help="drop context-observed training activities")
    p.add_argument("--by-sparsity", action="store_true", help="also report per user-sparsity group")
    p.add_argument("--baseline", action="store_true", help="also report the popularity baseline")
    p.add_argument("--ranks-out", help="write per-record ranks as CSV")
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("predict", parents=[common], help="top-k activities for one context")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--user", required=True)
    p.add_argument("--location", required=True)
    p.add_argument("--time", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(handler=cmd_predict)

    p = commands.add_parser("inspect", parents=[common], help="adjacency statistics and attention summary")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.set_defaults(handler=cmd_inspect)

    p = commands.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.log_level:
            if args.log_level.upper() not in LOG_LEVELS:
                raise UsageError(f"unknown log level '{args.log_level}'")
            configure_logging(level=args.log_level)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if getattr(args, "k", 1) < 1:
            raise UsageError("--k must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.handler(args)
    except DisenHCNError as exc:
        logger.debug("Command failed", exc_info=True)
        print(f"❌ {exc}", file=sys.stderr)
        return exc.exit_code
