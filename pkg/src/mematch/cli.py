"""``mematch`` command line: train, eval, verify, export.

Exit codes: 0 ok, 1 usage or configuration error, 2 numerical abort
(NaN/Inf loss or gradient), 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config, to_dict, with_overrides
from .episodes import DatasetError, SamplingError, sample_episode
from .numcore import UninitializedStatsError
from .rng import stream
from .trainer import (
    CheckpointError,
    NumericalAbort,
    evaluate,
    forward_episode,
    init_model,
    load_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING, "warning": logging.WARNING}
EVAL_HEADER = ["ways", "shots", "episodes", "queries", "seed", "mean_accuracy", "ci95", "checkpoint"]

log = logging.getLogger("mematch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for numerical aborts here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, metavar="U64", help="root seed for every random stream")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint file (overrides output.checkpoint)")
    common.add_argument("--threads", type=int, metavar="T", help="cap on worker and BLAS threads")

    episodic = argparse.ArgumentParser(add_help=False)
    episodic.add_argument("--ways", type=int, metavar="C", help="classes per episode")
    episodic.add_argument("--shots", type=int, metavar="K", help="labelled samples per class")

    parser = _Parser(prog="mematch", description="Memory-matching few-shot learner.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="episodic training with checkpoints and CSV metrics")
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides steps)")
    p.add_argument("--out", metavar="PATH", help="metrics CSV (overrides output.metrics)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint's stored step")

    p = sub.add_parser("eval", parents=[common, episodic], help="episodic evaluation: mean accuracy and 95%% CI")
    p.add_argument("--episodes", type=int, metavar="N", help="evaluation episodes (default 500)")
    p.add_argument("--out", metavar="PATH", help="CSV file the result row is appended to")

    sub.add_parser("verify", help="gradchecks, memory fuzz and oracle equivalences")

    p = sub.add_parser("export", parents=[common, episodic], help="similarity matrix or query embeddings as CSV")
    p.add_argument("--mode", choices=("similarity", "embeddings"), default="similarity")
    p.add_argument("--queries", type=int, default=5, help="queries per class in the exported episode")
    p.add_argument("--out", metavar="PATH", default="export.csv")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    return with_overrides(
        cfg,
        seed=args.seed,
        steps=getattr(args, "steps", None),
        checkpoint=args.checkpoint,
        ways=getattr(args, "ways", None),
        shots=getattr(args, "shots", None),
        episodes=getattr(args, "episodes", None),
        threads=args.threads,
    )


def _load(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _trim_metrics(path: Path, upto: int) -> None:
    """Drop rows past the resumed step so the log matches an uninterrupted run."""
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= upto]
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def cmd_train(cfg: RunConfig, metrics: str | None, resume: bool) -> int:
    data = cfg.datasets()
    ckpt_path = Path(cfg.output.checkpoint)
    metrics_path = Path(metrics or cfg.output.metrics)
    model_config = cfg.model_config()
    if resume:
        if not ckpt_path.exists():
            raise UsageError(f"--resume: checkpoint {ckpt_path} does not exist")
        ck = _load(ckpt_path)
        if ck.params.config != model_config:
            raise UsageError(f"--resume: checkpoint model {ck.params.config} does not match the config {model_config}")
        params, opt = ck.params, ck.opt
        _trim_metrics(metrics_path, ck.step)
        log.info("resuming from step %d", ck.step)
    else:
        params = init_model(model_config, stream(cfg.seed, "init"))
        opt = cfg.optimizer()
        if metrics_path.exists():
            metrics_path.unlink()
    log.info("model: %d parameters, %d training classes", params.count(), len(data["train"]))
    try:
        train(params, opt, data["train"], cfg.train_settings(), ckpt_path, metrics_path,
              val_ds=data.get("val"), extra_meta={"config": to_dict(cfg)})
    except NumericalAbort as exc:
        print(f"mematch train: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained to step {opt.step}; checkpoint {ckpt_path}; metrics {metrics_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: str | None) -> int:
    ck = _load(cfg.output.checkpoint)
    ds = cfg.datasets()["eval"]
    e = cfg.eval
    report = evaluate(ck.params, ds, e.ways, e.shots, n_episodes=e.episodes, queries=e.queries,
                      seed=cfg.seed, threads=e.threads, per_class=e.per_class)
    print(f"{e.ways}-way {e.shots}-shot: {report.percent()} % over {report.episodes} episodes "
          f"({e.queries} queries per class)")
    path = Path(out or cfg.output.eval_csv)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(EVAL_HEADER)
        w.writerow([e.ways, e.shots, report.episodes, e.queries, cfg.seed,
                    f"{report.mean_accuracy:.6f}", f"{report.ci95:.6f}", cfg.output.checkpoint])
    return EXIT_OK


def cmd_verify() -> int:
    from .verify import run_all

    results = run_all(echo=print)
    if all(r.ok for r in results):
        print("verify: all suites passed")
        return EXIT_OK
    print("verify: FAILED", file=sys.stderr)
    return EXIT_VERIFY


def export_matrix(params, ds, mode: str, ways: int, shots: int, queries: int, seed: int) -> np.ndarray:
    """Similarity (support x query) or query embeddings with a trailing label column."""
    ep = sample_episode(ds, ways, shots, queries, stream(seed, "export", 0))
    out = forward_episode(params, ep, training=False)
    if mode == "similarity":
        return out.logits.data.T.astype(np.float64) + 0.0  # + 0.0 folds -0.0 into 0.0
    f = out.query_embeddings.data.astype(np.float64)
    return np.concatenate([f, ep.query_labels[:, None].astype(np.float64)], axis=1) + 0.0


def cmd_export(cfg: RunConfig, mode: str, queries: int, out: str) -> int:
    if queries < 1:
        raise UsageError(f"--queries must be >= 1, got {queries}")
    ck = _load(cfg.output.checkpoint)
    mat = export_matrix(ck.params, cfg.datasets()["eval"], mode, cfg.eval.ways, cfg.eval.shots, queries, cfg.seed)
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = ["%.9g"] * mat.shape[1]
    if mode == "embeddings":
        fmt[-1] = "%d"
    np.savetxt(path, mat, delimiter=",", fmt=fmt)
    print(f"wrote {mat.shape[0]}x{mat.shape[1]} {mode} matrix to {path}")
    return EXIT_OK


def _setup_logging() -> None:
    name = os.environ.get("MEMATCH_LOG", "warn").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"MEMATCH_LOG must be one of debug, info, warn; got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return int(exc.code or 0)
    try:
        _setup_logging()
        if args.command == "verify":
            return cmd_verify()
        cfg = _config(args)
        with threadpool_limits(limits=cfg.eval.threads):
            if args.command == "train":
                return cmd_train(cfg, args.out, args.resume)
            if args.command == "eval":
                return cmd_eval(cfg, args.out)
            return cmd_export(cfg, args.mode, args.queries, args.out)
    except (UsageError, ConfigError, DatasetError, SamplingError, UninitializedStatsError) as exc:
        print(f"mematch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
