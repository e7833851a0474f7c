"""
Command-line surface: ddl check | spectrum | train | eval.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error, 3 runtime abort.
"""
import argparse
import csv
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np
from keboola.component.exceptions import UserException

from backbone import BackboneError
from configuration import Configuration
from delta_op import (EPS_K_ORACLE, DeltaOperatorError, DeltaOperatorView, determinant, normalize_direction,
                      regime_label, singular_values, spectrum)
from state_expansion import ExpansionError
from tensor_core import TensorError
from trainer import (ByteCorpus, CheckpointFormatError, CorpusError, MetricsHandler, Trainer, TrainingAbortedError,
                     beta_summary, load_checkpoint, save_checkpoint)
from verify import run_suite

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_ABORTED = 3

SEED_ENV = "DDL_SEED"
DEFAULT_CORPUS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "resources", "corpus.txt")
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"

USAGE_ERRORS = (UserException, CheckpointFormatError, CorpusError, DeltaOperatorError, ExpansionError)
RUNTIME_ERRORS = (TrainingAbortedError, TensorError, BackboneError)


def _seed_from_env() -> Optional[int]:
    value = os.environ.get(SEED_ENV)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError as e:
        raise UserException(f"{SEED_ENV} must be an integer, got '{value}'") from e


def load_config_file(path: Optional[str]) -> dict:
    """Parameters from a JSON file, either bare or wrapped in a component config's "parameters" key."""
    if not path:
        return {}
    try:
        with open(path) as config_file:
            raw = json.load(config_file)
    except FileNotFoundError as e:
        raise UserException(f"Config file '{path}' does not exist") from e
    except json.JSONDecodeError as e:
        raise UserException(f"Config file '{path}' is not valid JSON, line {e.lineno} column {e.colno}: "
                            f"{e.msg}") from e
    if not isinstance(raw, dict):
        raise UserException(f"Config file '{path}' must hold a JSON object")
    return raw.get("parameters", raw)


def merge_flags(parameters: dict, args: argparse.Namespace) -> Configuration:
    """Overlay command-line flags on the file parameters and parse the result."""
    merged = json.loads(json.dumps(parameters))
    sections = {name: merged.setdefault(name, {}) for name in ("model", "ddl", "train", "data", "checkpoint")}
    overrides = [("model", "residual_mode", args.residual_mode), ("model", "preset", args.preset),
                 ("ddl", "d_v", args.dv), ("ddl", "variant", args.variant), ("ddl", "map_mode", args.map_mode),
                 ("ddl", "state_shortconv_kernel_size", args.state_kernel),
                 ("ddl", "input_embed_shortconv_kernel_size", args.embed_kernel),
                 ("train", "steps", args.steps), ("train", "seed", args.seed), ("train", "threads", args.threads),
                 ("train", "precision", args.precision), ("data", "corpus_path", args.data)]
    for section, key, value in overrides:
        if value is not None:
            sections[section][key] = value
    try:
        config = Configuration.load_from_dict(merged)
    except ValueError as e:
        raise UserException(f"Invalid configuration value: {e}") from e
    if not config.data.corpus_path:
        config.data.corpus_path = DEFAULT_CORPUS
    return config.validate()


def cmd_check(args: argparse.Namespace) -> int:
    reports = run_suite(seed=args.seed or 0, fast=args.fast)
    for report in reports:
        print(report.to_json())
    return EXIT_OK if all(report.passed for report in reports) else EXIT_CHECK_FAILED


def _read_direction(path: str, d: int) -> np.ndarray:
    try:
        values = np.loadtxt(path, dtype=np.float64, ndmin=1)
    except (OSError, ValueError) as e:
        raise UserException(f"Cannot read direction from '{path}': {e}") from e
    if values.shape != (d,):
        raise UserException(f"Direction file holds {values.size} values, expected d = {d}")
    return values


def cmd_spectrum(args: argparse.Namespace) -> int:
    if args.d < 1 or args.dv < 1:
        raise UserException("--d and --dv must be positive")
    if not 0.0 <= args.beta <= 2.0:
        raise UserException(f"--beta must lie in [0, 2], got {args.beta}")
    if args.k_file:
        k_tilde = _read_direction(args.k_file, args.d)
    else:
        k_tilde = np.zeros(args.d)
        k_tilde[0] = 1.0
    op = DeltaOperatorView(normalize_direction(k_tilde, EPS_K_ORACLE), args.beta)
    result = spectrum(op, args.d)
    det = determinant(op, args.dv)
    label = regime_label(args.beta)
    rows = [("eigenvalue", f"{result.eigenvalue_1:g}", f"x{result.multiplicity_1}"),
            ("eigenvalue", f"{result.eigenvalue_2:g}", "x1"),
            ("spatial_det", f"{det.spatial_det:g}", ""),
            ("lifted_det", f"{det.lifted_det:g}", f"d_v={args.dv}"),
            ("singular_values", " ".join(f"{s:g}" for s in singular_values(op, args.d)), ""),
            ("regime", label, "orientation flipped" if det.orientation_flipped else "")]
    for name, value, note in rows:
        print(f"{name:<16} {value:<24} {note}".rstrip())
    if args.csv:
        with open(args.csv, "w", newline="") as csv_file:
            writer = csv.writer(csv_file)
            writer.writerow(["quantity", "value", "note"])
            writer.writerows(rows)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = merge_flags(load_config_file(args.config), args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, CONFIG_FILE), "w") as config_file:
        json.dump({"parameters": config.to_dict()}, config_file, indent=2)

    corpus = ByteCorpus.from_file(config.data.corpus_path, config.data.validation_fraction)
    trainer = Trainer(config, corpus)
    checkpoint_path = os.path.join(args.out, config.checkpoint.file_name)
    metrics_path = os.path.join(args.out, METRICS_FILE)
    if args.resume and os.path.isfile(checkpoint_path):
        trainer.restore(load_checkpoint(checkpoint_path))
        trainer.metrics = MetricsHandler.continue_from(metrics_path, config.model.n_layers, trainer.step)
    else:
        trainer.metrics = MetricsHandler(metrics_path, config.model.n_layers)
    try:
        summary = trainer.run(on_checkpoint=lambda checkpoint: save_checkpoint(checkpoint_path, checkpoint))
    finally:
        trainer.metrics.close_writer()
    if summary.val_loss is not None:
        print(f"val_loss {summary.val_loss:.6f}")
        print(f"perplexity {summary.perplexity:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    try:
        config = Configuration.load_from_dict(checkpoint.config)
    except ValueError as e:
        raise CheckpointFormatError(f"Checkpoint carries an unreadable configuration: {e}") from e
    if args.data:
        config.data.corpus_path = args.data
    if args.threads is not None:
        config.train.threads = args.threads
    corpus = ByteCorpus.from_file(config.data.corpus_path or DEFAULT_CORPUS, config.data.validation_fraction)
    trainer = Trainer(config, corpus)
    trainer.restore(checkpoint)
    result = trainer.evaluate(collect_betas=True)
    print(f"val_loss {result.loss:.6f}")
    print(f"perplexity {result.perplexity:.4f}")
    for summary in beta_summary(result.layer_betas):
        histogram = " ".join(str(count) for count in summary.histogram)
        print(f"layer {summary.layer} beta min {summary.minimum:.6f} mean {summary.mean:.6f} "
              f"max {summary.maximum:.6f} hist [{histogram}]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddl", description="Delta residual learning toolkit")
    parser.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    check = commands.add_parser("check", help="run the verification suite, print JSON lines")
    check.add_argument("--fast", action="store_true", help="reduced seeds and trials")
    check.add_argument("--seed", type=int, default=None)
    check.set_defaults(handler=cmd_check)

    spectrum_parser = commands.add_parser("spectrum", help="closed-form spectrum of I - beta k k^T")
    spectrum_parser.add_argument("--beta", type=float, required=True)
    spectrum_parser.add_argument("--d", type=int, required=True)
    spectrum_parser.add_argument("--dv", type=int, default=1)
    spectrum_parser.add_argument("--k-file", default=None, help="whitespace separated direction, normalised before use")
    spectrum_parser.add_argument("--csv", default=None, help="also write the table to this CSV file")
    spectrum_parser.set_defaults(handler=cmd_spectrum)

    train = commands.add_parser("train", help="train a byte-level model")
    train.add_argument("--config", default=None, help="JSON configuration file")
    train.add_argument("--out", required=True, help="output directory for config, metrics and checkpoint")
    train.add_argument("--residual-mode", choices=["baseline", "ddl"], default=None)
    train.add_argument("--dv", type=int, default=None, help="value channels per feature (ddl.d_v)")
    train.add_argument("--variant", choices=["baseline", "ec", "cc", "cc-ec"], default=None)
    train.add_argument("--map-mode", choices=["kmap", "vmap"], default=None)
    train.add_argument("--state-kernel", type=int, default=None, help="ddl.state_shortconv_kernel_size")
    train.add_argument("--embed-kernel", type=int, default=None, help="ddl.input_embed_shortconv_kernel_size")
    train.add_argument("--preset", choices=["toy", "small", "medium"], default=None)
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--precision", choices=["float32", "float64"], default=None)
    train.add_argument("--threads", type=int, default=None, help="threads for validation batches")
    train.add_argument("--data", default=None, help="corpus file, defaults to the bundled text")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="validation loss, perplexity and gate statistics of a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", default=None)
    evaluate.add_argument("--threads", type=int, default=None)
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _seed_from_env()
        return args.handler(args)
    except USAGE_ERRORS as exc:
        logging.error(exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        logging.exception(exc)
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
