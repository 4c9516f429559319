"""Command line entry point: ``relseg <command> ...``.

Exit codes: 0 success, 1 gradcheck failure, 2 configuration or usage error,
3 IO error, 4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_run_config
from .errors import (ConfigError, DatasetIOError, DimensionError, DivergenceError, UsageError,
                     ValidationError)
from .evaluation import cross_validate, evaluate
from .gradcheck import relation_unet_gradcheck
from .inference import InferenceMode, run_mode, write_predictions
from .synth import DifficultyRanges, assign_folds, by_id, folds_of, generate_dataset, load_dataset, save_dataset, split_folds
from .trainer import train
from .unet import build_model, parse_size

log = logging.getLogger("relseg")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _size_arg(text: str):
    try:
        return parse_size(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _read_text(path: Optional[str]) -> bytes:
    if path is None:
        return b""
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"{path}: cannot read config") from exc


class RunManifest:
    """Records how an output directory was produced; written last, atomically."""

    def __init__(self, out: Path, seed: Optional[int], config_bytes: bytes):
        self.out = out
        self.info = {
            "command_line": sys.argv[:],
            "config_digest": hashlib.sha256(config_bytes).hexdigest(),
            "seed": seed,
            "tool_version": __version__,
            "output_directory": str(out),
            "start": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }

    def finish(self) -> None:
        self.info["end"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "run_manifest.json"
        tmp = self.out / "run_manifest.json.tmp"
        tmp.write_text(json.dumps(self.info, indent=2) + "\n")
        os.replace(tmp, path)


def _max_jobs(requested: int) -> int:
    cap = os.environ.get("RELSEG_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"RELSEG_THREADS must be an integer, got {cap!r}") from exc
    return max(1, requested)


def _load_data(path: str):
    records = load_dataset(path)
    if not records:
        raise ConfigError(f"{path}: dataset is empty")
    return records


def cmd_generate(args) -> int:
    ranges = DifficultyRanges.from_text(_read_text(args.difficulty_config).decode()) \
        if args.difficulty_config else DifficultyRanges()
    manifest = RunManifest(Path(args.out), args.seed, _read_text(args.difficulty_config))
    records = generate_dataset(args.count, args.size, ranges, seed=args.seed)
    assign_folds(records, split_folds([r.id for r in records], args.folds, seed=args.seed))
    save_dataset(args.out, records)
    manifest.finish()
    print(f"wrote {len(records)} samples to {args.out}")
    return EXIT_OK


def _check_fold(records, fold: int):
    split = folds_of(records)
    if not 0 <= fold < split.fold_count:
        raise ConfigError(f"--fold {fold} outside [0, {split.fold_count})")
    return split


def cmd_train(args) -> int:
    config_bytes = _read_text(args.config)
    records = _load_data(args.data)
    split = _check_fold(records, args.fold)
    cfg = parse_run_config(config_bytes.decode(), args.seed, records[0].image.shape, args.variant)
    out = Path(args.out)
    manifest = RunManifest(out, args.seed, config_bytes)
    data = by_id(records)
    train_set = [data[i] for i in split.ids_not_in(args.fold)]
    net = build_model(cfg.model, cfg.train.seed)
    result = train(net, train_set, cfg.train,
                   on_epoch=lambda row: log.info("epoch %d loss %.5f", row["epoch"], row["total_loss"]))
    save_checkpoint(out / "checkpoint.rseg", net)
    result.log.write_csv(out / "trainlog.csv")
    manifest.finish()
    print(f"final loss {result.log.total_losses()[-1]:.6f}; checkpoint at {out / 'checkpoint.rseg'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    mode = InferenceMode(args.mode, anchor_count=args.anchors, mc_passes=args.mc_passes)
    if net.config.variant not in mode.variants:
        raise UsageError(f"--mode {args.mode} needs a {' or '.join(mode.variants)} checkpoint, "
                         f"but {args.checkpoint} holds a {net.config.variant} network")
    records = _load_data(args.data)
    split = _check_fold(records, args.fold)
    manifest = RunManifest(Path(args.out), args.seed, b"")
    data = by_id(records)
    preds = run_mode(net, mode, data, split.ids_in(args.fold), split.ids_not_in(args.fold), args.seed)
    path = write_predictions(args.out, preds, data)
    manifest.finish()
    print(f"wrote {len(preds)} predictions to {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset = by_id(_load_data(args.data)) if args.data else None
    manifest = RunManifest(Path(args.out), None, b"")
    analysis = evaluate(args.predictions, args.out, dataset)
    manifest.finish()
    for row in analysis.report:
        if row[1] == "mean":
            print(f"{row[0]:<24} dice {row[2]} +- {row[3]}  pearson {row[4] or '-'}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    config_bytes = _read_text(args.configs)
    records = _load_data(args.data)
    folds_of(records)
    cfg = parse_run_config(config_bytes.decode(), args.seed, records[0].image.shape)
    manifest = RunManifest(Path(args.out), args.seed, config_bytes)
    result = cross_validate(records, cfg, args.out, jobs=_max_jobs(args.jobs))
    manifest.finish()
    for row in result.analysis.report:
        if row[1] == "mean":
            print(f"{row[0]:<24} dice {row[2]} +- {row[3]}  pearson {row[4] or '-'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = relation_unet_gradcheck(depth=args.depth, size=args.size, seed=args.seed)
    print(f"checked {report.checked} gradients in {report.seconds:.1f}s; "
          f"max relative error {report.max_rel_error:.3e}; max absolute error {report.max_abs_error:.3e}; "
          f"failures {report.failures}")
    return EXIT_OK if report.ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=_size_arg, required=True, help="HxW, e.g. 32x32")
    p.add_argument("--difficulty-config", help="key=min,max lines")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant on all folds but --fold")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("relation", "vanilla", "vanilla_dropout"), required=True)
    p.add_argument("--config", help="key=value model/training settings")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict the held-out fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--mode", choices=("repeat", "anchor_train", "anchor_test", "mc_dropout", "vanilla"),
                   required=True)
    p.add_argument("--anchors", type=int, default=20)
    p.add_argument("--mc-passes", type=int, default=20)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="report, coverage and ranking CSVs from predictions")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--data", help="dataset directory; enables overlay images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="full k-fold train/predict/evaluate pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--configs", help="key=value model/training/inference settings")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1, help="folds run in parallel (capped by RELSEG_THREADS)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a small relation U-Net")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors with status 2, which is our config code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DatasetIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, DimensionError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
