"""Command-line entry point: ``tbnet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error
(diverged training, corrupt checkpoint). Diagnostics go to stderr;
machine-readable results go to ``--out`` or stdout as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .data import DataError, default_threads

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("tbnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(payload: dict, out: str | None) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{flag}: no such file {path}")
    return p


def _load_network_config(path: str | None):
    from .model import load_config, reference_config

    return reference_config() if path is None else load_config(_require_file(path, "--config"))


def _load_split_manifest(path: str, seed: int):
    from .data import load_manifest, split_dataset

    manifest = load_manifest(_require_file(path, "--manifest"))
    if any(r.split is None for r in manifest.records):
        log.info("manifest has no complete split column; assigning 80/10/10 with seed %d", seed)
        manifest = split_dataset(manifest, seed=seed)
    return manifest


# -- subcommands -------------------------------------------------------------------------
def cmd_analyze(args) -> int:
    from .complexity import count_complexity

    report = count_complexity(_load_network_config(args.config))
    print(report.table())
    if args.out:
        _emit(report.to_dict(), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import build_network
    from .train import TrainConfig, train

    config = _load_network_config(args.config)
    manifest = _load_split_manifest(args.manifest, args.seed)
    tc = TrainConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                     epochs=args.epochs, seed=args.seed, augment=not args.no_augment,
                     max_steps=args.max_steps)
    tc.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_network(config, seed=args.seed)
    result = train(model, manifest, tc, history_path=out / "history.jsonl",
                   checkpoint_path=out / "best.ckpt")
    best = result.history[result.best_epoch - 1]
    _emit({"checkpoint": str(out / "best.ckpt"), "history": str(out / "history.jsonl"),
           "best_epoch": result.best_epoch, "best": best}, None)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_manifest
    from .evaluate import evaluate, format_table

    _require_file(args.checkpoint, "--checkpoint")
    manifest = load_manifest(_require_file(args.manifest, "--manifest"))
    model = load_checkpoint(args.checkpoint)
    ev = evaluate(model, manifest, args.split)
    print(format_table(ev.confusion))
    if args.out:
        _emit({k: v for k, v in ev.to_dict(args.split).items() if k != "schema_version"}, args.out)
    return EXIT_OK


def _load_image(path: str, model):
    from .data import PreprocessSpec, preprocess, read_image

    spec = PreprocessSpec(target_size=tuple(model.config.input_size))
    try:
        return preprocess(read_image(_require_file(path, "--image")), spec)
    except (OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"cannot read image {path}: {exc}") from None


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint

    _require_file(args.checkpoint, "--checkpoint")
    model = load_checkpoint(args.checkpoint)
    x = _load_image(args.image, model)
    p = model.predict_proba(x)[0]
    _emit({"tb_positive_probability": float(p[1]), "predicted_label": int(p[1] > p[0])}, args.out)
    return EXIT_OK


def cmd_explain(args) -> int:
    from .checkpoint import load_checkpoint
    from .explain import ProbeSpec, dump_drop_map, explain, render_overlay

    if args.out is None:
        raise UsageError("--out (overlay PNG path) is required")
    _require_file(args.checkpoint, "--checkpoint")
    try:
        spec = ProbeSpec(patch_size=args.patch, stride=args.stride, threshold=args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = load_checkpoint(args.checkpoint)
    x = _load_image(args.image, model)
    res = explain(model, x, spec)
    render_overlay(x[0, 0], res.mask, args.out)
    payload = {"overlay": args.out, "predicted_label": res.predicted_class, "base_score": res.base_score,
               "mask_pixels": int(res.mask.sum()), "max_drop": float(res.drop_map.max())}
    if args.dump_drop_map:
        raw, side = dump_drop_map(res, args.dump_drop_map)
        payload.update(drop_map=str(raw), drop_map_meta=str(side))
    _emit(payload, None)
    return EXIT_OK


def cmd_search(args) -> int:
    from .search import (SearchSpace, IndicatorConstraints, ScoreCoefficients, load_search_config,
                         search, training_evaluator, write_leaderboard)
    from .train import TrainConfig

    if args.config:
        space, constraints, coeffs = load_search_config(_require_file(args.config, "--config"))
    else:
        space, constraints, coeffs = SearchSpace(), IndicatorConstraints(), ScoreCoefficients()
    if args.manifest is None:
        raise UsageError("--manifest is required (candidates are scored by proxy training)")
    if args.out is None:
        raise UsageError("--out (leaderboard CSV path) is required")
    if args.budget < 1:
        raise UsageError("--budget must be >= 1")
    manifest = _load_split_manifest(args.manifest, args.seed)
    tc = TrainConfig(epochs=args.proxy_epochs, seed=args.seed, learning_rate=args.lr)
    result = search(space, args.budget, training_evaluator(manifest, tc, args.seed), seed=args.seed,
                    constraints=constraints, coefficients=coeffs, workers=args.workers)
    write_leaderboard(result, args.out)
    best = result.best
    _emit({"leaderboard": args.out, "candidates": len(result.candidates), "feasible": len(result.ranked),
           "warning": result.warning,
           "best": None if best is None else {"config_hash": best.config_hash, "u_score": best.u_score,
                                              "params": best.params, "macs": best.macs,
                                              "config": best.config.to_dict()}}, None)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from PIL import Image

    from .data import DatasetManifest, PreprocessSpec, load_manifest, preprocess, read_image, write_manifest

    manifest = load_manifest(_require_file(args.manifest, "--manifest"))
    if args.out is None:
        raise UsageError("--out (output directory) is required")
    try:
        spec = PreprocessSpec(target_size=(args.size, args.size), corner_fraction=args.corner_fraction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, r in enumerate(manifest.records):
        arr = preprocess(read_image(manifest.resolve(r)), spec)[0, 0]
        name = f"{i:06d}.png"
        Image.fromarray(np.rint(arr * 65535).astype(np.uint16)).save(out / name)
        records.append(replace(r, image_path=name))
    write_manifest(DatasetManifest(records, root=str(out)), out / "manifest.csv")
    _emit({"manifest": str(out / "manifest.csv"), "images": len(records)}, None)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbnet", description="Train, evaluate, explain and search TB-Net-style classifiers.")
    parser.add_argument("--version", action="version", version=f"tbnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        return p

    p = add("analyze", cmd_analyze, "Report parameter and MAC counts for a network config.")
    p.add_argument("--config", help="network config JSON (default: built-in reference)")
    p.add_argument("--out", help="write the report as JSON here")

    p = add("train", cmd_train, "Train with SGD + momentum and keep the best validation epoch.")
    p.add_argument("--config", help="network config JSON (default: built-in reference)")
    p.add_argument("--manifest", required=True, help="CSV manifest (path,label[,split])")
    p.add_argument("--out", required=True, help="output directory for best.ckpt and history.jsonl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")

    p = add("eval", cmd_eval, "Evaluate a checkpoint on one manifest split.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="write the metrics report as JSON here")

    p = add("infer", cmd_infer, "Classify one image.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="write the JSON result here instead of stdout")

    p = add("explain", cmd_explain, "Occlusion-probe one image and render its critical-factor mask.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="overlay PNG path")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--dump-drop-map", metavar="PREFIX", help="also write PREFIX.f32 and PREFIX.json")

    p = add("search", cmd_search, "Constrained architecture search with proxy training.")
    p.add_argument("--config", help="search space TOML/JSON ([space], [constraints], [coefficients])")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="leaderboard CSV path")
    p.add_argument("--budget", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--proxy-epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--workers", type=int, default=default_threads())

    p = add("preprocess", cmd_preprocess, "Resize and corner-impute every manifest image.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory (16-bit PNGs + manifest.csv)")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--corner-fraction", type=float, default=0.15)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .model import ConfigError
    from .train import TrainingDivergedError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tbnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, FileNotFoundError) as exc:
        print(f"tbnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, CheckpointError) as exc:
        print(f"tbnet {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
