"""signforge command line: dataset construction, training, evaluation,
comparison, serving, and one-shot prediction.

Exit codes: 0 success, 1 user error (bad flags/files), 2 internal error.
Flag precedence for training settings: command line > --config file >
built-in defaults; unknown config keys are rejected rather than ignored.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (AugmentConfig, DatasetManifest, DatasetError, FrameStream,
                      build_manifest, class_histogram, extract_frames,
                      histogram_chart, histogram_csv, load_image, quality_score,
                      read_frame_pipe)
from .models import build, get_spec, param_count
from .session import SessionConfig
from .synth import synth_shapes
from .tensor import ShapeError
from .training import (EarlyStopConfig, TrainConfig, TrainingError, comparison_csv,
                       comparison_table, compare, evaluate, train)
from .weights_io import WeightsError, load as load_weights


class UserError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config file handling

_CONFIG_KEYS = {"max_epochs", "batch_size", "learning_rate", "momentum", "seed",
                "early_stopping", "augment"}
_ES_KEYS = {"metric", "patience", "min_delta"}
_AUG_KEYS = {"enabled", "rotation_max_deg", "scale_range", "translation_max_frac",
             "flip_prob"}


def config_file(path: str) -> dict:
    """Load and validate a JSON config; unknown keys are an error so typos
    never silently fall back to defaults."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UserError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UserError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise UserError("config file must hold a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise UserError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for sub, allowed in (("early_stopping", _ES_KEYS), ("augment", _AUG_KEYS)):
        if sub in raw:
            bad = set(raw[sub]) - allowed
            if bad:
                raise UserError(f"unknown {sub} config keys: {', '.join(sorted(bad))}")
    return raw


def resolve_train_config(args, cfg: dict) -> tuple[TrainConfig, AugmentConfig | None, dict]:
    """Merge CLI flags (highest), config file, and defaults."""
    def pick(flag_value, key, default, scope=cfg):
        if flag_value is not None:
            return flag_value
        return scope.get(key, default) if scope else default

    es_cfg = cfg.get("early_stopping", {})
    early = EarlyStopConfig(
        metric=pick(args.metric, "metric", "val_loss", es_cfg),
        patience=pick(args.patience, "patience", 5, es_cfg),
        min_delta=pick(args.min_delta, "min_delta", 0.0, es_cfg),
    )
    config = TrainConfig(
        max_epochs=pick(args.epochs, "max_epochs", 50),
        batch_size=pick(args.batch, "batch_size", 64),
        learning_rate=pick(args.lr, "learning_rate", 0.001),
        momentum=pick(args.momentum, "momentum", 0.0),
        early_stopping=early,
        seed=pick(args.seed, "seed", 0),
    )
    aug_cfg = cfg.get("augment", {})
    enabled = pick(args.augment, "enabled", True, aug_cfg)
    augment = None
    if enabled:
        augment = AugmentConfig(
            rotation_max_deg=pick(None, "rotation_max_deg", 12.0, aug_cfg),
            scale_range=tuple(pick(None, "scale_range", (0.9, 1.1), aug_cfg)),
            translation_max_frac=pick(None, "translation_max_frac", 0.1, aug_cfg),
            flip_prob=0.0 if args.no_flip else pick(None, "flip_prob", 0.5, aug_cfg),
            seed=config.seed,
        )
    resolved = {"train": config.to_dict(),
                "augment": None if augment is None else {
                    "rotation_max_deg": augment.rotation_max_deg,
                    "scale_range": list(augment.scale_range),
                    "translation_max_frac": augment.translation_max_frac,
                    "flip_prob": augment.flip_prob}}
    return config, augment, resolved


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="max epochs (default 50)")
    p.add_argument("--batch", type=int, help="batch size (default 64)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.001)")
    p.add_argument("--momentum", type=float, help="SGD momentum (default 0)")
    p.add_argument("--patience", type=int, help="early-stopping patience (default 5)")
    p.add_argument("--min-delta", type=float, dest="min_delta",
                   help="early-stopping min improvement (default 0)")
    p.add_argument("--metric", choices=["val_loss", "val_accuracy"],
                   help="early-stopping metric (default val_loss)")
    p.add_argument("--augment", action="store_true", default=None,
                   help="force augmentation on")
    p.add_argument("--no-augment", dest="augment", action="store_false",
                   help="disable augmentation")
    p.add_argument("--no-flip", action="store_true",
                   help="drop horizontal flips (letters are handed)")


# ---------------------------------------------------------------------------
# Verbs

def cmd_extract_frames(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.inp == "-":
        frames = [f for _, f in read_frame_pipe(sys.stdin.buffer)]
    else:
        src = Path(args.inp)
        if not src.is_dir():
            raise UserError(f"--in must be a frame directory or '-', got {args.inp}")
        files = sorted(p for p in src.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise UserError(f"no frames found under {src}")
        frames = [load_image(str(p)) for p in files]
    stream = FrameStream(source_id=args.inp, fps=args.fps, frames=frames)
    kept = extract_frames(stream, stride=args.stride)
    from PIL import Image
    for i, frame in enumerate(kept):
        Image.fromarray(frame).save(out / f"frame_{i:06d}.png")
    print(f"extracted {len(kept)} of {len(frames)} frames (stride {args.stride}) -> {out}")
    return 0


def cmd_build_dataset(args) -> int:
    manifest = build_manifest(args.root, image_size=(args.size, args.size),
                              val_fraction=args.val_fraction, val_dir=args.val_dir,
                              seed=args.seed if args.seed is not None else 0)
    if args.min_quality > 0:
        kept = [s for s in manifest.samples if s.quality >= args.min_quality]
        rejected = [s for s in manifest.samples if s.quality < args.min_quality]
        manifest = DatasetManifest(classes=manifest.classes, samples=kept,
                                   image_size=manifest.image_size)
    else:
        rejected = []
    if args.review_list:
        worst = sorted(manifest.samples, key=lambda s: s.quality)[:args.review_count]
        lines = [f"{s.quality:10.2f}  {s.path}" for s in rejected + worst]
        Path(args.review_list).write_text("\n".join(lines) + "\n")
    manifest.save(args.out)
    counts, ratio = class_histogram(manifest)
    print(f"manifest: {len(manifest.samples)} samples, {len(manifest.classes)} classes, "
          f"imbalance ratio {ratio:.2f} -> {args.out}")
    if rejected:
        print(f"dropped {len(rejected)} samples below quality {args.min_quality}")
    return 0


def cmd_synth_shapes(args) -> int:
    manifest = synth_shapes(args.out, n_per_class=args.n, size=args.size,
                            seed=args.seed if args.seed is not None else 0)
    print(f"synthetic dataset: {len(manifest.samples)} samples -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = config_file(args.config) if args.config else {}
    config, augment, resolved = resolve_train_config(args, cfg)
    manifest = DatasetManifest.load(args.data)
    spec = get_spec(args.model, input_size=manifest.image_size[0],
                    num_classes=len(manifest.classes)).with_classes(manifest.classes)
    model = build(spec, seed=config.seed)
    run_dir = args.out or f"runs/{args.model}"
    record = train(model, manifest, config, augment, run_dir=run_dir)
    (Path(run_dir) / "config.json").write_text(json.dumps(resolved, indent=1))
    print(f"{record.model_name}: {record.completion} after {record.epochs_executed} epochs, "
          f"train {record.train_acc:.4f}, val {record.val_acc:.4f} -> {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_weights(args.model)
    manifest = DatasetManifest.load(args.data)
    acc, loss = evaluate(model, manifest, args.split, args.batch)
    print(f"{args.split}: accuracy {acc:.4f}, loss {loss:.4f} "
          f"({param_count(model)} parameters)")
    return 0


def cmd_compare(args) -> int:
    cfg = config_file(args.config) if args.config else {}
    config, augment, resolved = resolve_train_config(args, cfg)
    manifest = DatasetManifest.load(args.data)
    names = [n.strip() for n in args.models.split(",") if n.strip()]
    rows = compare(names, manifest, config, out_dir=args.runs,
                   augment_config=augment)
    if args.runs:
        d = Path(args.runs)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(json.dumps(resolved, indent=1))
    csv_text = comparison_csv(rows)
    Path(args.out).write_text(csv_text)
    table = comparison_table(rows)
    Path(args.out).with_suffix(".txt").write_text(table)
    print(table, end="")
    print(f"-> {args.out}")
    return 0


def cmd_predict(args) -> int:
    from .session import classify_frame
    model = load_weights(args.model)
    image = load_image(args.image)
    event = classify_frame(model, image, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    print(f"{event.label} {event.prob:.4f}")
    return 0


def cmd_serve(args) -> int:
    from .server import serve
    defaults = SessionConfig(stability_k=args.k, confidence_tau=args.tau,
                             idle_gap_ms=args.idle_ms)
    serve(args.model, bind=args.bind, defaults=defaults, static_dir=args.static_dir)
    return 0


def cmd_report(args) -> int:
    did_something = False
    if args.data:
        manifest = DatasetManifest.load(args.data)
        counts, ratio = class_histogram(manifest)
        print(histogram_chart(counts), end="")
        print(f"imbalance ratio (max/min): {ratio:.2f}")
        if args.out:
            Path(args.out).write_text(histogram_csv(counts))
            print(f"-> {args.out}")
        did_something = True
    if args.comparison:
        import csv as _csv
        from .training import ComparisonRow
        with open(args.comparison) as f:
            rows = []
            for r in _csv.DictReader(f):
                if r["Epochs Executed"] == "failed":
                    rows.append(ComparisonRow(name=r["Model Name"], failed=True))
                else:
                    rows.append(ComparisonRow(
                        name=r["Model Name"], epochs=int(r["Epochs Executed"]),
                        train_acc=float(r["Train Accuracy"]), train_loss=float(r["Train Loss"]),
                        val_acc=float(r["Validation Accuracy"]),
                        val_loss=float(r["Validation Loss"]),
                        time_train_s=0.0, time_exec_ms=0.0))
        print(comparison_table(rows), end="")
        did_something = True
    if not did_something:
        raise UserError("report needs --data and/or --comparison")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="signforge",
        description="ASL fingerspelling recognition: dataset, training, serving.",
        epilog="File formats: dataset manifests are JSON "
               "{version, classes[], image_size, normalization{mean,std}, "
               "samples[{path,label,split,quality}]}; weights are binary SGNF "
               "(magic 'SGNF', little-endian, CRC32C-sealed); comparison reports "
               "use the eight-column CSV schema (Model Name ... Time Execution); "
               "raw frame pipes carry a 12-byte header (width/height/index, u32 LE) "
               "plus RGB24 per frame; run directories hold config.json, "
               "history.csv, model.sgnf, report.txt.")
    p.add_argument("--version", action="version", version=f"signforge {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
        sp.add_argument("--verbose", action="store_true")
        sp.add_argument("--config", help="JSON config file (CLI flags win)")

    sp = sub.add_parser("extract-frames",
                        help="keep every Nth decoded frame (dir of images or raw pipe on stdin)")
    sp.add_argument("--in", dest="inp", required=True,
                    help="frame directory, or '-' for the raw RGB24 pipe on stdin")
    sp.add_argument("--stride", type=int, default=2, help="keep every Nth frame (default 2)")
    sp.add_argument("--out", required=True, help="output directory for PNG frames")
    sp.add_argument("--fps", type=float, default=30.0, help="nominal stream fps")
    common(sp)
    sp.set_defaults(fn=cmd_extract_frames)

    sp = sub.add_parser("build-dataset", help="index a folder-per-letter tree into a manifest")
    sp.add_argument("--root", required=True)
    sp.add_argument("--out", required=True, help="manifest JSON path")
    sp.add_argument("--val-dir", help="separately collected validation tree")
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--size", type=int, default=32, help="training image size")
    sp.add_argument("--min-quality", type=float, default=0.0,
                    help="drop samples scoring below this sharpness")
    sp.add_argument("--review-list", help="write lowest-quality paths here for human review")
    sp.add_argument("--review-count", type=int, default=50)
    common(sp)
    sp.set_defaults(fn=cmd_build_dataset)

    sp = sub.add_parser("synth-shapes", help="generate the synthetic shape dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=200, help="images per class")
    sp.add_argument("--size", type=int, default=32)
    common(sp)
    sp.set_defaults(fn=cmd_synth_shapes)

    sp = sub.add_parser("train", help="train one registry model on a manifest")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="manifest JSON")
    sp.add_argument("--out", help="run directory (default runs/<model>)")
    _add_train_flags(sp)
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="accuracy/loss of a weights file on a split")
    sp.add_argument("--model", required=True, help="weights file (.sgnf)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="validation", choices=["train", "validation"])
    sp.add_argument("--batch", type=int, default=64)
    common(sp)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("compare", help="train several models under one config, emit the table")
    sp.add_argument("--models", required=True, help="comma-separated registry names")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="comparison CSV path")
    sp.add_argument("--runs", help="directory for per-run artifacts")
    _add_train_flags(sp)
    common(sp)
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("predict", help="classify one image file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("serve", help="run the real-time recognition service")
    sp.add_argument("--model", required=True, help="weights file (.sgnf)")
    sp.add_argument("--bind", default="127.0.0.1:8765")
    sp.add_argument("--k", type=int, default=8, help="consecutive frames to commit a letter")
    sp.add_argument("--tau", type=float, default=0.6, help="confidence threshold")
    sp.add_argument("--idle-ms", type=int, default=1500, help="idle gap before a space")
    sp.add_argument("--static-dir", help="web client bundle directory")
    common(sp)
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("report", help="dataset histogram and/or comparison re-render")
    sp.add_argument("--data", help="manifest JSON -> class histogram")
    sp.add_argument("--out", help="histogram CSV path")
    sp.add_argument("--comparison", help="comparison CSV -> text table")
    common(sp)
    sp.set_defaults(fn=cmd_report)
    return p


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.fn(args)
    except (UserError, DatasetError, WeightsError, TrainingError, ShapeError,
            KeyError, ValueError, FileNotFoundError, NotADirectoryError) as e:
        msg = e.args[0] if e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        import traceback
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
