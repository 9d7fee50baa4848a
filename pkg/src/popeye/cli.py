"""Command-line entry point: ``popeye <command> [options]``.

Every command that writes files also writes a JSON config snapshot next to its
output (``<out>.config.json`` for a file, ``<out>/config.json`` for a directory).
Passing that snapshot back with ``--config`` reruns the command with the same
resolved options.  Explicit flags override the config file.

Seed precedence: ``--seed`` flag, then the ``POPEYE_SEED`` environment variable,
then ``seed`` in the config file, then 0.

Exit codes: 0 success, 1 fatal error, 2 completed with warnings.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__

log = logging.getLogger("popeye")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_WARN = 2

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".pgm")
REQUIRED = object()

DEFAULTS: dict[str, dict[str, Any]] = {
    "convert": {
        "format": "dota",
        "task": "hbb",
        "images": REQUIRED,
        "annotations": None,
        "out": REQUIRED,
        "drop_empty": False,
        "source_dataset": None,
        "modality": None,
    },
    "synth": {"n": 32, "size": 32, "out": REQUIRED},
    "train_toy": {
        "data": REQUIRED,
        "images": None,
        "stage": "ship",
        "init": None,
        "out": REQUIRED,
        "steps": None,
        "lr": None,
    },
    "infer": {
        "model": None,
        "scripted": None,
        "images": REQUIRED,
        "task": "hbb",
        "scorer": "default",
        "out": REQUIRED,
    },
    "eval": {
        "preds": REQUIRED,
        "gt": REQUIRED,
        "task": "hbb",
        "iou": "0.4,0.5,0.6",
        "out": None,
        "method": "",
        "dataset": "",
    },
    "segment": {
        "preds": REQUIRED,
        "images": REQUIRED,
        "segmenter": "threshold",
        "margin": 0.10,
        "out": REQUIRED,
    },
    "report": {"eval": REQUIRED, "format": "table", "out": None, "threshold": 0.5},
}


class CliError(Exception):
    """Fatal, user-facing error; the message is printed and the exit code is 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with "warnings"
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_FATAL, f"{self.prog}: error: {message}\n")


# -- option resolution and snapshots -----------------------------------------


def _load_config(path: str | None, command: str) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a JSON object")
    if cfg.get("command", command) != command:
        raise CliError(f"config {path} is a snapshot of {cfg['command']!r}, not {command!r}")
    return cfg


def resolve_seed(flag: int | None, config: dict) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get("POPEYE_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"POPEYE_SEED must be an integer, got {env!r}") from exc
    return int(config.get("seed", 0))


def _resolve(args: argparse.Namespace, config: dict, command: str) -> dict[str, Any]:
    from_file = config.get("args", {})
    opts = {}
    for key, default in DEFAULTS[command].items():
        value = getattr(args, key, None)
        if value is None:
            value = from_file.get(key, default)
        if value is REQUIRED:
            raise CliError(f"missing required option --{key.replace('_', '-')}")
        opts[key] = value
    return opts


def snapshot_path(out: str | Path, is_dir: bool = False) -> Path:
    out = Path(out)
    return out / "config.json" if is_dir else out.with_name(out.name + ".config.json")


def write_snapshot(path: Path, command: str, opts: dict, seed: int, extra: dict | None = None) -> None:
    snap = {"command": command, "version": __version__, "seed": seed, "args": opts}
    snap.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _list_images(images_dir: Path) -> list[Path]:
    if not images_dir.is_dir():
        raise CliError(f"not a directory: {images_dir}")
    return sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8", newline="\n")


# -- commands ----------------------------------------------------------------


def cmd_convert(opts: dict, seed: int, config: dict) -> int:
    from .labeling import LabelingError, convert_dataset

    try:
        stats = convert_dataset(
            opts["images"],
            opts["format"],
            opts["task"],
            opts["out"],
            opts["annotations"],
            drop_empty=bool(opts["drop_empty"]),
            source_dataset=opts["source_dataset"],
            modality=opts["modality"],
        )
    except (FileNotFoundError, LabelingError) as exc:
        raise CliError(str(exc)) from exc
    write_snapshot(snapshot_path(opts["out"]), "convert", opts, seed)
    print(json.dumps(stats.as_dict(), sort_keys=True))
    if stats.records_emitted == 0 and stats.images_skipped == 0:
        raise CliError(f"no annotations found in {opts['annotations'] or opts['images']}")
    if stats.objects_dropped or stats.images_skipped:
        return EXIT_WARN
    return EXIT_OK


def cmd_synth(opts: dict, seed: int, config: dict) -> int:
    """Render single-ship scenes with DOTA labels and caption records."""
    from PIL import Image

    from . import synthetic
    from .labeling import InstructionRecord

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    captions = []
    for i, scene in enumerate(synthetic.scenes(int(opts["n"]), seed=seed, size=int(opts["size"]))):
        name = f"scene{i:04d}"
        Image.fromarray(np.round(scene.image * 255).astype(np.uint8)).save(out / f"{name}.png")
        x0, y0, x1, y1 = scene.pixel_box
        (out / f"{name}.txt").write_text(f"{x0} {y0} {x1} {y0} {x1} {y1} {x0} {y1} ship 0\n", encoding="utf-8")
        captions.append(InstructionRecord(f"synthetic/{name}/caption", f"{name}.png",
                                          synthetic.CAPTION_INSTRUCTION, synthetic.caption_for(scene.box),
                                          "caption", "synthetic", "optical"))
    with (out / "captions.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
        for rec in captions:
            fh.write(rec.to_json() + "\n")
    write_snapshot(snapshot_path(out, is_dir=True), "synth", opts, seed)
    print(f"wrote {len(captions)} scenes to {out}")
    return EXIT_OK


def _train_config(opts: dict, seed: int, config: dict):
    from .fusion import TrainConfig, stage_defaults

    train = {**stage_defaults(opts["stage"]).to_dict(), **config.get("train", {})}
    if opts["steps"] is not None:
        train["steps"] = int(opts["steps"])
    if opts["lr"] is not None:
        train["lr"] = float(opts["lr"])
    train["seed"] = seed
    try:
        return TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training config: {exc}") from exc


def cmd_train_toy(opts: dict, seed: int, config: dict) -> int:
    import torch

    from .fusion import DivergenceDetected, PopeyeToy, ToyModelConfig, load_checkpoint, save_checkpoint, train_stage
    from .fusion.checkpoint import CheckpointError
    from .fusion.encoder import ImageDecodeError
    from .fusion.training import samples_from_records
    from .labeling import LabelingError, read_records

    data = Path(opts["data"])
    try:
        records = read_records(data)
        samples = samples_from_records(records, opts["images"] or data.parent)
    except (OSError, LabelingError, ImageDecodeError) as exc:
        raise CliError(f"cannot load training data: {exc}") from exc
    if not samples:
        raise CliError(f"{data} has no records")
    tcfg = _train_config(opts, seed, config)
    torch.manual_seed(seed)
    if opts["init"]:
        try:
            model = load_checkpoint(opts["init"])
        except (OSError, CheckpointError) as exc:
            raise CliError(f"cannot load {opts['init']}: {exc}") from exc
        model_cfg = model.config.to_dict()
    else:
        model_cfg = dict(config.get("model", {}))
        model_cfg.setdefault("seed", seed)
        try:
            model = PopeyeToy(ToyModelConfig.from_dict(model_cfg))
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad model config: {exc}") from exc
    try:
        model, losses = train_stage(model, samples, opts["stage"], tcfg)
    except DivergenceDetected as exc:
        raise CliError(f"training diverged: {exc}") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, meta={"stage": opts["stage"], "seed": seed, "train": tcfg.to_dict()})
    with out.with_name(out.name + ".loss.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows((i + 1, repr(v)) for i, v in enumerate(losses))
    extra = {"train": tcfg.to_dict()}
    if not opts["init"]:
        extra["model"] = model_cfg
    write_snapshot(snapshot_path(out), "train-toy", opts, seed, extra)
    trainable, total = model.count_parameters()
    print(f"stage {opts['stage']}: {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}, "
          f"trainable {trainable}/{total}")
    return EXIT_OK


def _load_model(opts: dict):
    from .fusion import ScriptedModel, load_checkpoint
    from .fusion.checkpoint import CheckpointError

    if bool(opts["model"]) == bool(opts["scripted"]):
        raise CliError("give exactly one of --model or --scripted")
    try:
        if opts["scripted"]:
            return ScriptedModel.load(opts["scripted"])
        return load_checkpoint(opts["model"])
    except (OSError, ValueError, CheckpointError) as exc:
        raise CliError(f"cannot load model: {exc}") from exc


def cmd_infer(opts: dict, seed: int, config: dict) -> int:
    from .answer_codec import EMPTY_ANSWER, parse_answer
    from .evaluation import ConstantScorer, PooledFeatureScorer, box_to_list, score_confidence
    from .fusion import decode_answer
    from .fusion.encoder import ImageDecodeError, load_image
    from .labeling import build_instruction

    task = opts["task"]
    if task not in ("hbb", "obb"):
        raise CliError(f"unknown task {task!r}")
    scorers: dict[str, Callable] = {"default": PooledFeatureScorer, "constant": ConstantScorer}
    if opts["scorer"] not in scorers:
        raise CliError(f"unknown scorer {opts['scorer']!r}")
    model = _load_model(opts)
    scorer = scorers[opts["scorer"]]()
    instruction = build_instruction(task)
    images = _list_images(Path(opts["images"]))

    rows, warnings, failures = [], 0, 0
    for path in images:
        image_id = path.stem
        try:
            image = load_image(path)
            text = decode_answer(model, image, instruction, image_id=image_id)
            parsed = parse_answer(text, task)
            for w in parsed.warnings:
                log.warning("%s: %s: %s", image_id, w.code, w.message)
            if parsed.warnings or (not parsed.boxes and text.strip() != EMPTY_ANSWER):
                warnings += 1
            for box in parsed.boxes:
                conf = score_confidence(scorer, image, box)
                rows.append({"image_id": image_id, "task": task, "box": box_to_list(box), "confidence": conf})
        except (ImageDecodeError, ValueError) as exc:
            log.error("%s: %s", path.name, exc)
            failures += 1

    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    write_snapshot(snapshot_path(out), "infer", opts, seed)
    print(f"{len(images)} images, {len(rows)} boxes, {warnings} answers with warnings, {failures} failures")
    return EXIT_WARN if warnings or failures else EXIT_OK


def _parse_thresholds(text: str) -> list[float]:
    try:
        taus = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(f"bad --iou list {text!r}") from exc
    if not taus or any(not 0.0 < t <= 1.0 for t in taus):
        raise CliError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return taus


def cmd_eval(opts: dict, seed: int, config: dict) -> int:
    from .evaluation import EvalError, evaluate, format_report, write_report

    taus = _parse_thresholds(opts["iou"])
    try:
        report = evaluate(opts["preds"], opts["gt"], opts["task"], taus, opts["method"], opts["dataset"])
    except OSError as exc:
        raise CliError(str(exc)) from exc
    except EvalError as exc:
        raise CliError(str(exc)) from exc
    if opts["out"]:
        Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
        write_report(report, opts["out"])
        write_snapshot(snapshot_path(opts["out"]), "eval", opts, seed)
    sys.stdout.write(format_report(report, "table"))
    return EXIT_OK


def _read_prompt_rows(path: Path):
    from .evaluation import box_from_list

    by_image: dict[str, list] = {}
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise CliError(str(exc)) from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                values = row["box"]
                task = row.get("task") or ("hbb" if len(values) == 4 else "obb")
                by_image.setdefault(str(row["image_id"]), []).append(box_from_list(values, task))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CliError(f"{path}:{line_no}: bad prediction: {exc}") from exc
    return by_image


def cmd_segment(opts: dict, seed: int, config: dict) -> int:
    from .fusion.encoder import ImageDecodeError, load_image
    from .segmentation import BoxFillSegmenter, SegmentationError, ThresholdSegmenter, boxes_to_prompts, segment, write_masks

    if opts["segmenter"] == "boxfill":
        segmenter = BoxFillSegmenter()
    elif opts["segmenter"] == "threshold":
        segmenter = ThresholdSegmenter(margin=float(opts["margin"]))
    else:
        raise CliError(f"unknown segmenter {opts['segmenter']!r}")
    by_stem = {p.stem: p for p in _list_images(Path(opts["images"]))}
    by_image = _read_prompt_rows(Path(opts["preds"]))

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    n_masks, warnings = 0, 0
    with (out / "manifest.jsonl").open("w", encoding="utf-8", newline="\n") as manifest:
        for image_id in sorted(by_image):
            path = by_stem.get(image_id)
            if path is None:
                log.warning("%s: no image found", image_id)
                warnings += 1
                continue
            try:
                image = load_image(path)
                prompts = boxes_to_prompts(by_image[image_id], (image.shape[1], image.shape[0]))
                result = segment(image, prompts, segmenter)
            except (ImageDecodeError, SegmentationError) as exc:
                log.error("%s: %s", image_id, exc)
                warnings += 1
                continue
            for w in list(prompts.warnings) + list(result.warnings):
                log.warning("%s: %s", image_id, w)
                warnings += 1
            n_masks += write_masks(out, image_id, prompts, result.masks, manifest)
    write_snapshot(snapshot_path(out, is_dir=True), "segment", opts, seed)
    print(f"{n_masks} masks for {len(by_image)} images, {warnings} warnings")
    return EXIT_WARN if warnings else EXIT_OK


def cmd_report(opts: dict, seed: int, config: dict) -> int:
    from .evaluation import format_report, pr_curve_svg, read_report

    paths = opts["eval"]
    if isinstance(paths, str):
        paths = [paths]
    try:
        reports = [read_report(p) for p in paths]
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read report: {exc}") from exc
    tasks = sorted({r.task for r in reports})
    if len(tasks) > 1:
        raise CliError(f"reports mix tasks {tasks}; compare one task at a time")
    reports.sort(key=lambda r: -r.ap.get(0.5, -1.0))
    fmt = opts["format"]
    if fmt == "svg":
        text = pr_curve_svg(reports, float(opts["threshold"]))
    elif fmt in ("table", "csv", "json"):
        text = format_report(reports, fmt)
    else:
        raise CliError(f"unknown format {fmt!r}")
    _write_text(opts["out"], text)
    if opts["out"]:
        write_snapshot(snapshot_path(opts["out"]), "report", opts, seed)
    return EXIT_OK


COMMANDS: dict[str, Callable[[dict, int, dict], int]] = {
    "convert": cmd_convert,
    "synth": cmd_synth,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "report": cmd_report,
}


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="JSON config or snapshot; flags override its values")
    common.add_argument("--seed", type=int, help="random seed (precedence: flag > POPEYE_SEED > config)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log errors")

    parser = _Parser(prog="popeye", description="Ship detection toolkit: convert, train, infer, evaluate, segment.")
    parser.add_argument("--version", action="version", version=f"popeye {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("convert", parents=[common], help="convert annotations to instruction JSONL")
    p.add_argument("--format", choices=["dota", "hbb-json"], help="annotation format (default dota)")
    p.add_argument("--task", choices=["hbb", "obb"], help="answer geometry (default hbb)")
    p.add_argument("--images", metavar="DIR", help="image directory")
    p.add_argument("--annotations", metavar="DIR", help="annotation directory (default: --images)")
    p.add_argument("--out", metavar="FILE", help="output JSONL")
    p.add_argument("--drop-empty", action="store_true", default=None, help="skip images with no ships")
    p.add_argument("--source-dataset", help="dataset name written into each record")
    p.add_argument("--modality", choices=["optical", "sar"], help="override the format's modality")

    p = sub.add_parser("synth", parents=[common], help="render synthetic single-ship scenes")
    p.add_argument("--n", type=int, help="number of scenes (default 32)")
    p.add_argument("--size", type=int, help="image side in pixels (default 32)")
    p.add_argument("--out", metavar="DIR", help="output directory for images, labels and captions.jsonl")

    p = sub.add_parser("train-toy", parents=[common], help="train one stage of the toy model")
    p.add_argument("--data", metavar="FILE", help="instruction records JSONL")
    p.add_argument("--images", metavar="DIR", help="image root (default: directory of --data)")
    p.add_argument("--stage", choices=["alignment", "ship"], help="training stage (default ship)")
    p.add_argument("--init", metavar="CKPT", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--out", metavar="CKPT", help="output checkpoint; the loss curve goes to CKPT.loss.csv")
    p.add_argument("--steps", type=int, help="override the number of optimizer steps")
    p.add_argument("--lr", type=float, help="override the learning rate")

    p = sub.add_parser("infer", parents=[common], help="decode, parse and score detections")
    p.add_argument("--model", metavar="CKPT", help="toy model checkpoint")
    p.add_argument("--scripted", metavar="FILE", help="JSONL of scripted answers instead of a model")
    p.add_argument("--images", metavar="DIR", help="image directory")
    p.add_argument("--task", choices=["hbb", "obb"], help="answer geometry (default hbb)")
    p.add_argument("--scorer", choices=["default", "constant"], help="confidence scorer (default: pooled features)")
    p.add_argument("--out", metavar="FILE", help="prediction JSONL")

    p = sub.add_parser("eval", parents=[common], help="AP at several IoU thresholds")
    p.add_argument("--preds", metavar="FILE", help="prediction JSONL")
    p.add_argument("--gt", metavar="FILE", help="ground truth JSONL or instruction records")
    p.add_argument("--task", choices=["hbb", "obb"], help="box type (default hbb)")
    p.add_argument("--iou", metavar="LIST", help="comma-separated IoU thresholds (default 0.4,0.5,0.6)")
    p.add_argument("--out", metavar="FILE", help="report JSON")
    p.add_argument("--method", help="method name for the report row")
    p.add_argument("--dataset", help="dataset name for the report row")

    p = sub.add_parser("segment", parents=[common], help="box-prompted masks from predictions")
    p.add_argument("--preds", metavar="FILE", help="prediction JSONL")
    p.add_argument("--images", metavar="DIR", help="image directory")
    p.add_argument("--segmenter", choices=["boxfill", "threshold"], help="segmenter (default threshold)")
    p.add_argument("--margin", type=float, help="threshold segmenter box margin (default 0.10)")
    p.add_argument("--out", metavar="DIR", help="output directory for masks and manifest.jsonl")

    p = sub.add_parser("report", parents=[common], help="merge eval reports into a table or PR-curve SVG")
    p.add_argument("--eval", nargs="+", metavar="REPORT", help="report JSON files")
    p.add_argument("--format", choices=["table", "csv", "svg", "json"], help="output format (default table)")
    p.add_argument("--out", metavar="PATH", help="output file (default stdout)")
    p.add_argument("--threshold", type=float, help="IoU threshold for the SVG curves (default 0.5)")
    return parser


def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.ERROR if quiet else logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_FATAL
    _setup_logging(args.verbose, args.quiet)
    key = args.command.replace("-", "_")
    try:
        config = _load_config(args.config, args.command)
        seed = resolve_seed(args.seed, config)
        opts = _resolve(args, config, key)
        return COMMANDS[args.command](opts, seed, config)
    except CliError as exc:
        print(f"popeye {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    raise SystemExit(main())
