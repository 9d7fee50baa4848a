"""Convert ship annotations into image-instruction-answer records.

Supported sources:

* ``dota``: one ``.txt`` per image, lines ``x1 y1 x2 y2 x3 y3 x4 y4 class [difficulty]``
  after optional ``imagesource:`` / ``gsd:`` header lines. Only ship classes are kept.
* ``hbb-json``: one ``.json`` per image holding a list of ``{"bbox": [x, y, w, h]}``
  objects (pixel units, optional ``"category"`` key), as used for SAR sources.

Records are written as JSONL, one per (image, task), ordered by image id.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from PIL import Image

from . import answer_codec
from .geometry import (
    NORMALIZED,
    CoordSpace,
    GeometryError,
    OBox,
    canonicalize_quad,
    quad_bounding_hbox,
    rescale,
)

log = logging.getLogger(__name__)

TASKS = ("hbb", "obb", "caption")
MODALITIES = ("optical", "sar")
FORMATS = ("dota", "hbb-json")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".pgm")

INSTRUCTIONS = {
    "hbb": "Please detect all ships using the horizontal bounding box.",
    "obb": "Please detect all ships using the oriented bounding box.",
}

PARAPHRASES = {
    "hbb": (
        "Locate every ship in the image with horizontal bounding boxes.",
        "Find all ships and give their horizontal bounding boxes.",
        "Detect the ships in this image using axis-aligned boxes.",
    ),
    "obb": (
        "Locate every ship in the image with oriented bounding boxes.",
        "Find all ships and give their oriented bounding boxes.",
        "Detect the ships in this image using rotated boxes.",
    ),
}

SHIP_CLASSES = {
    "dota": frozenset({"ship"}),
    "hbb-json": frozenset({"ship"}),
}


class LabelingError(ValueError):
    pass


class MalformedLine(LabelingError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class UnknownFormat(LabelingError):
    pass


@dataclass(frozen=True)
class SourceObject:
    quad: tuple[tuple[float, float], ...]
    class_name: str = "ship"
    difficulty: int = 0


@dataclass(frozen=True)
class SourceAnnotation:
    image_id: str
    image_size: tuple[int, int]
    objects: tuple[SourceObject, ...]
    modality: str = "optical"
    source_dataset: str = "DOTA"
    diagnostics: tuple[MalformedLine, ...] = ()

    @property
    def space(self) -> CoordSpace:
        return CoordSpace.pixel(*self.image_size)


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    image: str
    instruction: str
    answer: str
    task: str
    source_dataset: str
    modality: str

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise LabelingError(f"unknown task {self.task!r}")
        if self.modality not in MODALITIES:
            raise LabelingError(f"unknown modality {self.modality!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> InstructionRecord:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class ConversionStats:
    records_emitted: int = 0
    objects_dropped: int = 0
    images_skipped: int = 0
    reasons: Counter = field(default_factory=Counter)

    def drop(self, reason: str) -> None:
        self.objects_dropped += 1
        self.reasons[f"object:{reason}"] += 1

    def skip(self, reason: str) -> None:
        self.images_skipped += 1
        self.reasons[f"image:{reason}"] += 1

    def as_dict(self) -> dict:
        return {
            "records_emitted": self.records_emitted,
            "objects_dropped": self.objects_dropped,
            "images_skipped": self.images_skipped,
            "reasons": dict(sorted(self.reasons.items())),
        }


def build_instruction(task: str, augment: bool = False, rng: random.Random | None = None) -> str:
    """Instruction text for ``task``; with ``augment`` a paraphrase may be drawn from ``rng``."""
    if task not in INSTRUCTIONS:
        raise LabelingError(f"no instruction for task {task!r}")
    if not augment:
        return INSTRUCTIONS[task]
    rng = rng or random.Random(0)
    return rng.choice((INSTRUCTIONS[task],) + PARAPHRASES[task])


def _clamp_quad(quad: Sequence[tuple[float, float]], size: tuple[int, int]) -> tuple[tuple[float, float], ...]:
    w, h = size
    return tuple((min(max(x, 0.0), float(w)), min(max(y, 0.0), float(h))) for x, y in quad)


def parse_dota_annotation(
    text: str,
    image_size: tuple[int, int],
    image_id: str = "",
    *,
    source_dataset: str = "DOTA",
    modality: str = "optical",
    ship_classes: Iterable[str] = SHIP_CLASSES["dota"],
    strict: bool = False,
) -> SourceAnnotation:
    """Parse DOTA text; malformed lines land in ``diagnostics``.

    Vertices slightly outside the image (annotators routinely overshoot the
    border) are clamped to the image extent.
    """
    keep = {c.lower() for c in ship_classes}
    objects: list[SourceObject] = []
    diags: list[MalformedLine] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("imagesource:", "gsd:")):
            continue
        parts = line.split()
        n_num = 0
        for p in parts:
            try:
                float(p)
            except ValueError:
                break
            n_num += 1
        rest = parts[n_num:]
        if n_num != 8 or not 1 <= len(rest) <= 2:
            diags.append(MalformedLine(line_no, f"expected 8 numbers, class and difficulty: {line!r}"))
            continue
        class_name = rest[0]
        try:
            difficulty = int(rest[1]) if len(rest) == 2 else 0
        except ValueError:
            diags.append(MalformedLine(line_no, f"bad difficulty {rest[1]!r}"))
            continue
        if class_name.lower() not in keep:
            continue
        vals = [float(p) for p in parts[:8]]
        quad = tuple(zip(vals[0::2], vals[1::2]))
        objects.append(SourceObject(_clamp_quad(quad, image_size), class_name, difficulty))
    if strict and not objects and diags:
        raise diags[0]
    return SourceAnnotation(image_id, tuple(image_size), tuple(objects), modality, source_dataset, tuple(diags))


def parse_hbb_json(
    text: str,
    image_size: tuple[int, int],
    image_id: str = "",
    *,
    source_dataset: str = "SSDD",
    modality: str = "sar",
    ship_classes: Iterable[str] = SHIP_CLASSES["hbb-json"],
) -> SourceAnnotation:
    keep = {c.lower() for c in ship_classes}
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LabelingError(f"{image_id}: invalid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise LabelingError(f"{image_id}: expected a list of objects")
    objects: list[SourceObject] = []
    diags: list[MalformedLine] = []
    for i, item in enumerate(items, start=1):
        bbox = item.get("bbox") if isinstance(item, dict) else None
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
            diags.append(MalformedLine(i, f"expected bbox [x, y, w, h], got {item!r}"))
            continue
        if str(item.get("category", "ship")).lower() not in keep:
            continue
        x, y, bw, bh = (float(v) for v in bbox)
        quad = ((x, y), (x + bw, y), (x + bw, y + bh), (x, y + bh))
        objects.append(SourceObject(_clamp_quad(quad, image_size), "ship", int(item.get("difficulty", 0))))
    return SourceAnnotation(image_id, tuple(image_size), tuple(objects), modality, source_dataset, tuple(diags))


def _object_boxes(ann: SourceAnnotation, task: str, stats: ConversionStats | None) -> list:
    boxes = []
    space = ann.space
    for obj in ann.objects:
        try:
            quad = canonicalize_quad(obj.quad, space)
            box = quad_bounding_hbox(quad) if task == "hbb" else quad
            boxes.append(rescale(box, space, NORMALIZED))
        except GeometryError as exc:
            log.debug("%s: dropping object %s: %s", ann.image_id, obj.quad, exc)
            if stats is not None:
                stats.drop(type(exc).__name__)
    boxes.sort(key=_order_key)
    return boxes


def _order_key(box) -> tuple[float, float]:
    h = quad_bounding_hbox(box) if isinstance(box, OBox) else box
    return (h.y_min, h.x_min)


def convert_record(
    ann: SourceAnnotation,
    task: str,
    image: str | None = None,
    stats: ConversionStats | None = None,
) -> InstructionRecord:
    """Build the record for one image; dropped objects are counted in ``stats``."""
    if task not in INSTRUCTIONS:
        raise LabelingError(f"cannot convert detections for task {task!r}")
    boxes = _object_boxes(ann, task, stats)
    return InstructionRecord(
        id=f"{ann.source_dataset}/{ann.image_id}/{task}",
        image=image if image is not None else ann.image_id,
        instruction=build_instruction(task),
        answer=answer_codec.serialize_answer(boxes, task),
        task=task,
        source_dataset=ann.source_dataset,
        modality=ann.modality,
    )


def _find_image(images_dir: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        for cand in (images_dir / f"{stem}{suffix}", images_dir / f"{stem}{suffix.upper()}"):
            if cand.is_file():
                return cand
    return None


def image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def iter_annotations(
    images_dir: Path,
    annotations_dir: Path,
    fmt: str,
    stats: ConversionStats,
    source_dataset: str | None = None,
    modality: str | None = None,
) -> Iterator[tuple[SourceAnnotation, Path]]:
    if fmt not in FORMATS:
        raise UnknownFormat(f"unknown annotation format {fmt!r}; expected one of {FORMATS}")
    suffix = ".txt" if fmt == "dota" else ".json"
    files = sorted(annotations_dir.glob(f"*{suffix}"), key=lambda p: p.stem)
    for ann_path in files:
        image_id = ann_path.stem
        img = _find_image(images_dir, image_id)
        if img is None:
            log.warning("no image for annotation %s", ann_path.name)
            stats.skip("missing_image")
            continue
        try:
            size = image_size(img)
        except OSError as exc:
            log.warning("unreadable image %s: %s", img, exc)
            stats.skip("unreadable_image")
            continue
        text = ann_path.read_text(encoding="utf-8")
        kwargs = {}
        if source_dataset:
            kwargs["source_dataset"] = source_dataset
        if modality:
            kwargs["modality"] = modality
        try:
            if fmt == "dota":
                ann = parse_dota_annotation(text, size, image_id, **kwargs)
            else:
                ann = parse_hbb_json(text, size, image_id, **kwargs)
        except LabelingError as exc:
            log.warning("%s", exc)
            stats.skip("malformed_annotation")
            continue
        for d in ann.diagnostics:
            log.warning("%s: %s", ann_path.name, d)
            stats.drop("malformed_line")
        yield ann, img


def convert_dataset(
    images_dir: str | Path,
    fmt: str,
    task: str,
    output_path: str | Path,
    annotations_dir: str | Path | None = None,
    *,
    drop_empty: bool = False,
    source_dataset: str | None = None,
    modality: str | None = None,
) -> ConversionStats:
    """Convert a directory of annotated images into a JSONL file of records."""
    images_dir = Path(images_dir)
    annotations_dir = Path(annotations_dir) if annotations_dir is not None else images_dir
    for d in (images_dir, annotations_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    if task not in INSTRUCTIONS:
        raise LabelingError(f"cannot convert detections for task {task!r}")
    stats = ConversionStats()
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with output_path.open("w", encoding="utf-8", newline="\n") as fh:
        for ann, img in iter_annotations(images_dir, annotations_dir, fmt, stats, source_dataset, modality):
            rel = img.relative_to(images_dir).as_posix()
            rec = convert_record(ann, task, image=rel, stats=stats)
            if drop_empty and rec.answer == answer_codec.EMPTY_ANSWER:
                stats.skip("empty")
                continue
            fh.write(rec.to_json() + "\n")
            stats.records_emitted += 1
    return stats


def read_records(path: str | Path) -> list[InstructionRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(InstructionRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise LabelingError(f"{path}:{line_no}: bad record: {exc}") from exc
    return out


def write_records(records: Iterable[InstructionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
