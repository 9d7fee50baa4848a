"""Box-prompted ship segmentation.

Detections become pixel-space box prompts; a pluggable segmenter turns each
prompt into a binary mask. Two reference segmenters are provided: a box-fill
baseline and an Otsu-threshold refiner that keeps the largest connected
component inside the (dilated) prompt box.

Mask files are binary PGM (P5, maxval 255, pixel values 0 or 255).
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .fusion.encoder import load_image
from .geometry import Box, CoordSpace, HBox, OBox, quad_bounding_hbox

log = logging.getLogger(__name__)


class SegmentationError(ValueError):
    pass


class SegmenterFailure(SegmentationError):
    pass


class FormatError(SegmentationError):
    pass


class DimensionMismatch(SegmentationError):
    pass


@dataclass(frozen=True)
class PromptSet:
    boxes: tuple[HBox, ...]
    image_size: tuple[int, int]  # (width, height)
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True, eq=False)
class MaskImage:
    data: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self) -> None:
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise SegmentationError(f"mask must be 2-D, got shape {d.shape}")
        if d.size and not np.isin(d, (0, 1)).all():
            raise SegmentationError("mask values must be 0 or 1")
        object.__setattr__(self, "data", d.astype(np.uint8))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MaskImage) and np.array_equal(self.data, other.data)

    @classmethod
    def zeros(cls, width: int, height: int) -> MaskImage:
        return cls(np.zeros((height, width), np.uint8))


def boxes_to_prompts(detections: Sequence[Box], image_size: tuple[int, int]) -> PromptSet:
    """Normalized detections to integer pixel boxes, clamped to the image."""
    w, h = image_size
    space = CoordSpace.pixel(w, h)
    prompts, warnings = [], []
    for i, det in enumerate(detections):
        if not det.space.is_normalized:
            raise SegmentationError(f"detection {i} is not normalized")
        hb = quad_bounding_hbox(det) if isinstance(det, OBox) else det
        raw = (round(hb.x_min * w), round(hb.y_min * h), round(hb.x_max * w), round(hb.y_max * h))
        x0, x1 = (min(max(v, 0), w) for v in (raw[0], raw[2]))
        y0, y1 = (min(max(v, 0), h) for v in (raw[1], raw[3]))
        if (x0, y0, x1, y1) != raw:
            warnings.append(f"detection {i} clamped from {raw} to {(x0, y0, x1, y1)}")
        prompts.append(HBox(float(x0), float(y0), float(x1), float(y1), space))
    return PromptSet(tuple(prompts), (w, h), tuple(warnings))


def _pixel_bounds(box: HBox, size: tuple[int, int], margin: float = 0.0) -> tuple[int, int, int, int]:
    w, h = size
    mx, my = margin * box.width, margin * box.height
    x0 = max(0, int(math.floor(box.x_min - mx)))
    y0 = max(0, int(math.floor(box.y_min - my)))
    x1 = min(w, int(math.ceil(box.x_max + mx)))
    y1 = min(h, int(math.ceil(box.y_max + my)))
    return x0, y0, x1, y1


def box_mask(box: HBox, size: tuple[int, int], margin: float = 0.0) -> MaskImage:
    """Pixels whose cell lies inside ``box`` grown by ``margin`` of its size per side."""
    w, h = size
    data = np.zeros((h, w), np.uint8)
    x0, y0, x1, y1 = _pixel_bounds(box, size, margin)
    data[y0:y1, x0:x1] = 1
    return MaskImage(data)


class Segmenter:
    """(image, prompts) -> one mask per prompt."""

    name = "segmenter"

    def segment_box(self, image: np.ndarray, box: HBox) -> MaskImage:
        raise NotImplementedError

    def __call__(self, image: np.ndarray, prompts: PromptSet) -> list[MaskImage]:
        return [self.segment_box(image, b) for b in prompts.boxes]


class BoxFillSegmenter(Segmenter):
    name = "boxfill"

    def segment_box(self, image: np.ndarray, box: HBox) -> MaskImage:
        h, w = image.shape
        return box_mask(box, (w, h))


class ThresholdSegmenter(Segmenter):
    """Otsu threshold inside the dilated box; the largest bright component wins."""

    name = "threshold"

    def __init__(self, margin: float = 0.10):
        self.margin = margin

    def segment_box(self, image: np.ndarray, box: HBox) -> MaskImage:
        h, w = image.shape
        x0, y0, x1, y1 = _pixel_bounds(box, (w, h), self.margin)
        data = np.zeros((h, w), np.uint8)
        crop = image[y0:y1, x0:x1]
        if crop.size == 0:
            raise SegmenterFailure(f"empty crop for {box}")
        if float(crop.max()) == float(crop.min()):
            raise SegmenterFailure(f"flat crop for {box}")
        fg = crop > threshold_otsu(crop)
        labels, n = ndimage.label(fg)
        if n == 0:
            raise SegmenterFailure(f"no foreground in {box}")
        sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        data[y0:y1, x0:x1] = labels == keep
        return MaskImage(data)


SEGMENTERS = {"boxfill": BoxFillSegmenter, "threshold": ThresholdSegmenter}


@dataclass
class SegmentationResult:
    masks: list[MaskImage]
    warnings: list[str] = field(default_factory=list)


def segment(image, prompts: PromptSet, segmenter: Segmenter) -> SegmentationResult:
    """Run ``segmenter`` per prompt; a failing box yields an empty mask and a warning."""
    img = load_image(image)
    h, w = img.shape
    if (w, h) != tuple(prompts.image_size):
        raise DimensionMismatch(f"image is {w}x{h}, prompts are for {prompts.image_size}")
    result = SegmentationResult([], list(prompts.warnings))
    for i, box in enumerate(prompts.boxes):
        try:
            mask = segmenter.segment_box(img, box)
            if (mask.width, mask.height) != (w, h):
                raise SegmenterFailure(f"mask is {mask.width}x{mask.height}, image is {w}x{h}")
        except SegmenterFailure as exc:
            log.warning("box %d: %s", i, exc)
            result.warnings.append(f"box {i}: {exc}")
            mask = MaskImage.zeros(w, h)
        result.masks.append(mask)
    return result


def write_mask(mask: MaskImage, path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + (mask.data * 255).astype(np.uint8).tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_mask(path) -> MaskImage:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (magic {raw[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: bad header {fields}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing header terminator")
    body = raw[pos + 1 :]
    if len(body) != width * height:
        raise FormatError(f"{path}: expected {width * height} data bytes, got {len(body)}")
    data = np.frombuffer(body, np.uint8).reshape(height, width)
    if not np.isin(data, (0, 255)).all():
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return MaskImage((data // 255).astype(np.uint8))


def mask_metrics(predicted: MaskImage, reference: MaskImage) -> dict[str, float]:
    if predicted.data.shape != reference.data.shape:
        raise DimensionMismatch(f"{predicted.data.shape} vs {reference.data.shape}")
    p, r = predicted.data.astype(bool), reference.data.astype(bool)
    union = np.logical_or(p, r).sum()
    inter = np.logical_and(p, r).sum()
    iou = 1.0 if union == 0 else float(inter) / float(union)
    return {"iou": iou, "pixel_accuracy": float((p == r).mean()) if p.size else 1.0}


def write_masks(out_dir, image_id: str, prompts: PromptSet, masks: Sequence[MaskImage], manifest) -> int:
    """Write ``<out_dir>/<image_id>/<index>.pgm`` and append manifest lines to the open ``manifest``."""
    out_dir = Path(out_dir)
    (out_dir / image_id).mkdir(parents=True, exist_ok=True)
    for i, (box, mask) in enumerate(zip(prompts.boxes, masks)):
        rel = f"{image_id}/{i}.pgm"
        write_mask(mask, out_dir / rel)
        row = {
            "image_id": image_id,
            "box_index": i,
            "box": [box.x_min, box.y_min, box.x_max, box.y_max],
            "mask": rel,
            "area": int(mask.data.sum()),
        }
        manifest.write(json.dumps(row) + "\n")
    return len(masks)
