"""Box lists to answer strings and back.

Grammar (whitespace around tokens is free when parsing)::

    answer   := empty | box { "; " box }
    empty    := "No ship is detected."
    box      := "[" number { ", " number } "]"     (4 numbers for hbb, 8 for obb)
    number   := decimal with exactly 3 fractional digits when serialized

The parser is lenient: it scans arbitrary text for bracketed numeric groups,
ignores surrounding prose, clamps out-of-range coordinates and reports what
it did as diagnostics instead of raising.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

from .geometry import (
    NORMALIZED,
    Box,
    GeometryError,
    HBox,
    OBox,
    box_iou,
    canonicalize_quad,
    is_canonical,
)

EMPTY_ANSWER = "No ship is detected."
SEPARATOR = "; "
DECIMALS = 3
DUPLICATE_IOU = 0.999

ARITY = {"hbb": 4, "obb": 8}

_GROUP_RE = re.compile(r"\[([^\[\]]*)\]")
_NUMBER = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_NUMBER_RE = re.compile(_NUMBER)
_SPLIT_RE = re.compile(r"[,\s]+")


class CodecError(ValueError):
    pass


class NonCanonicalBox(CodecError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    box_index: int | None = None


@dataclass
class DetectionAnswer:
    boxes: list[Box] = field(default_factory=list)
    warnings: list[Diagnostic] = field(default_factory=list)


def _check_task(task: str) -> int:
    if task not in ARITY:
        raise CodecError(f"task must be one of {sorted(ARITY)}, got {task!r}")
    return ARITY[task]


def _fmt(v: float) -> str:
    s = f"{v:.{DECIMALS}f}"
    return "0.000" if s == "-0.000" else s


def quantize(v: float) -> float:
    return float(_fmt(v))


def serialize_answer(boxes: Sequence[Box], task: str) -> str:
    """Render boxes in the order given; callers own the ordering."""
    _check_task(task)
    if not boxes:
        return EMPTY_ANSWER
    parts = []
    for i, b in enumerate(boxes):
        if not b.space.is_normalized:
            raise CodecError(f"box {i} is not in normalized space")
        if task == "hbb":
            if not isinstance(b, HBox):
                raise CodecError(f"box {i} is not an HBox")
            coords = b.as_tuple()
        else:
            if not isinstance(b, OBox):
                raise CodecError(f"box {i} is not an OBox")
            if not b.canonical or not is_canonical(b):
                raise NonCanonicalBox(f"box {i} is not canonical: {b.vertices}")
            coords = b.flat()
        parts.append("[" + ", ".join(_fmt(c) for c in coords) + "]")
    return SEPARATOR.join(parts)


def _clamp(values: list[float], idx: int, warnings: list[Diagnostic]) -> list[float]:
    out = [min(1.0, max(0.0, v)) for v in values]
    if out != values:
        warnings.append(Diagnostic("clamped", f"coordinates clamped into [0, 1]: {values}", idx))
    return out


def parse_answer(text: str, task: str) -> DetectionAnswer:
    """Extract every bracketed numeric group of the task's arity from ``text``."""
    arity = _check_task(task)
    answer = DetectionAnswer()
    warnings = answer.warnings
    for m in _GROUP_RE.finditer(text):
        body = m.group(1)
        tokens = [t for t in _SPLIT_RE.split(body) if t]
        if not tokens or not all(_NUMBER_RE.fullmatch(t) for t in tokens):
            continue
        values = [float(t) for t in tokens]
        idx = len(answer.boxes)
        if len(values) != arity:
            warnings.append(
                Diagnostic("arity_mismatch", f"expected {arity} numbers, got {len(values)}: [{body}]")
            )
            continue
        if not all(math.isfinite(v) for v in values):
            warnings.append(Diagnostic("non_finite", f"non-finite coordinate in [{body}]"))
            continue
        values = _clamp(values, idx, warnings)
        if task == "hbb":
            x0, y0, x1, y1 = values
            if x0 > x1 or y0 > y1:
                warnings.append(Diagnostic("swapped", f"min/max swapped in [{body}]", idx))
                x0, x1 = min(x0, x1), max(x0, x1)
                y0, y1 = min(y0, y1), max(y0, y1)
            answer.boxes.append(HBox(x0, y0, x1, y1, NORMALIZED))
        else:
            pts = list(zip(values[0::2], values[1::2]))
            try:
                answer.boxes.append(canonicalize_quad(pts, NORMALIZED))
            except GeometryError as exc:
                warnings.append(Diagnostic("invalid_quad", f"{exc}"))
    if not answer.boxes and text.strip().lower() != EMPTY_ANSWER.lower():
        warnings.append(Diagnostic("no_match", "no box found in answer text"))
    return answer


def validate_answer(answer: DetectionAnswer) -> list[Diagnostic]:
    """Parse-time warnings plus range, degeneracy and duplicate checks."""
    diags = list(answer.warnings)
    for i, b in enumerate(answer.boxes):
        coords = b.as_tuple() if isinstance(b, HBox) else b.flat()
        if any(c < 0.0 or c > 1.0 for c in coords):
            diags.append(Diagnostic("out_of_range", f"coordinates outside [0, 1]: {coords}", i))
        if b.area <= 0.0:
            diags.append(Diagnostic("degenerate", "box has zero area", i))
    for i in range(len(answer.boxes)):
        for j in range(i + 1, len(answer.boxes)):
            a, b = answer.boxes[i], answer.boxes[j]
            if type(a) is not type(b) or a.area <= 0.0 or b.area <= 0.0:
                if a == b:
                    diags.append(Diagnostic("duplicate", f"box {j} duplicates box {i}", j))
                continue
            if box_iou(a, b) > DUPLICATE_IOU:
                diags.append(Diagnostic("duplicate", f"box {j} duplicates box {i}", j))
    return diags
