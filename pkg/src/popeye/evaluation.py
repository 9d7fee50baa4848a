"""Detection evaluation: greedy matching, PR curves and AP at several IoU thresholds.

Prediction JSONL rows: ``{"image_id", "task", "box": [4 or 8 floats], "confidence"}``.
Ground-truth JSONL rows: ``{"image_id", "task", "boxes": [[...], ...]}``.
All coordinates are normalized.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .answer_codec import ARITY, parse_answer
from .fusion.encoder import EncoderStandIn, load_image
from .geometry import (
    EPS_BOUNDS,
    NORMALIZED,
    Box,
    GeometryError,
    HBox,
    OBox,
    OutOfBounds,
    box_iou,
    canonicalize_quad,
    quad_bounding_hbox,
)

DEFAULT_THRESHOLDS = (0.4, 0.5, 0.6)


class EvalError(ValueError):
    pass


class GeometryMismatch(EvalError):
    pass


class NoGroundTruth(EvalError):
    pass


class FileFormatError(EvalError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    confidence: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise EvalError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class MatchResult:
    """Per-prediction TP flags in the order predictions were processed."""

    order: tuple[int, ...]  # indices into the input prediction list
    tp: tuple[bool, ...]  # aligned with ``order``
    matched_gt: tuple[int | None, ...]
    n_gt: int

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp

    @property
    def n_fn(self) -> int:
        return self.n_gt - self.n_tp


@dataclass(frozen=True)
class PRCurve:
    recall: tuple[float, ...]
    precision: tuple[float, ...]
    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    n_gt: int

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall, self.precision))


def _kind(box: Box) -> str:
    return "hbb" if isinstance(box, HBox) else "obb"


def match_detections(preds: Sequence[Detection], gts: Sequence[Box], iou_threshold: float) -> MatchResult:
    """Greedy matching in descending confidence (stable: ties keep input order).

    Each prediction takes the still-unmatched ground truth with the highest
    IoU; IoU ties go to the lower ground-truth index.
    """
    kinds = {_kind(b) for b in gts} | {_kind(d.box) for d in preds}
    if len(kinds) > 1:
        raise GeometryMismatch(f"mixed geometries: {sorted(kinds)}")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    taken = [False] * len(gts)
    tp: list[bool] = []
    matched: list[int | None] = []
    for i in order:
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            iou = box_iou(preds[i].box, g)
            if iou > best_iou:
                best, best_iou = j, iou
        if best is not None and best_iou >= iou_threshold:
            taken[best] = True
            tp.append(True)
            matched.append(best)
        else:
            tp.append(False)
            matched.append(None)
    return MatchResult(tuple(order), tuple(tp), tuple(matched), len(gts))


def pr_curve(ranked_tp: Sequence[bool], n_gt: int) -> PRCurve:
    """Precision/recall after each detection of a confidence-ranked list.

    ``ranked_tp`` is the TP flag of every detection across all images, sorted
    by descending confidence.
    """
    if n_gt <= 0:
        raise NoGroundTruth("AP is undefined without ground truth boxes")
    tp_c = np.cumsum(np.asarray(ranked_tp, dtype=np.int64)) if len(ranked_tp) else np.zeros(0, np.int64)
    fp_c = np.arange(1, len(ranked_tp) + 1) - tp_c
    recall = tp_c / n_gt
    precision = tp_c / np.maximum(tp_c + fp_c, 1)
    return PRCurve(
        tuple(recall.tolist()),
        tuple(precision.tolist()),
        tuple(tp_c.tolist()),
        tuple(fp_c.tolist()),
        tuple((n_gt - tp_c).tolist()),
        n_gt,
    )


def average_precision(curve: PRCurve) -> float:
    """All-points interpolated AP: area under the monotone precision envelope."""
    if not curve.recall:
        return 0.0
    mrec = np.concatenate(([0.0], curve.recall, [1.0]))
    mpre = np.concatenate(([0.0], curve.precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def rank_detections(
    preds_by_image: dict[str, list[tuple[int, Detection]]],
    gts_by_image: dict[str, list[Box]],
    tau: float,
) -> list[bool]:
    """Match every image, then merge into one TP list ranked by confidence.

    ``preds_by_image`` holds ``(input_position, detection)`` pairs; equal
    confidences keep input order.
    """
    rows: list[tuple[float, int, bool]] = []
    for image_id in sorted(set(preds_by_image) | set(gts_by_image)):
        items = preds_by_image.get(image_id, [])
        res = match_detections([d for _, d in items], gts_by_image.get(image_id, []), tau)
        flags = dict(zip(res.order, res.tp))
        for k, (pos, d) in enumerate(items):
            rows.append((d.confidence, pos, flags[k]))
    rows.sort(key=lambda r: (-r[0], r[1]))
    return [r[2] for r in rows]


@dataclass
class EvalReport:
    method: str
    dataset: str
    task: str
    ap: dict[float, float]
    n_detections: int = 0
    n_gt: int = 0
    curves: dict[float, PRCurve] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.ap = {float(t): float(v) for t, v in sorted(self.ap.items())}

    @property
    def thresholds(self) -> list[float]:
        return list(self.ap)

    def to_dict(self, with_curves: bool = True) -> dict:
        d = {
            "method": self.method,
            "dataset": self.dataset,
            "task": self.task,
            "n_detections": self.n_detections,
            "n_gt": self.n_gt,
            "ap": {_tau_key(t): v for t, v in self.ap.items()},
        }
        if with_curves:
            d["curves"] = {
                _tau_key(t): {"recall": list(c.recall), "precision": list(c.precision)}
                for t, c in sorted(self.curves.items())
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        curves = {}
        for k, c in d.get("curves", {}).items():
            rec, prec = tuple(c["recall"]), tuple(c["precision"])
            curves[float(k)] = PRCurve(rec, prec, (), (), (), d.get("n_gt", 0))
        return cls(
            d.get("method", ""),
            d.get("dataset", ""),
            d["task"],
            {float(k): v for k, v in d["ap"].items()},
            d.get("n_detections", 0),
            d.get("n_gt", 0),
            curves,
        )


def _tau_key(t: float) -> str:
    return f"{t:.2f}"


def evaluate_detections(
    preds: Sequence[Detection],
    gts_by_image: dict[str, list[Box]],
    task: str,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    method: str = "",
    dataset: str = "",
) -> EvalReport:
    preds_by_image: dict[str, list[tuple[int, Detection]]] = {}
    for pos, d in enumerate(preds):
        preds_by_image.setdefault(d.image_id, []).append((pos, d))
    n_gt = sum(len(v) for v in gts_by_image.values())
    ap, curves = {}, {}
    for tau in sorted(float(t) for t in thresholds):
        ranked = rank_detections(preds_by_image, gts_by_image, tau)
        curve = pr_curve(ranked, n_gt)
        curves[tau] = curve
        ap[tau] = average_precision(curve)
    return EvalReport(method, dataset, task, ap, len(preds), n_gt, curves)


def box_from_list(values: Sequence[float], task: str) -> Box:
    if task not in ARITY or len(values) != ARITY[task]:
        raise EvalError(f"{task} box needs {ARITY.get(task)} numbers, got {len(values)}")
    vals = [float(v) for v in values]
    if task == "hbb":
        return HBox(*vals, NORMALIZED)
    return canonicalize_quad(list(zip(vals[0::2], vals[1::2])), NORMALIZED)


def box_to_list(box: Box) -> list[float]:
    return list(box.as_tuple()) if isinstance(box, HBox) else list(box.flat())


def _read_jsonl(path):
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(path, line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(row, dict):
                raise FileFormatError(path, line_no, "row is not an object")
            yield line_no, row


def read_predictions(path, task: str) -> list[Detection]:
    out = []
    for line_no, row in _read_jsonl(path):
        try:
            if row.get("task", task) != task:
                continue
            out.append(Detection(str(row["image_id"]), box_from_list(row["box"], task), float(row["confidence"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(path, line_no, f"bad prediction: {exc}") from exc
    return out


def read_ground_truth(path, task: str) -> dict[str, list[Box]]:
    """Rows are ``{"image_id", "boxes"}`` or instruction records ``{"image", "task", "answer"}``."""
    out: dict[str, list[Box]] = {}
    for line_no, row in _read_jsonl(path):
        try:
            if row.get("task", task) != task:
                continue
            if "boxes" in row:
                boxes = [box_from_list(b, task) for b in row["boxes"]]
                image_id = str(row["image_id"])
            else:
                # an instruction record from the labeling converter
                boxes = parse_answer(row["answer"], task).boxes
                image_id = row.get("image_id") or Path(row["image"]).stem
            out.setdefault(image_id, []).extend(boxes)
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(path, line_no, f"bad ground truth: {exc}") from exc
    return out


def evaluate(
    pred_file,
    gt_file,
    task: str,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    method: str = "",
    dataset: str = "",
) -> EvalReport:
    if task not in ARITY:
        raise EvalError(f"unknown task {task!r}")
    gts = read_ground_truth(gt_file, task)
    preds = read_predictions(pred_file, task)
    return evaluate_detections(preds, gts, task, thresholds, method, dataset)


# -- confidence scoring ------------------------------------------------------


class ConfidenceScorer(Protocol):
    def __call__(self, image: np.ndarray, box: Box, label: str = "ship") -> float: ...


class ConstantScorer:
    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def __call__(self, image: np.ndarray, box: Box, label: str = "ship") -> float:
        return self.value


def _ship_template(size: int) -> np.ndarray:
    img = np.full((size, size), 0.1)
    img[size // 3 : size - size // 3, size // 8 : size - size // 8] = 0.9
    return img


class PooledFeatureScorer:
    """Cosine similarity between the pooled encoder features of a crop and a
    rendered ship template, mapped to [0, 1]."""

    def __init__(self, encoder: EncoderStandIn | None = None, crop_size: int = 32):
        self.encoder = encoder or EncoderStandIn("A", patch=8, dim=32, seed=7)
        self.crop_size = crop_size
        # response to a featureless crop; removed so only structure is compared
        self._baseline = self._pool(np.full((crop_size, crop_size), 0.5))
        self.embeddings = {"ship": self._embed(_ship_template(crop_size))}

    def _pool(self, crop: np.ndarray) -> np.ndarray:
        return self.encoder.encode(crop).tokens.mean(axis=0)

    def _embed(self, crop: np.ndarray) -> np.ndarray:
        # contrast-normalize so brightness alone does not drive the score
        std = crop.std()
        norm = 0.5 + 0.25 * (crop - crop.mean()) / std if std > 1e-6 else np.full_like(crop, 0.5)
        v = self._pool(norm) - self._baseline
        n = np.linalg.norm(v)
        return v / n if n > 1e-12 else v

    def _crop(self, image: np.ndarray, box: Box) -> np.ndarray:
        h = quad_bounding_hbox(box) if isinstance(box, OBox) else box
        H, W = image.shape
        x0 = min(int(math.floor(h.x_min * W)), W - 1)
        y0 = min(int(math.floor(h.y_min * H)), H - 1)
        x1 = max(int(math.ceil(h.x_max * W)), x0 + 1)
        y1 = max(int(math.ceil(h.y_max * H)), y0 + 1)
        crop = image[y0:y1, x0:x1]
        n = self.crop_size
        rows = np.minimum((np.arange(n) * crop.shape[0]) // n, crop.shape[0] - 1)
        cols = np.minimum((np.arange(n) * crop.shape[1]) // n, crop.shape[1] - 1)
        return crop[np.ix_(rows, cols)]

    def __call__(self, image: np.ndarray, box: Box, label: str = "ship") -> float:
        if label not in self.embeddings:
            raise EvalError(f"no embedding for label {label!r}")
        v = self._embed(self._crop(image, box))
        cos = float(np.dot(v, self.embeddings[label]))
        return min(1.0, max(0.0, 0.5 * (cos + 1.0)))


def score_confidence(scorer: ConfidenceScorer, image, box: Box, label: str = "ship") -> float:
    coords = box.as_tuple() if isinstance(box, HBox) else box.flat()
    if not box.space.is_normalized:
        raise GeometryError("score_confidence expects normalized boxes")
    if any(c < -EPS_BOUNDS or c > 1 + EPS_BOUNDS for c in coords):
        raise OutOfBounds(f"box outside the image: {coords}")
    score = float(scorer(load_image(image), box, label))
    if not (math.isfinite(score) and 0.0 <= score <= 1.0):
        raise EvalError(f"scorer returned {score}, outside [0, 1]")
    return score


# -- report formatting -------------------------------------------------------


def _col(t: float) -> str:
    return f"AP@{round(t * 100):d}"


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}"


def _report_rows(reports: Sequence[EvalReport]) -> tuple[list[str], list[list[str]]]:
    taus = sorted({t for r in reports for t in r.thresholds}) if reports else list(DEFAULT_THRESHOLDS)
    header = ["method", "dataset"] + [_col(t) for t in taus]
    rows = []
    for r in reports:
        rows.append([r.method, r.dataset] + [_pct(r.ap[t]) if t in r.ap else "" for t in taus])
    return header, rows


def format_report(reports: EvalReport | Sequence[EvalReport], style: str = "table") -> str:
    """Render reports as an aligned table, CSV or JSON (APs in percent, 2 decimals)."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    reports = list(reports)
    if style == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    header, rows = _report_rows(reports)
    if style == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if style == "table":
        widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
        lines = []
        for i, row in enumerate([header] + rows):
            cells = [c.ljust(w) if j < 2 else c.rjust(w) for j, (c, w) in enumerate(zip(row, widths))]
            lines.append("  ".join(cells).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report style {style!r}")


def parse_report_csv(text: str, task: str = "") -> list[EvalReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header, body = rows[0], rows[1:]
    taus = [int(h.split("@", 1)[1]) / 100.0 for h in header[2:]]
    out = []
    for row in body:
        ap = {t: float(v) / 100.0 for t, v in zip(taus, row[2:]) if v != ""}
        out.append(EvalReport(row[0], row[1], task, ap))
    return out


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def pr_curve_svg(reports: Sequence[EvalReport], threshold: float = 0.5, size: int = 360) -> str:
    """Minimal dependency-free SVG of precision-recall curves at one threshold."""
    pad = 40
    inner = size - 2 * pad
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]

    def xy(r: float, p: float) -> str:
        return f"{pad + r * inner:.2f},{pad + (1.0 - p) * inner:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
        f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>',
        f'<text x="12" y="{size / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2:.0f})">precision</text>',
    ]
    for i, r in enumerate(reports):
        curve = r.curves.get(threshold)
        if curve is None or not curve.recall:
            continue
        pts = " ".join(xy(rc, pc) for rc, pc in zip((0.0,) + curve.recall, (1.0,) + curve.precision))
        color = palette[i % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        label = f"{r.method or 'run'} {_col(threshold)}={_pct(r.ap.get(threshold, 0.0))}"
        parts.append(f'<text x="{pad + 6}" y="{pad + 16 + 14 * i}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
