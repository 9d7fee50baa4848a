"""Acceptance criteria A1-A9.

Each test carries an ``acceptance`` marker; the conftest hook prints one
PASS/FAIL line per criterion in the terminal summary.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from popeye import synthetic
from popeye.answer_codec import parse_answer, quantize, serialize_answer
from popeye.cli import main as cli_main
from popeye.evaluation import EvalReport, NoGroundTruth, box_to_list, evaluate, format_report
from popeye.fusion import PopeyeToy, Sample, ToyModelConfig, compute_loss, decode_answer, stage_defaults, train_stage
from popeye.fusion.layers import DTYPE, BiasScaleLinear, LoraLinear
from popeye.geometry import CoordSpace, HBox, canonicalize_quad, hbb_iou, quad_iou
from popeye.labeling import build_instruction
from popeye.segmentation import (
    BoxFillSegmenter,
    MaskImage,
    PromptSet,
    ThresholdSegmenter,
    box_mask,
    boxes_to_prompts,
    mask_metrics,
    segment,
)

from fusion_helpers import fd_rel_error, gradient_check_model
from generators import CENTERED_SQUARE, random_convex_quad, random_instance, rotated_unit_square
from oracles import ap_ref, raster_iou


def _verdict(record_property, ok: bool, detail: str) -> None:
    record_property("detail", detail)
    print(("PASS " if ok else "FAIL ") + detail)
    assert ok, detail


@pytest.mark.acceptance("A1", "quad IoU vs 1000x1000 rasterization")
def test_a1_geometry_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, overlapping = 0.0, 0
    for i in range(1000):
        a, b = random_convex_quad(rng), random_convex_quad(rng)
        if i % 2:
            # pull b onto a so that half the pairs overlap substantially
            shift = np.mean(a, axis=0) - np.mean(b, axis=0) + rng.normal(0, 0.05, 2)
            moved = np.asarray(b) + shift
            if moved.min() >= 0 and moved.max() <= 1:
                b = [tuple(p) for p in moved]
        got = quad_iou(canonicalize_quad(a), canonicalize_quad(b))
        overlapping += got > 0
        worst = max(worst, abs(got - raster_iou(a, b, n=1000)))
    analytic = quad_iou(canonicalize_quad(CENTERED_SQUARE), canonicalize_quad(rotated_unit_square()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 2e-3 and abs(analytic - 1 / math.sqrt(2)) <= 1e-6 and elapsed < 30 and overlapping >= 400
    _verdict(record_property, ok, f"max |err| {worst:.2e} over 1000 pairs ({overlapping} overlapping), "
                                  f"45deg square {analytic:.9f}, {elapsed:.1f}s")


@pytest.mark.acceptance("A2", "AP equals brute-force oracle on 50 instances")
def test_a2_ap_oracle(record_property, tmp_path):
    worst, monotone, checked = 0.0, True, 0
    taus = (0.4, 0.5, 0.6)
    for seed in range(50):
        images, preds, gts = random_instance(np.random.default_rng(seed), n_images=10, max_boxes=10, max_gt=10)
        pred_file, gt_file = tmp_path / f"p{seed}.jsonl", tmp_path / f"g{seed}.jsonl"
        pred_file.write_text("".join(json.dumps({"image_id": d.image_id, "box": box_to_list(d.box),
                                                 "confidence": d.confidence}) + "\n" for d in preds))
        gt_file.write_text("".join(json.dumps({"image_id": k, "boxes": [box_to_list(b) for b in v]}) + "\n"
                                   for k, v in gts.items()))
        if not any(gts.values()):
            with pytest.raises(NoGroundTruth):
                evaluate(pred_file, gt_file, "hbb", taus)
            continue
        rep = evaluate(pred_file, gt_file, "hbb", taus)
        for tau in taus:
            worst = max(worst, abs(rep.ap[tau] - ap_ref(images, tau)))
        monotone &= rep.ap[0.6] <= rep.ap[0.5] <= rep.ap[0.4]
        checked += 1
    ok = worst <= 1e-9 and monotone and checked >= 45
    _verdict(record_property, ok, f"{checked} instances, max |AP - oracle| {worst:.1e}, monotone {monotone}")


@pytest.mark.acceptance("A3", "zero-init adapters are the identity")
def test_a3_adapter_identity(record_property):
    img = np.random.default_rng(0).random((32, 32))
    instr, answer = build_instruction("hbb"), "[0.100, 0.200, 0.300, 0.400]"

    model = PopeyeToy(ToyModelConfig())
    with torch.no_grad():
        adapted = model(img, instr, answer)
        for mod in model.modules():
            if isinstance(mod, LoraLinear):
                mod.scaling = 0.0
        lora_diff = float((adapted - model(img, instr, answer)).abs().max())

    base = PopeyeToy(ToyModelConfig())
    ship = PopeyeToy(ToyModelConfig())
    ship.set_stage("ship_adaption")
    with torch.no_grad():
        for mod in ship.modules():
            if isinstance(mod, BiasScaleLinear):
                mod.delta_bias.zero_()
                mod.delta_scale.fill_(1.0)
    exact = torch.equal(ship(img, instr, answer), base(img, instr, answer))
    g = torch.Generator().manual_seed(1)
    layer = BiasScaleLinear(LoraLinear(16, 8, rank=4, generator=g), generator=g)
    with torch.no_grad():
        layer.delta_scale.fill_(1.0)
    x = torch.randn(5, 16, generator=g, dtype=DTYPE)
    exact_layer = torch.equal(layer(x), layer.inner(x))

    ok = lora_diff <= 1e-6 and exact and exact_layer
    _verdict(record_property, ok, f"LoRA max diff {lora_diff:.1e}, bias/scale exact: model {exact}, layer {exact_layer}")


@pytest.mark.acceptance("A4", "finite-difference gradient check, D=32 two layers")
def test_a4_gradient_check(record_property):
    t0 = time.perf_counter()
    model, batch = gradient_check_model()
    assert model.config.model_dim == 32 and model.config.total_layers == 2
    groups = model.parameter_groups()
    worst: dict[str, float] = {}
    n_tensors = 0
    for cls in ("lora", "projection", "bias", "scale", "embeddings"):
        names = [n for n, _ in groups[cls]]
        assert names, cls
        errs = fd_rel_error(model, batch, names, n_coords=3)
        worst[cls] = max(errs.values())
        n_tensors += len(names)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 300
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    _verdict(record_property, ok, f"{n_tensors} tensors, worst rel err: {summary}, {elapsed:.0f}s")


@pytest.mark.slow
@pytest.mark.acceptance("A5", "two-stage training on 32 synthetic ships")
def test_a5_learning_signal(record_property):
    t0 = time.perf_counter()
    scenes = synthetic.scenes(32, seed=0)
    instruction = build_instruction("hbb")
    captions = [Sample(s.image, synthetic.CAPTION_INSTRUCTION, synthetic.caption_for(s.box)) for s in scenes]
    detections = [Sample(s.image, instruction, serialize_answer([s.box], "hbb")) for s in scenes]

    model = PopeyeToy(ToyModelConfig())
    with torch.no_grad():
        initial = float(compute_loss(model, detections))
    train_stage(model, captions, "alignment", replace(stage_defaults("alignment"), log_every=0))
    train_stage(model, detections, "ship", replace(stage_defaults("ship"), log_every=0))
    with torch.no_grad():
        final = float(compute_loss(model, detections))
    hits = 0
    for s in scenes:
        parsed = parse_answer(decode_answer(model, s.image, instruction), "hbb")
        hits += bool(parsed.boxes) and hbb_iou(parsed.boxes[0], s.box) >= 0.5
    elapsed = time.perf_counter() - t0
    ok = final < 0.1 * initial and hits >= 29 and elapsed < 900
    _verdict(record_property, ok, f"loss {initial:.3f} -> {final:.4f} (ratio {final / initial:.3f}), "
                                  f"{hits}/32 decodes with IoU >= 0.5, {elapsed:.0f}s")


def _fuzz_string(rng: np.random.Generator) -> str:
    pieces = []
    for _ in range(int(rng.integers(0, 24))):
        r = rng.random()
        if r < 0.45:
            pieces.append(str(rng.choice(list("[];,. -+e0123456789\n\t"))))
        elif r < 0.6:
            pieces.append(f"{rng.normal(0.5, 2):.{int(rng.integers(0, 6))}f}")
        elif r < 0.9:
            pieces.append(chr(int(rng.integers(32, 127))))
        else:
            cp = int(rng.integers(0x80, 0x110000))
            pieces.append(chr(cp) if not 0xD800 <= cp <= 0xDFFF else "�")
    return "".join(pieces)


def _random_boxes(rng: np.random.Generator, task: str) -> list:
    out = []
    for _ in range(int(rng.integers(0, 5))):
        if task == "hbb":
            x, y = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
            out.append(HBox(float(x[0]), float(y[0]), float(x[1]), float(y[1])))
        else:
            cx, cy = rng.uniform(0.3, 0.7, 2)
            w, h = rng.uniform(0.05, 0.2, 2)
            t = rng.uniform(0, math.pi)
            c, s = math.cos(t), math.sin(t)
            out.append(canonicalize_quad([(cx + c * dx - s * dy, cy + s * dx + c * dy)
                                          for dx, dy in ((-w, -h), (w, -h), (w, h), (-w, h))]))
    return out


@pytest.mark.acceptance("A6", "codec totality on 100k strings and 10k round trips")
def test_a6_codec(record_property):
    rng = np.random.default_rng(6)
    crashes = 0
    for _ in range(100_000):
        text = _fuzz_string(rng)
        text.encode("utf-8")
        for task in ("hbb", "obb"):
            try:
                parsed = parse_answer(text, task)
                coords = [c for b in parsed.boxes for c in (b.as_tuple() if task == "hbb" else b.flat())]
                crashes += any(not 0.0 <= c <= 1.0 for c in coords)
            except Exception:
                crashes += 1
    mismatches = 0
    for i in range(10_000):
        task = "hbb" if i % 2 == 0 else "obb"
        boxes = _random_boxes(rng, task)
        got = parse_answer(serialize_answer(boxes, task), task).boxes
        if task == "hbb":
            expected = [HBox(*(quantize(c) for c in b.as_tuple())) for b in boxes]
        else:
            expected = [canonicalize_quad([(quantize(x), quantize(y)) for x, y in b.vertices]) for b in boxes]
        mismatches += got != expected
    ok = crashes == 0 and mismatches == 0
    _verdict(record_property, ok, f"{crashes} crashes or out-of-range boxes in 100000 strings, "
                                  f"{mismatches}/10000 round-trip mismatches")


def _sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.acceptance("A7", "convert and eval reruns are byte-identical")
def test_a7_pipeline_determinism(record_property, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    codes = [cli_main(["synth", "--n", "12", "--out", "data", "-q"])]
    for name in ("a", "b"):
        codes.append(cli_main(["convert", "--images", "data", "--task", "obb", "--out", f"conv_{name}.jsonl", "-q"]))
    rows = [json.loads(line) for line in (tmp_path / "conv_a.jsonl").read_text().splitlines()]
    with (tmp_path / "preds.jsonl").open("w") as fh:
        for k, r in enumerate(rows):
            for box in parse_answer(r["answer"], "obb").boxes:
                jitter = [min(1.0, v + 0.01 * (k % 3)) for v in box.flat()]
                fh.write(json.dumps({"image_id": r["image"][:-4], "task": "obb", "box": jitter,
                                     "confidence": 1.0 - k / 100}) + "\n")
    for name in ("a", "b"):
        codes.append(cli_main(["eval", "--preds", "preds.jsonl", "--gt", "conv_a.jsonl", "--task", "obb",
                               "--out", f"rep_{name}.json", "-q"]))
    codes.append(cli_main(["eval", "--config", "rep_a.json.config.json", "--out", "rep_c.json", "-q"]))
    same_convert = _sha(tmp_path / "conv_a.jsonl") == _sha(tmp_path / "conv_b.jsonl")
    same_eval = _sha(tmp_path / "rep_a.json") == _sha(tmp_path / "rep_b.json") == _sha(tmp_path / "rep_c.json")
    ok = same_convert and same_eval and codes == [0] * len(codes) and len(rows) == 12
    _verdict(record_property, ok, f"convert identical {same_convert}, eval identical {same_eval} "
                                  f"(incl. snapshot rerun), exit codes {codes}")


@pytest.mark.acceptance("A8", "segmentation fixture")
def test_a8_segmentation(record_property):
    w, h, rect = 120, 80, (40, 30, 80, 50)
    image = synthetic.render_bright_rectangle(w, h, rect, seed=1)
    truth = np.zeros((h, w), np.uint8)
    truth[rect[1]:rect[3], rect[0]:rect[2]] = 1
    loose = HBox(34, 26, 86, 55, CoordSpace.pixel(w, h))
    (mask,) = segment(image, PromptSet((loose,), (w, h)), ThresholdSegmenter()).masks
    threshold_iou = mask_metrics(mask, MaskImage(truth))["iou"]

    prompts = boxes_to_prompts([HBox(0.1, 0.2, 0.45, 0.7), HBox(0.5, 0.05, 0.95, 0.4)], (w, h))
    fills = segment(image, prompts, BoxFillSegmenter()).masks
    fill_ious = [mask_metrics(m, box_mask(b, (w, h)))["iou"] for m, b in zip(fills, prompts.boxes)]
    ok = threshold_iou >= 0.95 and all(v == 1.0 for v in fill_ious)
    _verdict(record_property, ok, f"threshold IoU {threshold_iou:.4f}, box-fill IoU {fill_ious}")


@pytest.mark.acceptance("A9", "report renders 56.68 / 55.30 / 53.53")
def test_a9_report_fidelity(record_property):
    rep = EvalReport("Popeye", "ShipRSImageNet", "hbb", {0.4: 0.5668, 0.5: 0.5530, 0.6: 0.5353})
    table = format_report(rep, "table").splitlines()
    csv_text = format_report(rep, "csv")
    row = table[2].split()
    ok = (table[0].split()[-3:] == ["AP@40", "AP@50", "AP@60"] and row[-3:] == ["56.68", "55.30", "53.53"]
          and csv_text.splitlines()[1] == "Popeye,ShipRSImageNet,56.68,55.30,53.53")
    _verdict(record_property, ok, f"table row {' '.join(row)!r}, csv {csv_text.splitlines()[1]!r}")
