"""Two-stage tuning of the toy model on rendered single-ship scenes.

Stage one aligns the fusion projection and LoRA factors on short captions.
Stage two switches on the per-layer bias/scale deltas and learns to answer the
detection instruction. Takes about three minutes on one CPU core.

Run: python3 demos/05_two_stage_training.py [--scenes 32]
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import replace

import torch

from popeye import synthetic
from popeye.answer_codec import parse_answer, serialize_answer
from popeye.fusion import PopeyeToy, Sample, ToyModelConfig, compute_loss, decode_answer, stage_defaults, train_stage
from popeye.geometry import hbb_iou
from popeye.labeling import build_instruction


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scenes", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    scenes = synthetic.scenes(args.scenes, seed=args.seed)
    instruction = build_instruction("hbb")
    captions = [Sample(s.image, synthetic.CAPTION_INSTRUCTION, synthetic.caption_for(s.box)) for s in scenes]
    detections = [Sample(s.image, instruction, serialize_answer([s.box], "hbb")) for s in scenes]
    print("caption example:  ", captions[0].answer)
    print("detection example:", detections[0].answer)

    model = PopeyeToy(ToyModelConfig(seed=args.seed))
    trainable, total = model.count_parameters()
    print(f"alignment stage trains {trainable}/{total} parameters ({100 * trainable / total:.1f}%)")
    with torch.no_grad():
        before = float(compute_loss(model, detections))

    train_stage(model, captions, "alignment", replace(stage_defaults("alignment"), seed=args.seed))
    train_stage(model, detections, "ship", replace(stage_defaults("ship"), seed=args.seed))
    trainable, total = model.count_parameters()
    print(f"ship stage trained {trainable}/{total} parameters")

    with torch.no_grad():
        after = float(compute_loss(model, detections))
    print(f"detection loss {before:.3f} -> {after:.4f}")

    hits = 0
    for i, s in enumerate(scenes):
        text = decode_answer(model, s.image, instruction)
        boxes = parse_answer(text, "hbb").boxes
        iou = hbb_iou(boxes[0], s.box) if boxes else 0.0
        hits += iou >= 0.5
        if i < 4:
            print(f"  scene {i}: {text!r}  IoU {iou:.3f}")
    print(f"{hits}/{len(scenes)} scenes decode to a box with IoU >= 0.5")


if __name__ == "__main__":
    main()
