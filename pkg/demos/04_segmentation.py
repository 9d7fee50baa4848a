"""Detections as prompts: box-fill versus Otsu-threshold masks on a synthetic ship.

Run: python3 demos/04_segmentation.py
"""

from __future__ import annotations

from popeye.geometry import HBox
from popeye.segmentation import BoxFillSegmenter, MaskImage, ThresholdSegmenter, boxes_to_prompts, mask_metrics, segment
from popeye.synthetic import render_bright_rectangle


def main() -> None:
    w, h, rect = 120, 80, (40, 30, 80, 50)
    image = render_bright_rectangle(w, h, rect, seed=1)
    truth = MaskImage.zeros(w, h)
    truth.data[rect[1]:rect[3], rect[0]:rect[2]] = 1

    # A detector rarely hugs the hull; give it a loose normalized box.
    loose = HBox(34 / w, 26 / h, 86 / w, 55 / h)
    prompts = boxes_to_prompts([loose], (w, h))
    print("pixel prompt:", prompts.boxes[0].as_tuple())
    for seg in (BoxFillSegmenter(), ThresholdSegmenter()):
        (mask,) = segment(image, prompts, seg).masks
        m = mask_metrics(mask, truth)
        print(f"{type(seg).__name__:20s} IoU {m['iou']:.4f}  pixel accuracy {m['pixel_accuracy']:.4f}")

    # A flat crop has no foreground; the segmenter reports it and returns an empty mask.
    flat = render_bright_rectangle(w, h, (0, 0, 0, 0), seed=2, noise=0.0)
    result = segment(flat, prompts, ThresholdSegmenter())
    print("flat crop:", result.warnings, "mask area", int(result.masks[0].data.sum()))


if __name__ == "__main__":
    main()
