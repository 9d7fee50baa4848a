"""Scoring detections: greedy matching, the PR envelope, AP at three IoU thresholds.

Run: python3 demos/03_evaluation.py [--svg curves.svg]
"""

from __future__ import annotations

import argparse

from popeye.evaluation import Detection, EvalReport, evaluate_detections, format_report, pr_curve_svg
from popeye.geometry import HBox


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--svg", help="write the PR curves here")
    args = parser.parse_args()

    gts = {
        "a": [HBox(0.10, 0.10, 0.30, 0.30), HBox(0.60, 0.60, 0.80, 0.90)],
        "b": [HBox(0.40, 0.20, 0.55, 0.45)],
    }
    preds = [
        Detection("a", HBox(0.11, 0.10, 0.31, 0.31), 0.95),  # near-perfect
        Detection("a", HBox(0.12, 0.12, 0.30, 0.30), 0.90),  # duplicate of the first: a false positive
        Detection("b", HBox(0.42, 0.26, 0.56, 0.46), 0.80),  # decent overlap
        Detection("a", HBox(0.64, 0.66, 0.84, 0.96), 0.60),  # loose: survives only low thresholds
        Detection("b", HBox(0.80, 0.80, 0.90, 0.90), 0.40),  # clutter
    ]
    ours = evaluate_detections(preds, gts, "hbb", method="demo", dataset="toy")
    for tau in ours.thresholds:
        curve = ours.curves[tau]
        pts = ", ".join(f"({r:.2f}, {p:.2f})" for r, p in curve.points())
        print(f"IoU {tau:.2f}: AP {ours.ap[tau]:.4f}  PR points {pts}")

    # A second row with externally reported numbers shows the table layout.
    reference = EvalReport("Popeye", "ShipRSImageNet", "hbb", {0.4: 0.5668, 0.5: 0.5530, 0.6: 0.5353})
    print()
    print(format_report([reference, ours], "table"))
    if args.svg:
        with open(args.svg, "w", encoding="utf-8") as fh:
            fh.write(pr_curve_svg([ours], 0.5))
        print(f"wrote {args.svg}")


if __name__ == "__main__":
    main()
