"""From raw DOTA-style labels to instruction records, and back from model text to boxes.

Run: python3 demos/02_labels_and_answers.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from popeye.answer_codec import parse_answer, validate_answer
from popeye.labeling import convert_dataset, read_records


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        Image.fromarray(np.zeros((200, 400), np.uint8)).save(root / "harbor.png")
        (root / "harbor.txt").write_text(
            "imagesource:GoogleEarth\n"
            "gsd:0.5\n"
            "40 20 120 20 120 60 40 60 ship 0\n"
            "300 150 340 110 360 130 320 170 ship 1\n"
            "10 10 30 10 30 30 10 30 plane 0\n"  # not a ship: filtered
            "5 5 6 6 7 7 8 8 ship 0\n"  # collinear: dropped and counted
        )
        for task in ("hbb", "obb"):
            stats = convert_dataset(root, "dota", task, root / f"{task}.jsonl")
            (rec,) = read_records(root / f"{task}.jsonl")
            print(f"[{task}] {stats.as_dict()}")
            print(f"  instruction: {rec.instruction}")
            print(f"  answer:      {rec.answer}")

    # Model output is rarely tidy; the parser keeps what it can and says why.
    for text in [
        "Sure! I found [0.100, 0.100, 0.300, 0.300] and [0.9, 0.2, 0.6, 0.5].",
        "[0.1, 0.2, 0.3]; [0.2, 0.2, 0.4, 1.3]",
        "No ship is detected.",
        "there are some boats",
    ]:
        ans = parse_answer(text, "hbb")
        notes = [d.code for d in validate_answer(ans)]
        print(f"{text!r}\n  -> {[b.as_tuple() for b in ans.boxes]} {notes}")


if __name__ == "__main__":
    main()
