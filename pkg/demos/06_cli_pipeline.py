"""The whole batch workflow through the ``popeye`` command line.

synth -> convert -> train-toy (alignment, ship) -> infer -> eval -> segment -> report

Every step writes a config snapshot next to its output; rerunning a step with
``--config <snapshot>`` reproduces its output byte for byte.

Run: python3 demos/06_cli_pipeline.py [--workdir DIR] [--quick]
"""

from __future__ import annotations

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path


def popeye(*args: str, cwd: Path) -> int:
    cmd = [sys.executable, "-m", "popeye.cli", *args]
    print("$ popeye " + " ".join(args), flush=True)
    code = subprocess.run(cmd, cwd=cwd).returncode
    print(f"  exit {code}\n", flush=True)
    if code == 1:
        raise SystemExit(f"step failed: {' '.join(args)}")
    return code


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", help="keep outputs here instead of a temporary directory")
    parser.add_argument("--quick", action="store_true", help="few training steps; plumbing only")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        work = Path(args.workdir or tmp)
        work.mkdir(parents=True, exist_ok=True)
        steps = ["--steps", "5"] if args.quick else []

        popeye("synth", "--n", "32", "--out", "data", cwd=work)
        popeye("convert", "--images", "data", "--task", "hbb", "--out", "data/det.jsonl", cwd=work)
        popeye("train-toy", "--data", "data/captions.jsonl", "--stage", "alignment", "--out", "align.ckpt",
               *steps, cwd=work)
        popeye("train-toy", "--data", "data/det.jsonl", "--stage", "ship", "--init", "align.ckpt",
               "--out", "ship.ckpt", *steps, cwd=work)
        popeye("infer", "--model", "ship.ckpt", "--images", "data", "--out", "preds.jsonl", "-q", cwd=work)
        popeye("infer", "--model", "ship.ckpt", "--images", "data", "--scorer", "constant",
               "--out", "preds_const.jsonl", "-q", cwd=work)
        popeye("eval", "--preds", "preds.jsonl", "--gt", "data/det.jsonl", "--method", "toy-pooled",
               "--dataset", "synthetic", "--out", "report.json", cwd=work)
        popeye("eval", "--preds", "preds_const.jsonl", "--gt", "data/det.jsonl", "--method", "toy-constant",
               "--dataset", "synthetic", "--out", "report_const.json", cwd=work)
        popeye("segment", "--preds", "preds.jsonl", "--images", "data", "--out", "masks", "-q", cwd=work)
        popeye("report", "--eval", "report.json", "report_const.json", cwd=work)
        popeye("report", "--eval", "report.json", "report_const.json", "--format", "svg", "--out", "pr.svg",
               cwd=work)
        # a snapshot rerun must land on identical bytes
        popeye("eval", "--config", "report.json.config.json", "--out", "report_again.json", "-q", cwd=work)
        same = (work / "report.json").read_bytes() == (work / "report_again.json").read_bytes()
        print("snapshot rerun identical:", same)


if __name__ == "__main__":
    main()
