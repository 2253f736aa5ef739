#!/usr/bin/env python3
"""End-to-end demo: generate the standard corpus, run every stage through the
CLI, and print the final evaluation report."""

import json
import sys
import tempfile
from pathlib import Path

from segdebias.cli import main


def run(argv):
    print("$ segdebias " + " ".join(argv))
    code = main(argv)
    if code != 0:
        sys.exit(code)


def demo() -> None:
    root = Path(tempfile.mkdtemp(prefix="segdebias_demo_"))
    corpus = root / "corpus"
    run(["synth", "--out", str(corpus)])
    manifest = str(corpus / "manifest.jsonl")
    run(["cluster", "--manifest", manifest, "--seed", "0", "--out", str(root / "bank.bin")])
    run(["select", "--bank", str(root / "bank.bin"), "--alpha", "0.40",
         "--out", str(root / "centroids.json")])
    run(["debias", "--manifest", manifest, "--centroids", str(root / "centroids.json"),
         "--threshold", "0.30", "--out", str(root / "debiased")])
    run(["train", "--manifest", manifest, "--debiased", str(root / "debiased"),
         "--epochs", "40", "--lr", "1e-3", "--ema", "0.99", "--seed", "0",
         "--out", str(root / "head.bin"), "--log", str(root / "metrics.csv"),
         "--pred-out", str(root / "preds")])
    run(["eval", "--manifest", manifest, "--pred", str(root / "preds"),
         "--out", str(root / "report.json"), "--fp-csv", str(root / "fp.csv")])
    run(["export-centroids", "--bank", str(root / "bank.bin"),
         "--centroids", str(root / "centroids.json"), "--out", str(root / "centroids.csv")])

    report = json.loads((root / "report.json").read_text())
    print(f"\nartifacts under {root}")
    print(f"final mIoU {report['miou']:.4f}  fp {report['fp_rate']:.5f}  "
          f"fn {report['fn_rate']:.5f}")


if __name__ == "__main__":
    demo()
