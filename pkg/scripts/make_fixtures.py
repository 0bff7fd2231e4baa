"""Regenerate the tiny regression fixture under tests/fixtures/tiny/.

The fixture pins a byte-exact gen -> train -> eval pipeline; rerun this
script only when a deliberate change invalidates it, and commit the result.
"""

import pathlib
import sys

from epica.cli import main

FIXTURE = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "tiny"


def run(argv):
    code = main(argv)
    if code != 0:
        sys.exit(f"fixture step failed ({code}): {argv}")


def build():
    FIXTURE.mkdir(parents=True, exist_ok=True)
    run(
        [
            "gen",
            "--out-dir", str(FIXTURE),
            "--n-attrs", "4", "--n-objs", "4",
            "--blocks", "6", "--feature-dim", "8",
            "--attr-blocks", "0", "--obj-blocks", "1",
            "--noise-sigma", "0.1", "--images-per-pair", "4",
            "--seen-fraction", "0.7", "--seed", "0",
        ]
    )
    run(
        [
            "train",
            "--features", str(FIXTURE / "features.epcf"),
            "--split", str(FIXTURE / "pairs.split"),
            "--checkpoint-out", str(FIXTURE / "model.epck"),
            "--metrics-out", str(FIXTURE / "metrics.csv"),
            "--phase", "inductive",
            "--dk", "8", "--embed-dim", "8", "--hidden", "16",
            "--n-t", "5", "--batch-size", "8", "--lr", "1e-3",
            "--epochs-inductive", "2", "--seed", "0",
        ]
    )
    run(
        [
            "eval",
            "--features", str(FIXTURE / "features.epcf"),
            "--split", str(FIXTURE / "pairs.split"),
            "--checkpoint", str(FIXTURE / "model.epck"),
            "--setting", "conventional",
            "--report-out", str(FIXTURE / "report.json"),
        ]
    )
    print(f"fixture written to {FIXTURE}")


if __name__ == "__main__":
    build()
