"""Planted-marker experiment end to end through the CLI.

    python scripts/run_planted_experiment.py --plant slack --workdir runs/slack
    python scripts/run_planted_experiment.py --plant code --arch bbdnn

Generates a labelled corpus with the marker in one region, trains a toy
detector on it, then runs ``spurscan analyze``. The exit code is the one
``analyze`` returns (2 when spurious regions dominate).
"""

import argparse
import sys
from pathlib import Path

from spurscan.cli import main as spurscan

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--plant", choices=["dos", "slack", "overlay", "code"], default="slack")
    p.add_argument("--arch", choices=["malconv", "bbdnn"], default="malconv")
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--n", type=int, default=100, help="files per class")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir", default=None)
    args = p.parse_args(argv)

    work = Path(args.workdir or f"runs/{args.arch}_{args.plant}_p{args.p:g}")
    work.mkdir(parents=True, exist_ok=True)
    corpus, model = work / "corpus", work / "model.spurw"
    steps = [
        ["synth", "--plant", args.plant, "--p", str(args.p), "--n", str(args.n),
         "--out", str(corpus), "--seed", str(args.seed)],
        ["train-toy", "--config", str(CONFIGS / f"toy_{args.arch}.json"), "--corpus", str(corpus),
         "--out", str(model), "--epochs", str(args.epochs), "--seed", str(args.seed)],
    ]
    for cmd in steps:
        code = spurscan(cmd)
        if code:
            return code
    return spurscan(["analyze", "--weights", str(model), "--input", str(corpus), "--steps", str(args.steps),
                     "--out", str(work / "report.json"), "--summary", str(work / "summary.csv")])


if __name__ == "__main__":
    sys.exit(main())
