"""IG completeness residual versus step count on the slack-trained toy model.

    python scripts/completeness_sweep.py --held 20

Prints one row per held-out file (residual relative to the score gap) and a
pooled row. Useful for judging how far the Riemann sum is from converged.
"""

import argparse

import numpy as np

from spurscan.ig import IgConfig, integrated_gradients
from spurscan.synth import PlantSpec, gen_dataset, toy_config, toy_template, train_toy

STEPS = (25, 50, 100, 200, 300)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--held", type=int, default=5, help="held-out files per class")
    p.add_argument("--held-seed", type=int, default=7)
    p.add_argument("--target", choices=["score", "logit"], default="score")
    args = p.parse_args(argv)

    cfg = toy_config("malconv")
    train = gen_dataset(100, toy_template(), PlantSpec("slack", 1.0), seed=0)
    weights = train_toy(cfg, train, epochs=30, seed=0).weights
    held = gen_dataset(args.held, toy_template(), PlantSpec("slack", 1.0), seed=args.held_seed)

    res = np.zeros((len(held), len(STEPS)))
    gaps = np.zeros(len(held))
    print(f"{'file':<16} {'gap':>8} " + " ".join(f"{m:>9}" for m in STEPS))
    for i, s in enumerate(held):
        for j, m in enumerate(STEPS):
            a = integrated_gradients(cfg, weights, IgConfig(steps=m, target=args.target), s.data)
            res[i, j] = a.completeness_residual
        gaps[i] = abs(a.gap)
        print(f"{s.name:<16} {a.gap:+8.4f} " + " ".join(f"{r / gaps[i]:9.2e}" for r in res[i]))
    pooled = res.sum(axis=0) / gaps.sum()
    print(f"{'pooled':<16} {'':>8} " + " ".join(f"{r:9.2e}" for r in pooled))


if __name__ == "__main__":
    main()
