"""Train the blur regressor on synthetic tiles and report held-out error.

    python scripts/qc_blur.py --train 600 --test 400
"""
import argparse

import numpy as np

from histocluster import qc
from histocluster.synthetic import tissue_tile


def tiles(n, seed):
    rng = np.random.default_rng(seed)
    return [tissue_tile(rng, 32, 3) for _ in range(n)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train", type=int, default=600)
    ap.add_argument("--test", type=int, default=400)
    ap.add_argument("--threshold", type=float, default=4.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = qc.train_blur_regressor(qc.make_blur_dataset(tiles(args.train, args.seed), args.seed + 1),
                                    qc.QcConfig(seed=args.seed + 2))
    held = qc.make_blur_dataset(tiles(args.test, args.seed + 3), args.seed + 4)
    pred = model.predict(qc.to_tensor([s.tile for s in held]))
    target = np.array([s.target_radius for s in held])
    print(f"held-out MAE: {np.mean(np.abs(pred - target)):.3f}")
    edges = [0, 1, 2, 4, 6, 8, 10.01]
    for lo, hi in zip(edges, edges[1:]):
        m = (target >= lo) & (target < hi)
        if m.any():
            keep = np.mean(pred[m] <= args.threshold)
            print(f"radius [{lo:g}, {hi:g}): n={m.sum():3d} mean_pred={pred[m].mean():.2f} kept={keep:.2f}")


if __name__ == "__main__":
    main()
