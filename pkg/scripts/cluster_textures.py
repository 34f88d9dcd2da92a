"""Clustering on the three-texture corpus, against k-means on raw pixels.

    python scripts/cluster_textures.py --seeds 0 1 2 --epochs 20
"""
import argparse

import numpy as np
from sklearn.cluster import KMeans

from histocluster import dcec
from histocluster.synthetic import texture_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lam", type=float, default=0.4)
    args = ap.parse_args()

    print("seed\tdcec_purity\tkmeans_pixels_purity")
    for seed in args.seeds:
        x, truth = texture_corpus(args.n, seed)
        cfg = dcec.TrainConfig(k=3, lam=args.lam, epochs=args.epochs, base_lr=1e-4, batch_size=32,
                               widths=(8, 16), blocks_per_stage=1, seed=seed)
        res = dcec.train(x, cfg)
        km = KMeans(3, n_init=10, random_state=seed).fit(x.reshape(len(x), -1))
        print(f"{seed}\t{dcec.purity(res.labels, truth):.3f}\t{dcec.purity(km.labels_, truth):.3f}")


if __name__ == "__main__":
    main()
