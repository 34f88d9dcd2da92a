"""Sampling distribution of the univariate Cox fit on planted-hazard cohorts.

    python scripts/planted_hazard.py --seeds 1000
"""
import argparse

import numpy as np

from histocluster import survival
from histocluster.synthetic import planted_cohort


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=1000)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--hr", type=float, default=2.0)
    ap.add_argument("--stream", type=int, default=99)
    args = ap.parse_args()

    b, se, sig = [], [], []
    for s in range(args.seeds):
        t, e, x = planted_cohort(np.random.default_rng([args.stream, s]), n=args.n, hazard_ratio=args.hr)
        fit = survival.cox_fit(t, e, x[:, None].astype(float))
        b.append(fit.coef[0])
        se.append(fit.se[0])
        sig.append(fit.p[0] < 0.05)
    b = np.array(b)
    hr = np.exp(b)
    print(f"mean b {b.mean():.4f} (true {np.log(args.hr):.4f}), sd {b.std():.4f}, mean se {np.mean(se):.4f}")
    print(f"p < 0.05: {np.mean(sig):.3f}")
    print(f"p < 0.05 and HR in [1.5, 2.7]: {np.mean(np.array(sig) & (hr >= 1.5) & (hr <= 2.7)):.3f}")


if __name__ == "__main__":
    main()
