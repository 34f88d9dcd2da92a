"""Write a small synthetic cohort and run the full pipeline on it through the CLI.

    python scripts/demo_pipeline.py --out demo_run
"""
import argparse
from pathlib import Path

from histocluster import cli
from histocluster.synthetic import write_demo_cohort


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_run")
    ap.add_argument("--slides", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    manifest = write_demo_cohort(out / "data", n_slides=args.slides, seed=args.seed)
    code = cli.main(["run", "--manifest", str(manifest), "--out", str(out / "run"),
                     "--tile-size", "32", "--k", "4", "--epochs", "5", "--lr", "1e-3", "--qc-epochs", "10",
                     "--widths", "8,16", "--blocks-per-stage", "1", "--sample-per-cluster", "5", "-v"])
    if code == 0:
        print(f"report: {out / 'run' / 'report' / 'report.md'}")
    raise SystemExit(code)


if __name__ == "__main__":
    main()
