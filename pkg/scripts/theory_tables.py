"""Write the F/G comparison grid and Monte-Carlo pruning losses as CSV files."""

import argparse
import sys

from sparsemoe import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default=".")
    ap.add_argument("--samples", type=int, default=10**6)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)
    return cli.main(
        [
            "theory",
            "-o", f"{a.outdir}/fg.csv",
            "--losses-out", f"{a.outdir}/losses.csv",
            "--loss-etas", "0.05,0.1,0.2,0.3,0.5",
            "--samples", str(a.samples),
            "--workers", str(a.workers),
            "--seed", str(a.seed),
        ]
    )


if __name__ == "__main__":
    sys.exit(main())
