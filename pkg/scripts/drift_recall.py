"""Reuse-predictor channel recall against the toy model's residual scale.

Prints ``eps,layer,precision,recall,samples`` for each drift level; recall
should fall as consecutive hidden states move further apart.
"""

import argparse
import sys

from sparsemoe.model import MoEConfig, compress_model, gen_model, token_stream, with_residual_scale
from sparsemoe.predictors import intra_metrics
from sparsemoe.sparsify import calibrate, collect_stats


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eps", default="0,0.01,0.1,0.3,1.0")
    ap.add_argument("--tokens", type=int, default=200)
    a = ap.parse_args(argv)
    print("eps,layer,precision,recall,samples")
    for eps in (float(e) for e in a.eps.split(",")):
        model = with_residual_scale(gen_model(MoEConfig(4, 8, 2, 64, 256, a.seed)), eps)
        stats, _ = collect_stats(model, token_stream(64, 1000, a.seed + 100), seed=a.seed)
        comp = compress_model(model, calibrate(stats, 0.9).thresholds, bits=2)
        for i, m in enumerate(intra_metrics(comp, token_stream(64, a.tokens, a.seed))):
            if m.samples:
                print(f"{eps},{i},{m.precision:.4f},{m.recall:.4f},{m.samples}")


if __name__ == "__main__":
    sys.exit(main())
