"""Decode throughput of a toy model across cache budgets and prefetch modes.

Builds, calibrates and compresses a seeded toy model, trains the expert
predictor once, then prints ``budget_frac,prefetch,tps,cache_hit_rate,stall_s``
as CSV. Compute constants are fixed so the output is reproducible.
"""

import argparse
import csv
import sys

from sparsemoe.model import SPARSE, MoEConfig, compress_model, gen_model, token_stream, with_residual_scale
from sparsemoe.offload import NONE, ORACLE, PREDICTED, ComputeModel, SimConfig, TransferModel, simulate_decode
from sparsemoe.predictors import expert_trace, train_inter
from sparsemoe.sparsify import calibrate, collect_stats


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eps", type=float, default=0.3, help="residual scale of the toy model")
    ap.add_argument("--tokens", type=int, default=32)
    ap.add_argument("--bandwidth", type=float, default=25e9)
    ap.add_argument("--fracs", default="0.05,0.1,0.25,0.5,1.0", help="cache budget as fraction of all experts")
    a = ap.parse_args(argv)

    cfg = MoEConfig(4, 8, 2, 64, 256, a.seed)
    model = with_residual_scale(gen_model(cfg), a.eps)
    stats, _ = collect_stats(model, token_stream(64, 2000, a.seed + 100), seed=a.seed)
    comp = compress_model(model, calibrate(stats, 0.9).thresholds, bits=2)
    pred = train_inter(expert_trace(comp, token_stream(64, 1000, a.seed + 1), SPARSE), seed=a.seed)

    per_expert = comp.experts[0][0].up_bytes() + cfg.d_intermediate * 2 * cfg.d_hidden * 2
    total = per_expert * cfg.layers * cfg.experts
    tokens = list(token_stream(64, a.tokens, a.seed))
    tm = TransferModel(bandwidth=a.bandwidth)
    cm = ComputeModel(2e-5, 5e-11)

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("budget_frac", "prefetch", "tps", "cache_hit_rate", "stall_s"))
    for frac in (float(f) for f in a.fracs.split(",")):
        cap = max(total * frac, per_expert)
        for mode in (NONE, PREDICTED, ORACLE):
            tl = simulate_decode(comp, tokens, tm, cm, cap, pred, SimConfig(prefetch=mode, seed=a.seed))
            w.writerow((frac, mode, f"{tl.tps:.2f}", f"{tl.cache_hit_rate:.4f}", f"{tl.total_stall:.6f}"))


if __name__ == "__main__":
    main()
