"""``sparsemoe`` command line: generate, calibrate, compress, run, simulate and check.

Every command is a pure function of its flags and ``--seed``; ``--workers``
only changes how sampling work is split, never the output bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import model as mm
from . import offload, predictors, sparsify, theory
from ._io import write_atomic
from .linalg import DTYPE


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _load(path, want=None):
    m = mm.load_any(path)
    if want is not None and not isinstance(m, want):
        kind = "compressed (.flq)" if want is mm.CompressedModel else "uncompressed (.floe)"
        raise ValueError(f"{path}: expected a {kind} model")
    return m


def _float_list(text: str) -> list[float]:
    out = []
    for part in text.split(","):
        part = part.strip()
        out.append(math.exp(float(part[2:])) if part.startswith("e^") else float(part))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_model(a) -> None:
    cfg = mm.MoEConfig(a.layers, a.experts, a.topk, a.dh, a.di, a.seed)
    model = mm.gen_model(cfg)
    if a.residual_scale != 1.0:
        model = mm.with_residual_scale(model, a.residual_scale)
    write_atomic(a.output, mm.model_bytes(model))


def cmd_calibrate(a) -> None:
    model = _load(a.model, mm.MoEModel)
    tokens = mm.token_stream(model.config.d_hidden, a.tokens, a.seed)
    stats, sim = sparsify.collect_stats(model, tokens, a.reservoir, a.seed, a.workers)
    table = sparsify.calibrate(stats, a.sparsity, a.min_samples)
    write_atomic(a.output, table.to_csv())
    if a.similarity_out:
        rows = [(i, i + 1, repr(float(v)), sim.samples) for i, v in enumerate(sim.mean)]
        write_atomic(a.similarity_out, _csv(("layer", "next_layer", "cosine", "samples"), rows))


def cmd_compress(a) -> None:
    model = _load(a.model, mm.MoEModel)
    table = sparsify.ThresholdTable.from_csv(Path(a.thresholds).read_text())
    c = model.config
    if (table.layers, table.experts) != (c.layers, c.experts):
        raise ValueError("threshold table does not match the model's layers x experts")
    cm = mm.compress_model(model, table.thresholds, a.bits, a.group_size, a.refine)
    write_atomic(a.output, mm.compressed_model_bytes(cm))


def cmd_run(a) -> None:
    model = _load(a.model)
    mode = mm.SPARSE if isinstance(model, mm.CompressedModel) else mm.DENSE
    rows = []
    for n, x in enumerate(mm.token_stream(model.config.d_hidden, a.tokens, a.seed)):
        for i, tr in enumerate(mm.forward_trace(model, x, mode)):
            density = float(np.mean([m.mean() for m in tr.masks.values()])) if tr.masks else 1.0
            rows.append(
                (
                    n,
                    i,
                    " ".join(map(str, tr.experts.tolist())),
                    " ".join(repr(float(w)) for w in tr.weights),
                    repr(density),
                    repr(float(np.linalg.norm(tr.y.astype(np.float64)))),
                )
            )
    write_atomic(a.output, _csv(("token", "layer", "experts", "weights", "density", "out_norm"), rows))


def _train_predictor(model, a) -> predictors.InterExpertPredictor:
    tokens = mm.token_stream(model.config.d_hidden, a.train_tokens, a.seed + 1)
    trace = predictors.expert_trace(model, tokens, mm.SPARSE)
    return predictors.train_inter(trace, a.lr, a.epochs, a.seed, a.loss)


def cmd_predict_eval(a) -> None:
    model = _load(a.model, mm.CompressedModel)
    if a.predictor:
        p = predictors.predictor_from_bytes(Path(a.predictor).read_bytes())
    else:
        p = _train_predictor(model, a)
        if a.predictor_out:
            write_atomic(a.predictor_out, predictors.predictor_bytes(p))
    count = a.prefetch_count or model.config.top_k
    held_out = list(mm.token_stream(model.config.d_hidden, a.tokens, a.seed + 2))
    trace = predictors.expert_trace(model, held_out, mm.SPARSE)
    write_atomic(a.output, predictors.metrics_csv(predictors.inter_metrics(p, trace, count)))
    if a.intra_out:
        write_atomic(a.intra_out, predictors.metrics_csv(predictors.intra_metrics(model, held_out)))


def cmd_simulate(a) -> None:
    model = _load(a.model, mm.CompressedModel)
    c = model.config
    up_bytes = model.experts[0][0].up_bytes()
    full = up_bytes + c.d_intermediate * 2 * c.d_hidden * a.element_bytes
    if a.vram_budget < full:
        raise ValueError(
            f"cache capacity {a.vram_budget:g} bytes is smaller than one compressed expert ({full} bytes)"
        )
    tm = offload.TransferModel(a.bandwidth, a.req_overhead, a.pack_rate, a.streams)
    if a.c0 is not None and a.c1 is not None:
        compute = offload.ComputeModel(a.c0, a.c1)
    elif a.c0 is None and a.c1 is None:
        compute = offload.ComputeModel.benchmark(c.d_hidden, c.d_intermediate, seed=a.seed)
        print(f"benchmarked compute model: c0={compute.c0:.3e} s, c1={compute.c1:.3e} s/flop", file=sys.stderr)
    else:
        raise ValueError("--c0 and --c1 must be given together")
    p = None
    if a.prefetch == offload.PREDICTED:
        if a.predictor:
            p = predictors.predictor_from_bytes(Path(a.predictor).read_bytes())
        else:
            p = _train_predictor(model, a)
    cfg = offload.SimConfig(
        prefetch=a.prefetch,
        prefetch_count=a.prefetch_count,
        chunk_size=a.chunk_size,
        layout=a.layout,
        element_bytes=a.element_bytes,
        oracle_recall=a.oracle_recall,
        seed=a.seed,
    )
    tokens = list(mm.token_stream(c.d_hidden, a.tokens, a.seed))
    tl = offload.simulate_decode(model, tokens, tm, compute, a.vram_budget, p, cfg)
    if a.output:
        write_atomic(a.output, offload.summary_csv(tl))
    else:
        sys.stdout.write(offload.summary_csv(tl))
    if a.timeline_out:
        write_atomic(a.timeline_out, offload.timeline_csv(tl))
    if a.tokens_out:
        write_atomic(a.tokens_out, offload.tokens_csv(tl))


def cmd_theory(a) -> None:
    if a.grid != "default":
        raise ValueError(f"unknown grid {a.grid!r}")
    etas = _float_list(a.etas) if a.etas else theory.DEFAULT_ETAS
    ps = _float_list(a.ps) if a.ps else theory.DEFAULT_PS
    rows = [tuple(repr(float(v)) for v in r) for r in theory.fg_rows(etas, ps)]
    write_atomic(a.output, _csv(("eta", "p", "F", "G", "gap"), rows))
    if a.losses_out:
        g, e = theory.GaussianSpec(1.0), theory.ShiftedExpSpec()
        rows = []
        for eta in _float_list(a.loss_etas):
            r = theory.mc_losses(g, e, eta, a.samples, a.seed, a.workers)
            rows.append(tuple(repr(float(v)) for v in (eta, r.L_down.mean, r.L_up.mean, r.L_gate.mean, r.se)))
        write_atomic(a.losses_out, _csv(("eta", "L_down", "L_up", "L_gate", "se"), rows))


def _time(fn, repeats: int) -> float:
    fn()
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def cmd_bench(a) -> None:
    rng = np.random.default_rng(a.seed)
    d_h, d_i = a.dh, a.di
    std = DTYPE(1.0 / math.sqrt(d_h))
    gate = np.asfortranarray(rng.standard_normal((d_h, d_i), dtype=DTYPE) * std)
    up = np.asfortranarray(rng.standard_normal((d_h, d_i), dtype=DTYPE) * std)
    down_t = np.ascontiguousarray(rng.standard_normal((d_i, d_h), dtype=DTYPE) * std)
    x = rng.standard_normal(d_h, dtype=DTYPE)
    e = mm.ExpertWeights(gate, up, down_t)
    v = mm.up_activation(e, x)
    t = sparsify.quantile_threshold(np.abs(v), a.sparsity)
    dense = _time(lambda: mm.masked_expert(x, gate, v, 0.0, down_t), a.repeats)
    sparse = _time(lambda: mm.masked_expert(x, gate, v, t, down_t), a.repeats)
    full = _time(lambda: mm.expert_forward(e, x), a.repeats)
    rows = [
        ("dense_gate_down", repr(dense), "1.0"),
        ("masked_gate_down", repr(sparse), repr(dense / sparse)),
        ("dense_expert", repr(full), repr(dense / full)),
    ]
    text = _csv(("kernel", "seconds", "speedup_vs_dense_gate_down"), rows)
    if a.output:
        write_atomic(a.output, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single source of randomness")
    common.add_argument("--workers", type=int, default=1, help="sharding only; outputs do not depend on it")

    p = argparse.ArgumentParser(prog="sparsemoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen-model", cmd_gen_model, "generate a synthetic MoE model (.floe)")
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--experts", type=int, required=True)
    g.add_argument("--topk", type=int, required=True)
    g.add_argument("--dh", type=int, required=True)
    g.add_argument("--di", type=int, required=True)
    g.add_argument("--residual-scale", type=float, default=1.0, help="scale of both residual branches")
    g.add_argument("-o", "--output", required=True)

    c = add("calibrate", cmd_calibrate, "calibrate per-expert sparsity thresholds (CSV)")
    c.add_argument("--model", required=True)
    c.add_argument("--tokens", type=int, default=2000)
    c.add_argument("--sparsity", type=float, default=0.9, help="target fraction of pruned channels")
    c.add_argument("--reservoir", type=int, default=sparsify.DEFAULT_RESERVOIR)
    c.add_argument("--min-samples", type=int, default=sparsify.MIN_CALIBRATION_SAMPLES)
    c.add_argument("--similarity-out", help="CSV of mean next-layer cosine similarity")
    c.add_argument("-o", "--output", required=True)

    q = add("compress", cmd_compress, "quantize up projections and attach thresholds (.flq)")
    q.add_argument("--model", required=True)
    q.add_argument("--thresholds", required=True)
    q.add_argument("--bits", type=int, default=2, choices=(1, 2, 3, 4, 8))
    q.add_argument("--group-size", type=int, default=64)
    q.add_argument("--refine", action="store_true", help="least-squares refinement of scale/zero")
    q.add_argument("-o", "--output", required=True)

    r = add("run", cmd_run, "forward seeded tokens and record routing and density (CSV)")
    r.add_argument("--model", required=True)
    r.add_argument("--tokens", type=int, default=16)
    r.add_argument("-o", "--output", required=True)

    def predictor_flags(sp):
        sp.add_argument("--predictor", help="trained predictor file (.flop); trained in-process if absent")
        sp.add_argument("--train-tokens", type=int, default=2000)
        sp.add_argument("--lr", type=float, default=4.0)
        sp.add_argument("--epochs", type=int, default=3000)
        sp.add_argument("--loss", choices=(predictors.PAIRWISE, predictors.ONE_VS_ALL), default=predictors.PAIRWISE)
        sp.add_argument("--prefetch-count", type=int, help="experts predicted per layer (default top_k)")

    e = add("predict-eval", cmd_predict_eval, "train and evaluate the lookahead predictors (CSV)")
    e.add_argument("--model", required=True)
    predictor_flags(e)
    e.add_argument("--tokens", type=int, default=500, help="held-out evaluation tokens")
    e.add_argument("--predictor-out")
    e.add_argument("--intra-out", help="CSV of reuse-predictor channel metrics")
    e.add_argument("-o", "--output", required=True)

    s = add("simulate", cmd_simulate, "simulate offloaded decode and report TPS (CSV)")
    s.add_argument("--model", required=True)
    predictor_flags(s)
    s.add_argument("--tokens", type=int, default=32)
    s.add_argument("--prefetch", choices=(offload.PREDICTED, offload.ORACLE, offload.NONE), default=offload.PREDICTED)
    s.add_argument("--oracle-recall", type=float, default=1.0)
    s.add_argument("--bandwidth", type=float, default=25e9, help="bytes/s")
    s.add_argument("--req-overhead", type=float, default=5e-6, help="seconds per request")
    s.add_argument("--pack-rate", type=float, default=100e9, help="bytes/s of host packing")
    s.add_argument("--streams", type=int, default=1)
    s.add_argument("--chunk-size", type=int, default=16, help="channels per request")
    s.add_argument("--vram-budget", type=float, required=True, help="expert cache capacity in bytes")
    s.add_argument("--layout", choices=(offload.COMPACT, offload.SPLIT), default=offload.COMPACT)
    s.add_argument("--element-bytes", type=int, default=2)
    s.add_argument("--c0", type=float, help="seconds per expert call (benchmarked if c0/c1 omitted)")
    s.add_argument("--c1", type=float, help="seconds per flop")
    s.add_argument("--timeline-out")
    s.add_argument("--tokens-out")
    s.add_argument("-o", "--output", help="summary CSV (stdout if omitted)")

    t = add("theory", cmd_theory, "closed-form F/G table and Monte-Carlo loss ordering (CSV)")
    t.add_argument("--grid", default="default")
    t.add_argument("--etas", help="comma list; 'e^-4' style allowed")
    t.add_argument("--ps", help="comma list")
    t.add_argument("--losses-out")
    t.add_argument("--loss-etas", default="0.1,0.3,0.5")
    t.add_argument("--samples", type=int, default=10**6)
    t.add_argument("-o", "--output", required=True)

    b = add("bench", cmd_bench, "time the masked gate/down kernel against its dense counterpart")
    b.add_argument("--dh", type=int, default=4096)
    b.add_argument("--di", type=int, default=14336)
    b.add_argument("--sparsity", type=float, default=0.9)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("-o", "--output")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "workers", 1) < 1:
        print("sparsemoe: error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        args.fn(args)
    except (ValueError, OSError, TypeError, IndexError) as e:
        print(f"sparsemoe {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
