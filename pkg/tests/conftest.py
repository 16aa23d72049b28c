import numpy as np
import pytest

from sparsemoe.model import MoEConfig, compress_model, gen_model, token_stream, with_residual_scale
from sparsemoe.sparsify import calibrate, collect_stats

CRITERIA: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build_toy(seed=3, eps=0.3, layers=4, experts=8, top_k=2, d_h=64, d_i=256, k=0.9, calib_tokens=400):
    cfg = MoEConfig(layers, experts, top_k, d_h, d_i, seed)
    model = gen_model(cfg)
    if eps != 1.0:
        model = with_residual_scale(model, eps)
    stats, _ = collect_stats(model, token_stream(d_h, calib_tokens, seed + 100), cap=4096, seed=seed)
    table = calibrate(stats, k)
    return model, compress_model(model, table.thresholds, bits=2)


@pytest.fixture(scope="session")
def toy():
    """(dense model, compressed model) with calibrated 90% sparsity and mild drift."""
    return build_toy()
