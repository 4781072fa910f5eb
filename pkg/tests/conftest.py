import numpy as np
import pytest

from swbt.datamodel import OBS_DIM, SegmentBatch
from swbt.transformer import ModelConfig, SegmentTransformer


def rand_batch(B, l, seed=0, n_pad=None):
    rng = np.random.default_rng(seed)
    pad = np.zeros((B, l), dtype=bool)
    if n_pad is not None:
        for b, k in enumerate(np.broadcast_to(n_pad, (B,))):
            pad[b, :k] = True
    return SegmentBatch(rng.random((B, l, OBS_DIM)), rng.normal(size=(B, l, 8)), rng.uniform(-1, 1, (B, l, 3)),
                        pad, np.arange(B), np.zeros(B, dtype=np.int64))


def small_cfg(**kw):
    base = dict(d_model=16, n_layers=2, n_heads=2, seg_len=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return SegmentTransformer(small_cfg(), seed=3)


def pytest_configure(config):
    config.acceptance_results = {}


def pytest_terminal_summary(terminalreporter, config):
    res = config.acceptance_results
    if not res:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(res):
        ok, detail = res[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record(request):
    """``record(n, ok, detail)`` files one acceptance line and fails the test if not ok."""
    def _record(n, ok, detail):
        request.config.acceptance_results[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _record
