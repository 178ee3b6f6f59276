import sys

import numpy as np
import pytest

from partcf.ppim import EmbeddingBatch


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_batch(rng, B=4, K=6, P=3, D=8, identities=None, grid=None, min_valid=1):
    """Unit-norm random batch; every sample keeps at least ``min_valid`` phrases."""
    patches = unit_rows(rng.normal(size=(B, K, D)))
    phrases = unit_rows(rng.normal(size=(B, P, D)))
    mask = (rng.random((B, P)) < 0.7).astype(float)
    mask[:, :min_valid] = 1.0
    phrases *= mask[:, :, None]
    if identities is None:
        identities = rng.integers(0, max(2, B // 2), size=B)
        identities[0], identities[1] = 0, 1
    return EmbeddingBatch(
        unit_rows(rng.normal(size=(B, D))),
        unit_rows(rng.normal(size=(B, D))),
        patches,
        phrases,
        mask,
        identities,
        grid,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
