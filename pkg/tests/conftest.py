import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mdss import synth  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def accept():
    """Record one pass/fail line per acceptance criterion and assert it."""

    def record(number, name, ok, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}  {detail}")
        print(ACCEPTANCE_LINES[-1])
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return record


@pytest.fixture(scope="session")
def tiny_benchmark(tmp_path_factory):
    """Small 64x64 synthetic category shared by the fast tests."""
    root = tmp_path_factory.mktemp("tiny_bench")
    synth.make_benchmark(root, seed=7, n_train=12, n_val=4, n_test_normal=6, n_test_anom=6, size=64)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY = dict(image_size=64, st_channels=(8, 16, 16, 16), st_steps=20, sdf_steps=20, k_points=100,
            sdf_hidden=(16, 16), sdf_encoder=(8, 16, 16), queries_per_patch=32, sdf_batch=8,
            ransac_iterations=200)


@pytest.fixture
def tiny_config(tiny_benchmark):
    from mdss.config import RunConfig

    return RunConfig(dataset_root=str(tiny_benchmark), categories=("synthetic",), **TINY).validate()


@pytest.fixture(scope="session")
def tiny_bundle(tiny_benchmark):
    from mdss import pipeline
    from mdss.config import RunConfig

    cfg = RunConfig(dataset_root=str(tiny_benchmark), categories=("synthetic",), **TINY).validate()
    return pipeline.train(cfg)
