from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from editlab.datasets import load_bundled  # noqa: E402
from editlab.harness import ExperimentConfig, run_sweep  # noqa: E402
from editlab.model import ModelConfig, init_model  # noqa: E402


@pytest.fixture(scope="session")
def model():
    return init_model()


@pytest.fixture(scope="session")
def small_model():
    return init_model(ModelConfig(d_model=16, n_layers=3, n_heads=2, d_ff=24, max_seq=16, seed=3))


@pytest.fixture(scope="session")
def counterfactual():
    return load_bundled("toy-counterfactual")


@pytest.fixture(scope="session")
def factual():
    return load_bundled("toy-factual")


@pytest.fixture(scope="session")
def inconsistency():
    return load_bundled("toy-inconsistency")


@pytest.fixture(scope="session")
def default_sweep(model, counterfactual):
    """The default fixed-seed sweep, shared by the harness and acceptance tests."""
    return run_sweep(ExperimentConfig(), counterfactual, model)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
