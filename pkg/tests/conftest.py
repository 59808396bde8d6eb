import numpy as np
import pytest

from unlearnaudit.data import generate_synthetic
from unlearnaudit.model import ModelState


def phi_model(d: int, slope=None, intercept: float = 0.0) -> ModelState:
    """Two-class linear model whose label-1 logit-confidence is ``slope . x + intercept``."""
    W = np.zeros((d, 2))
    if slope is not None:
        W[:, 1] = slope
    b = np.array([0.0, intercept])
    return ModelState((d, 2), np.concatenate([W.ravel(), b]))


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(40, 2, 4, 1.0, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        RESULTS = mod.RESULTS
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
