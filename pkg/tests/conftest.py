import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sbm():
    from scalegnn.graph import make_splits, sbm_generate
    g = sbm_generate([40, 40], 0.15, 0.02, 6, seed=3, noise=0.3)
    return g.with_splits(make_splits(g.labels, 8, 0))


@pytest.fixture(scope="session")
def trained_gcn(small_sbm):
    from scalegnn.graph import gcn_normalize
    from scalegnn.models import TrainConfig, init_params, train
    params = init_params("GCN", small_sbm.d, small_sbm.n_classes, 16, seed=0)
    return train(params, small_sbm, gcn_normalize(small_sbm),
                 TrainConfig(max_epochs=200, patience=40, dropout=0.0))


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _VERDICTS.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
