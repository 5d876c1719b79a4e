import sys

import numpy as np
import pytest

from trcv.ingestion import build_synthetic_dataset


@pytest.fixture(scope="session")
def small_synth():
    return build_synthetic_dataset(3, 2, 4, 64, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
