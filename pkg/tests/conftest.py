import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hoifuse.backend import ToyBackend, ToyConditioner, ToySpec  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sd_backend():
    return ToyBackend(ToySpec(seed=1))


@pytest.fixture(scope="session")
def pfd_backend():
    return ToyBackend(ToySpec(seed=2))


@pytest.fixture(scope="session")
def conditioner():
    return ToyConditioner(n_tokens=16, dim=8)


@pytest.fixture(scope="session")
def golden():
    return GOLDEN


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
