import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, *shape, lo=-1.0, hi=1.0):
    from dcnas.tensor import Tensor

    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
