import numpy as np
import pytest

from fedcaug.tensor_nn import Architecture, init_params

TINY = Architecture(in_channels=3, height=8, width=8, conv_channels=4, kernel_size=3, hidden=8, num_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return TINY


@pytest.fixture
def tiny_params():
    return init_params(TINY, seed=7)



# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
