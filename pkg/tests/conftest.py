import numpy as np
import pytest

from voxvae.tensor.config import dtype_scope


@pytest.fixture
def f64():
    with dtype_scope(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
