import numpy as np
import pytest

from surrogate import write_surrogate


@pytest.fixture(scope="session")
def surrogate_root(tmp_path_factory):
    return write_surrogate(tmp_path_factory.mktemp("digits"))


@pytest.fixture
def rng():
    from stochbranch.core import Rng

    return Rng(1234)


def assert_close(a, b, tol):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    assert a.shape == b.shape, (a.shape, b.shape)
    dev = float(np.abs(a - b).max()) if a.size else 0.0
    assert dev <= tol, f"max |dev| {dev:.3e} > {tol:g}"


# (criterion number, line) per acceptance result, printed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
