import numpy as np
import pytest

from sthdg.geometry import build_structured_mesh
from sthdg.spaces import SlabSpace


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_space(n=2, k=2, bc=None):
    return SlabSpace(build_structured_mesh(n, n, bc=bc), k)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for a criterion, echo it, then assert it."""
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line
    return record
