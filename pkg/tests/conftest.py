import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def room_512(tmp_path_factory):
    """Room fixture manifest at 512x256 shared across tests."""
    from world_kit.fixtures import write_room_manifest

    root = tmp_path_factory.mktemp("room512")
    return write_room_manifest(root, 512, 256)


@pytest.fixture(scope="session")
def sphere_512(tmp_path_factory):
    from world_kit.fixtures import write_sphere_manifest

    root = tmp_path_factory.mktemp("sphere512")
    return write_sphere_manifest(root, 512, 256, radius=3.0)


_CRITERIA = {}
N_CRITERIA = 11


@pytest.fixture
def criterion():
    """Record one acceptance line; returns ``ok`` so tests can assert on it."""
    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok
    return record


def pytest_runtest_logreport(report):
    # a criterion test that errored before recording still gets a FAIL line
    if report.failed and "test_acceptance.py::" in report.nodeid:
        name = report.nodeid.rsplit("::", 1)[-1]
        if name.startswith("test_criterion_"):
            n = int(name.split("_")[2])
            _CRITERIA.setdefault(n, f"criterion {n:>2}: FAIL  ({report.when} error)")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_CRITERIA.get(n, f"criterion {n:>2}: not run"))
