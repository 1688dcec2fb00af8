import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from multirecon.phantom import PhantomParams, generate_phantom  # noqa: E402
from multirecon.volume import Grid  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom():
    """32^3 phantom at 1.1 mm, shared across tests (treat as read-only)."""
    return generate_phantom(PhantomParams(ga=28.0, seed=3, dims=(32, 32, 32)))


@pytest.fixture
def grid12():
    return Grid.centered((12, 12, 12), 1.0)


@pytest.fixture
def verdict(record_property):
    """Record one acceptance line, then fail the test if the criterion failed."""

    def _verdict(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        record_property("acceptance", line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for key in ("passed", "failed")
        for rep in terminalreporter.stats.get(key, [])
        for name, value in getattr(rep, "user_properties", [])
        if name == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
