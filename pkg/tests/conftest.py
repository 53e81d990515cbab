import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from greenpool.cli import load_spec  # noqa: E402
from greenpool.profile_data import data_dir  # noqa: E402
from greenpool.profiles import load_profile  # noqa: E402

SHIPPED_SPEC = data_dir() / "conversation_1h.ini"


@pytest.fixture(scope="session")
def profile():
    return load_profile()


@pytest.fixture(scope="session")
def shipped_spec():
    return load_spec(SHIPPED_SPEC)


@pytest.fixture(scope="session")
def shipped_trace(shipped_spec):
    return shipped_spec.load_trace()


@pytest.fixture(scope="session")
def shipped_slice(shipped_spec, shipped_trace):
    """First ten minutes of the shipped trace with the shipped controller settings."""
    reqs = [r for r in shipped_trace if r.arrival < 600_000]
    return reqs, shipped_spec.sim.controller, shipped_spec.sim.overheads


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def record():
    def _record(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
