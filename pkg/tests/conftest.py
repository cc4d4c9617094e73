import json
import pathlib

import pytest

FROZEN = pathlib.Path(__file__).with_name("frozen_oracles.json")
VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def frozen():
    return json.loads(FROZEN.read_text())


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request, capsys):
    """Record one acceptance line, echo it live, and fail the test on FAIL."""
    def record(label: str, ok: bool, detail: str, *, gate: bool = True):
        line = f"{label} {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        if gate:
            assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
