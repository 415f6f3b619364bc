from pathlib import Path

import pytest

from coloc.geometry import CANONICAL_PAIRS, canonical_topology
from coloc.twr import ClockModel

GOLDEN = Path(__file__).parent / "golden"

_acceptance_lines: list[str] = []


@pytest.fixture
def golden_dir():
    return GOLDEN


@pytest.fixture
def topology():
    return canonical_topology()


@pytest.fixture
def ideal_clocks():
    return {n: ClockModel.ideal() for n in range(4)}


@pytest.fixture
def pairs():
    return CANONICAL_PAIRS


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number: int, title: str, ok: bool, detail: str):
        _acceptance_lines.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}")
        print(_acceptance_lines[-1])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
