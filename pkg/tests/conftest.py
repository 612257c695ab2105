import pytest

from tbm import synth

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_corpus():
    geos = synth.gen_geology(30, change_prob=0.3, seed=11)
    rows = synth.gen_excavation(geos, rows_per_ring=20, noise_sigma=0.6, seed=12)
    return geos, rows


@pytest.fixture
def acceptance_line():
    """Record one pass/fail line for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append((number, f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"))

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
