import time

import pytest

_VERDICTS: dict[int, str] = {}


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(self, number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(_VERDICTS[number])
        assert ok, detail


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


@pytest.fixture(scope="session")
def benchmark_results():
    """Every seed of the pinned benchmark, run once per session."""
    from xfrl.benchmark import run_seed

    t = time.perf_counter()
    results = [run_seed(seed) for seed in range(5)]
    return results, time.perf_counter() - t


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
