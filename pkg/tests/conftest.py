import numpy as np
import pytest

from disback.diffusion import NoiseSchedule
from disback.scorefield import benchmark_mixture


def rel_err(got, want) -> float:
    """Largest absolute gap relative to the largest reference magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-12))


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def mix10():
    return benchmark_mixture(0)


ACCEPTANCE_LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> bool:
    """Record one acceptance line; it is echoed now and again in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
