import numpy as np
import pytest
from hypothesis import strategies as st


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def probability_vectors(k_min=1, k_max=8):
    """Hypothesis strategy for strictly positive probability vectors."""
    return st.integers(k_min, k_max).flatmap(
        lambda k: st.lists(st.floats(1e-3, 1.0), min_size=k, max_size=k)
    ).map(lambda w: np.asarray(w) / np.sum(w))


ACCEPTANCE_LINES = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
