import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_CRITERIA = 11
_acceptance_lines = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion and return the verdict."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _acceptance_lines[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_CRITERIA + 1):
        terminalreporter.write_line(_acceptance_lines.get(n, f"criterion {n:2d} FAIL  not completed"))
