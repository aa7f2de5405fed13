import numpy as np
import pytest

# criterion number -> (ok, message), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, message: str) -> None:
    ACCEPTANCE[number] = (bool(ok), message)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {message}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, message = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {message}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
