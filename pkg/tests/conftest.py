import numpy as np
import pytest

from distgan import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def python_backend(monkeypatch):
    """Route every kernel call through the numpy fallback."""
    monkeypatch.setattr(kernels, "_impl", kernels.backends()["python"])


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
