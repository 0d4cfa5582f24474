import numpy as np
import pytest


def random_hermitian(rng, n, batch=()):
    a = rng.standard_normal(batch + (n, n)) + 1j * rng.standard_normal(batch + (n, n))
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def random_hpd(rng, n, batch=(), ridge=0.5):
    a = rng.standard_normal(batch + (n, n)) + 1j * rng.standard_normal(batch + (n, n))
    return a @ np.conj(np.swapaxes(a, -1, -2)) + ridge * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {key}: {detail}")
