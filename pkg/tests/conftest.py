"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    """Remember one acceptance verdict; printed in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def perturb(flow, rng, scale=0.3):
    """Give every parameter block a random offset so couplings are not the identity."""
    flow.set_params([p + scale * rng.standard_normal(p.shape) for p in flow.params()])
    return flow


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
