from __future__ import annotations

import pytest

from lawson import acceptance


@pytest.fixture(scope="session")
def sigma_minus_44():
    from lawson.surface import profile
    return profile((4, 4), "sigma_minus")


@pytest.fixture(scope="session")
def long_profile():
    """Sigma^- (4,4) sampled far enough for the layer stacks."""
    return acceptance._profile((4, 4), "sigma_minus", 1100.0)


@pytest.fixture(scope="session")
def kit():
    return acceptance._kit()


@pytest.fixture(scope="session")
def field_005():
    return acceptance._field(0.05)


@pytest.fixture(scope="session")
def glued_005():
    return acceptance._field(0.05, glue=True)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
