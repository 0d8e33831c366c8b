import os

import pytest
from hypothesis import HealthCheck, settings

from avtrack import backend

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


@pytest.fixture(params=[m.NAME for m in backend.available()])
def kernels(request, monkeypatch):
    """Run the test once per importable backend, with that backend active."""
    mod = {m.NAME: m for m in backend.available()}[request.param]
    monkeypatch.setattr(backend, "active", mod)
    return mod


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
