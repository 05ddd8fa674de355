import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from querywatch.harness.desk import DeskConfig, load_or_build

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_VERDICTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(_VERDICTS, key=lambda v: int(v[0][2:])):
        terminalreporter.write_line(f"{name:<5} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def verdict():
    """Record one acceptance line; the summary prints them all at the end."""
    def record(name: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append((name, bool(ok), detail))
        print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)
    return record


@pytest.fixture(scope="session")
def desk_cache(request):
    path = os.environ.get("QW_CACHE")
    return path or str(request.config.cache.mkdir("querywatch-desk"))


@pytest.fixture(scope="session")
def desk(desk_cache):
    """The default desk (with blinder), built once and pickled between runs."""
    return load_or_build(DeskConfig(blinder=True), desk_cache)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
