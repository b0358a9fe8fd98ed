from __future__ import annotations

import numpy as np
import pytest

from d2monitor.trajectory import Dataset


def random_dataset(rng, n=6, steps=4, dim=3, channels=True, labels=True) -> Dataset:
    y = np.arange(n) % 2 if labels else None
    return Dataset(
        states=rng.standard_normal((n, steps, dim)).astype(np.float32),
        entropy=rng.random((n, steps)).astype(np.float32) * 3 if channels else None,
        confidence=rng.random((n, steps)).astype(np.float32) if channels else None,
        labels=y,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[str, dict] = {}


@pytest.fixture
def criterion(request):
    """Register an acceptance criterion; tests add measured details to the dict."""
    entry = {"name": request.node.name, "detail": {}, "status": "FAIL"}
    _ACCEPTANCE[request.node.nodeid] = entry
    return entry["detail"]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _ACCEPTANCE.get(item.nodeid)
    if entry is not None and rep.when == "call":
        entry["status"] = "PASS" if rep.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for entry in _ACCEPTANCE.values():
        detail = ", ".join(f"{k}={v}" for k, v in entry["detail"].items())
        terminalreporter.write_line(f"{entry['status']}  {entry['name']}  {detail}")
