import time

import numpy as np
import pytest

from splatedit.denoiser import DenoiserConfig, ToyDenoiser
from splatedit.diffusion import make_schedule
from splatedit.splat import CameraRig, make_demo_asset, random_grid

RUNTIME_BUDGET_S = 300.0

_criteria: dict[str, list[str]] = {}
_session_start = [0.0]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_sessionstart(session):
    _session_start[0] = time.perf_counter()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _criteria.setdefault(name, []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.perf_counter() - _session_start[0]
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, outcomes in _criteria.items():
        ok = all(o == "passed" for o in outcomes)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({len(outcomes)} checks)")
    ok = elapsed <= RUNTIME_BUDGET_S
    tr.write_line(f"{'PASS' if ok else 'FAIL'}  full suite runtime <= {RUNTIME_BUDGET_S:.0f} s  ({elapsed:.1f} s)")


def pytest_sessionfinish(session, exitstatus):
    if time.perf_counter() - _session_start[0] > RUNTIME_BUDGET_S and session.exitstatus == 0:
        session.exitstatus = 1


@pytest.fixture(scope="session")
def demo_grid():
    return make_demo_asset()


@pytest.fixture(scope="session")
def denoiser():
    return ToyDenoiser(DenoiserConfig())


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(50, 1e-3, 0.2)


@pytest.fixture(scope="session")
def small_rig():
    return CameraRig.orbit(2, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid(rng, small_rig):
    return random_grid(rng, size=8, rig=small_rig)
