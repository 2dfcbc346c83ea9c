import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from netmpc.netmodel import EpiParams, NetworkModel  # noqa: E402
from netmpc.scenario import scenario_grid, prepare, run_closed_loop, synth_network  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]

# criterion number -> list of (test name, passed, detail)
_ACCEPTANCE: dict = {}
_TITLES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    _TITLES[number] = title
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _ACCEPTANCE.setdefault(number, []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        results = _ACCEPTANCE[number]
        ok = all(passed for _, passed, _ in results)
        details = " | ".join(d for _, _, d in results if d)
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {_TITLES[number]}"
        if details:
            line += f" -- {details}"
        terminalreporter.write_line(line)


@pytest.fixture
def params():
    return EpiParams(eps=0.32, r_a=0.2, r_s=0.2, r_q=0.2, beta_max_a=5.0, beta_max_s=5.0)


@pytest.fixture
def one_node(params):
    return NetworkModel(np.array([1000.0]), np.array([[1.0]]), params)


@pytest.fixture
def two_node(params):
    return NetworkModel(np.array([300.0, 700.0]), np.array([[0.0, 1.0], [1.0, 0.0]]), params)


@pytest.fixture(scope="session")
def net14():
    return synth_network(14, 2020, EpiParams(beta_max_a=5.0, beta_max_s=5.0))


@pytest.fixture(scope="session")
def grid_runs():
    """The six-run grid (three policy regimes, two controllers), executed once per session."""
    start = time.perf_counter()
    scenarios = scenario_grid()
    records = {sc.name: run_closed_loop(sc) for sc in scenarios}
    elapsed = time.perf_counter() - start
    prepared = {sc.name: prepare(sc) for sc in scenarios}
    return {"records": records, "scenarios": {sc.name: sc for sc in scenarios},
            "prepared": prepared, "elapsed": elapsed}
