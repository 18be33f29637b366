import os
import time
from datetime import datetime

import pytest

from graphcore import GraphPoint, MetricGraph
from measures import DiscreteMeasure
from networks import builtin_network, l_pipe, single_pipe, y_network


class _ProgressReporter:
    """Prints a line as each test starts and finishes, then the slowest tests at the end."""

    SUMMARY_SIZE = 5

    def __init__(self) -> None:
        self._terminal = None
        self._started: dict[str, float] = {}
        self._elapsed: dict[str, float] = {}

    def _write(self, text: str) -> None:
        if self._terminal is not None:
            self._terminal.write_line(f"[{datetime.now():%H:%M:%S}] {text}")

    @pytest.hookimpl(tryfirst=True)
    def pytest_sessionstart(self, session: pytest.Session) -> None:
        self._terminal = session.config.pluginmanager.get_plugin("terminalreporter")

    @pytest.hookimpl
    def pytest_runtest_logstart(self, nodeid: str, location) -> None:
        self._started[nodeid] = time.monotonic()
        self._write(f"RUN    {nodeid}")

    @pytest.hookimpl
    def pytest_runtest_logreport(self, report: pytest.TestReport) -> None:
        if report.when != "call":
            return
        start = self._started.pop(report.nodeid, None)
        suffix = ""
        if start is not None:
            self._elapsed[report.nodeid] = time.monotonic() - start
            suffix = f" ({self._elapsed[report.nodeid]:.2f}s)"
        self._write(f"{report.outcome.upper():6} {report.nodeid}{suffix}")

    @pytest.hookimpl
    def pytest_sessionfinish(self, session: pytest.Session) -> None:
        slowest = sorted(self._elapsed.items(), key=lambda kv: kv[1], reverse=True)[: self.SUMMARY_SIZE]
        for nodeid, seconds in slowest:
            self._write(f"SLOW   {nodeid} {seconds:.2f}s")


def _flag_enabled(config: pytest.Config, option: str, env: str) -> bool:
    if config.getoption(option, default=False):
        return True
    return os.environ.get(env, "").lower() in {"1", "true", "yes", "on"}


def pytest_addoption(parser: pytest.Parser) -> None:
    group = parser.getgroup("got")
    group.addoption(
        "--progress",
        action="store_true",
        help="Print test start/finish timestamps and durations to aid debugging long runs.",
    )
    group.addoption(
        "--runslow",
        action="store_true",
        help="Include tests marked 'slow' (larger numerical runs). They are skipped by default.",
    )


def pytest_configure(config: pytest.Config) -> None:
    if _flag_enabled(config, "progress", "PYTEST_PROGRESS"):
        config.pluginmanager.register(_ProgressReporter(), "got-progress-reporter")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if _flag_enabled(config, "runslow", "PYTEST_INCLUDE_SLOW"):
        return
    skip_slow = pytest.mark.skip(reason="Slow test; re-run with --runslow or PYTEST_INCLUDE_SLOW=1.")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def pipe() -> MetricGraph:
    return single_pipe()


@pytest.fixture
def lpipe() -> MetricGraph:
    return l_pipe()


@pytest.fixture
def ygraph() -> MetricGraph:
    return y_network()


@pytest.fixture
def figure_graph() -> MetricGraph:
    return builtin_network("figure1")


@pytest.fixture
def point_mass():
    def make(edge: str, coord: float) -> DiscreteMeasure:
        return DiscreteMeasure.uniform([GraphPoint(edge, coord)])

    return make
