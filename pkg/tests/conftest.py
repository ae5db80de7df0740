import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_report  # noqa: E402
from edgeperf.aggregator.server import AggregatorService  # noqa: E402
from edgeperf.fixtures import bundled_path  # noqa: E402
from edgeperf.probes.responder import Responder  # noqa: E402
from edgeperf.traces import TraceRepository  # noqa: E402


@pytest.fixture(scope="module")
def responder():
    with Responder() as r:
        yield r


@pytest.fixture
def aggregator(tmp_path):
    with AggregatorService(tmp_path / "agg.sqlite3") as svc:
        yield svc


@pytest.fixture(scope="session")
def bimodal_repo():
    return TraceRepository.open(bundled_path("bimodal-rtt-pool"))


@pytest.fixture(scope="session")
def synthetic_repo():
    return TraceRepository.open(bundled_path("synthetic-traces"))


def pytest_terminal_summary(terminalreporter):
    rows = acceptance_report.lines()
    if rows:
        terminalreporter.section("acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
