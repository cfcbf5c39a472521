from __future__ import annotations

import pytest

from sirc.domain import AnalyticIntent, ChartPrimitive, Filter, SchemaContext, sha256_digest

# Lines recorded by tests/test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def digest(text: str):
    return sha256_digest(text)


@pytest.fixture
def schema() -> SchemaContext:
    return SchemaContext(
        metrics={"spend", "clicks", "impressions", "sales", "dda_revenue", "ga4_revenue", "cpc", "cpm"},
        dimensions={"channel", "campaign", "device"},
        namespace="client_a",
    )


def make_intent(metrics=("spend",), dimensions=("channel",), grain="week", filters=(), namespace="client_a",
                primitives=None) -> AnalyticIntent:
    if primitives is None:
        primitives = [ChartPrimitive("kpi_card", (m,)) for m in metrics]
        primitives.append(ChartPrimitive("table", tuple(metrics), tuple(dimensions)))
    return AnalyticIntent(
        metrics=tuple(metrics),
        dimensions=tuple(dimensions),
        filters=tuple(Filter(*f) for f in filters),
        temporal_grain=grain,
        chart_primitives=tuple(primitives),
        namespace=namespace,
    )
