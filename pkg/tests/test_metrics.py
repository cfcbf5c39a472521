from __future__ import annotations

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirc.domain import Prompt, TokenUsage, ValidationError
from sirc.metrics import (
    AccountingError,
    ProjectionInputs,
    RunReport,
    StageStats,
    aggregate,
    check_accounting,
    latency_percentiles,
    parse_structured,
    project_cost,
    project_tokens,
    projection_from_report,
    render_csv,
    render_structured,
    render_table,
)
from sirc.pipeline import RequestTrace, StepRecord
from sirc.retrieval import RetrievalOutcome
from sirc.store import Stage

from conftest import digest


def table_report() -> RunReport:
    """Stage rows and token totals of the published production run."""
    report = RunReport("pipeline", n_requests=500)
    report.stages["AIR"] = StageStats("AIR", 500, 0, 194, 306, 1_016_795, 946_058)
    report.stages["VS"] = StageStats("VS", 4_841, 4_023, 0, 818, 2_116_448, 2_402_825)
    return report


def test_published_rows_balance():
    report = table_report()
    check_accounting(report)
    totals = report.totals()
    assert (totals.invocations, totals.exact_hits, totals.semantic_hits, totals.llm_calls) == (5_341, 4_023, 194, 1_124)


def test_published_hit_rates():
    report = table_report()
    assert report.stages["AIR"].hit_rate == pytest.approx(0.388)
    assert 100 * report.stages["VS"].rate(report.stages["VS"].exact_hits) == pytest.approx(83.10, abs=0.005)


def test_published_token_averages():
    air, vs = table_report().stages["AIR"], table_report().stages["VS"]
    assert air.tokens_per_invocation == pytest.approx(3_925.71, abs=0.005)
    assert vs.tokens_per_invocation == pytest.approx(933.54, abs=0.005)
    assert air.tokens_per_llm_call == pytest.approx(6_414.55, abs=0.005)
    assert vs.tokens_per_llm_call == pytest.approx(5_524.78, abs=0.005)


def test_projection_from_published_rows_matches_direct_inputs():
    derived = project_tokens(projection_from_report(table_report()))
    direct = project_tokens(ProjectionInputs(6414.55, 5524.78, 3925.71, 933.54, 4841 / 500))
    assert derived.without_caching == pytest.approx(direct.without_caching, abs=0.1)
    assert derived.with_caching == pytest.approx(direct.with_caching, abs=0.1)


def test_unbalanced_row_is_rejected():
    report = table_report()
    report.stages["VS"].llm_calls = 817
    with pytest.raises(AccountingError, match="VS"):
        check_accounting(report)


def test_fig1_projection():
    proj = project_tokens(ProjectionInputs(6414.55, 5524.78, 3925.71, 933.54, 4841 / 500))
    assert abs(round(proj.without_caching) - 59_906) <= 1
    assert abs(round(proj.with_caching) - 12_964) <= 1
    assert 100 * proj.reduction == pytest.approx(78.4, abs=0.1)
    # independent route: exact rational arithmetic
    f = Fraction(4841, 500)
    without = Fraction("6414.55") + f * Fraction("5524.78")
    with_ = Fraction("3925.71") + f * Fraction("933.54")
    assert proj.without_caching == pytest.approx(float(without), abs=1e-9)
    assert proj.with_caching == pytest.approx(float(with_), abs=1e-9)


def test_projection_boundaries():
    same = project_tokens(ProjectionInputs(100, 50, 100, 50, 3))
    assert same.reduction == 0.0
    assert project_tokens(ProjectionInputs(100, 50, 40, 0, 1)).with_caching == 40
    with pytest.raises(ValidationError, match="vs_fanout"):
        ProjectionInputs(100, 50, 40, 10, 0)
    with pytest.raises(ValidationError, match="air_tokens_uncached"):
        ProjectionInputs(-1, 50, 40, 10, 1)
    with pytest.raises(ValidationError, match=">= 0"):
        ProjectionInputs(1, 50, -40, 10, 1)


def test_fig2_cost_projection():
    cost = project_cost(10_000, 0.2104, 2_788, 2_979, 1e-6, 2e-6)
    assert cost.paid_calls == 2_104
    assert cost.without_caching == pytest.approx(10_000 * (2_788e-6 + 2 * 2_979e-6))
    assert cost.with_caching == pytest.approx(cost.without_caching * 0.2104)
    doubled = project_cost(10_000, 0.2104, 2_788, 2_979, 2e-6, 4e-6)
    assert doubled.without_caching == pytest.approx(2 * cost.without_caching)
    assert doubled.with_caching == pytest.approx(2 * cost.with_caching)


def test_cost_boundaries():
    full = project_cost(100, 1.0, 10, 10, 0.5, 0.5)
    assert full.with_caching == full.without_caching
    free = project_cost(100, 0.3, 10, 10, 0, 0)
    assert free.with_caching == free.without_caching == 0
    for bad in [dict(calls=-1), dict(retained_fraction=1.5), dict(price_in=-1), dict(mean_in_tokens=-1)]:
        args = dict(calls=10, retained_fraction=0.5, mean_in_tokens=1, mean_out_tokens=1, price_in=1, price_out=1)
        args.update(bad)
        with pytest.raises(ValidationError):
            project_cost(**args)


def test_nearest_rank_percentiles():
    s = latency_percentiles([1, 2, 3, 4, 5])
    assert (s.mean, s.p50, s.p95) == (3, 3, 5)
    c = latency_percentiles([2.5] * 7)
    assert c.mean == c.p50 == c.p95 == 2.5
    with pytest.raises(ValidationError):
        latency_percentiles([])


def _trace(kinds, usage=TokenUsage(10, 5)) -> RequestTrace:
    trace = RequestTrace(Prompt("x"), "pipeline")
    for i, (stage, kind) in enumerate(kinds):
        out = RetrievalOutcome(kind, digest(f"{i}"))
        trace.steps.append(StepRecord(stage, out, usage if kind == "miss" else TokenUsage(0, 0), simulated_ms=1.0))
    return trace


def test_all_miss_trace_with_fanout_three():
    report = aggregate([_trace([(Stage.AIR, "miss")] + [(Stage.VS, "miss")] * 3)])
    assert report.totals().llm_calls == 4
    assert report.stages["VS"].invocations == 3


def test_empty_aggregate_is_zero():
    report = aggregate([])
    assert report.n_requests == 0 and report.totals().invocations == 0 and report.tokens_per_request == 0


def test_hit_with_tokens_is_an_accounting_error():
    trace = _trace([(Stage.AIR, "exact_hit")])
    trace.steps[0].usage = TokenUsage(1, 0)
    with pytest.raises(AccountingError, match="hit carries"):
        aggregate([trace])


def test_renderings():
    report = table_report()
    table = render_table(report)
    assert "4,023 (83.10% of 4,841)" in table
    assert "194 (38.80% of 500)" in table
    assert "1,124" in table
    rows = render_csv(report).splitlines()
    assert rows[0].startswith("system,stage,invocations")
    assert rows[2].startswith("pipeline,VS,4841,4023,0,818")
    assert render_structured(report).startswith("sirc-report v1\n")
    with pytest.raises(ValidationError):
        parse_structured("sirc-report v0\n{}")


KINDS = st.sampled_from(["exact_hit", "semantic_hit", "miss"])


@given(st.lists(st.tuples(KINDS, st.lists(KINDS, max_size=5)), max_size=20))
@settings(max_examples=100, deadline=None)
def test_aggregate_balances_and_round_trips(shape):
    traces = [_trace([(Stage.AIR, air)] + [(Stage.VS, k) for k in vs]) for air, vs in shape]
    report = aggregate(traces, params={"air_tau": 0.9})
    check_accounting(report)
    hit_tokens = sum(s.usage.total for t in traces for s in t.steps if s.outcome.kind != "miss")
    assert hit_tokens == 0
    assert report.totals().total_tokens == 15 * report.totals().llm_calls
    assert parse_structured(render_structured(report)) == report


@given(st.floats(1, 1e5), st.floats(1, 1e5), st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 50))
@settings(max_examples=100, deadline=None)
def test_projection_reduction_bounds(air, vs, air_frac, vs_frac, fanout):
    proj = project_tokens(ProjectionInputs(air, vs, air * air_frac, vs * vs_frac, fanout))
    assert -1e-12 <= proj.reduction <= 1 + 1e-12
    assert math.isclose(proj.with_caching, air * air_frac + fanout * vs * vs_frac, rel_tol=1e-12)
