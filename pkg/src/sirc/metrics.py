"""Stage-level accounting, token/cost projections and report rendering.

Reports always carry raw counts next to rates, and every rate names its
denominator. Cache hits count as zero-token invocations in per-invocation
averages. Percentiles use the nearest-rank definition: the p-th percentile
of n sorted samples is the ``ceil(p/100 * n)``-th smallest.

Structured report format (v1): a ``sirc-report v1`` header line followed by
one JSON document (sorted keys) holding every field of :class:`RunReport`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from sirc.domain import TokenUsage, ValidationError

REPORT_HEADER = "sirc-report v1"

STAGE_ORDER = ("AIR", "VS", "MONOLITHIC")


@dataclass
class StageStats:
    stage: str
    invocations: int = 0
    exact_hits: int = 0
    semantic_hits: int = 0
    llm_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: list[float] = field(default_factory=list)
    hit_latency_ms: list[float] = field(default_factory=list)

    @property
    def hits(self) -> int:
        return self.exact_hits + self.semantic_hits

    @property
    def token_usage(self) -> TokenUsage:
        return TokenUsage(self.prompt_tokens, self.completion_tokens)

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def rate(self, count: int) -> float:
        return count / self.invocations if self.invocations else 0.0

    @property
    def hit_rate(self) -> float:
        return self.rate(self.hits)

    @property
    def tokens_per_invocation(self) -> float:
        return self.total_tokens / self.invocations if self.invocations else 0.0

    @property
    def tokens_per_llm_call(self) -> float:
        return self.total_tokens / self.llm_calls if self.llm_calls else 0.0

    def check_identity(self) -> None:
        if self.invocations != self.exact_hits + self.semantic_hits + self.llm_calls:
            raise AccountingError(
                f"{self.stage}: invocations {self.invocations} != exact {self.exact_hits}"
                f" + semantic {self.semantic_hits} + llm {self.llm_calls}"
            )


class AccountingError(AssertionError):
    """A report violates invocations = exact + semantic + llm_calls."""


@dataclass
class RunReport:
    system: str
    seed: int = 0
    n_requests: int = 0
    failed_requests: int = 0
    stages: dict[str, StageStats] = field(default_factory=dict)
    e2e_latency_ms: list[float] = field(default_factory=list)
    params: dict[str, float | int | str] = field(default_factory=dict)

    def totals(self) -> StageStats:
        total = StageStats("Total")
        for s in self.stages.values():
            for name in ("invocations", "exact_hits", "semantic_hits", "llm_calls", "prompt_tokens", "completion_tokens"):
                setattr(total, name, getattr(total, name) + getattr(s, name))
        return total

    def stage(self, name: str) -> StageStats:
        return self.stages.setdefault(name, StageStats(name))

    @property
    def tokens_per_request(self) -> float:
        return self.totals().total_tokens / self.n_requests if self.n_requests else 0.0

    def check_identity(self) -> None:
        for s in self.stages.values():
            s.check_identity()
        self.totals().check_identity()


def check_accounting(report: RunReport) -> None:
    """Raise :class:`AccountingError` unless every row and the total balance."""
    report.check_identity()


def aggregate(traces: Iterable, system: str = "pipeline", seed: int = 0, params: dict | None = None) -> RunReport:
    """Fold request traces (objects with ``steps`` and ``simulated_ms``) into a report."""
    report = RunReport(system=system, seed=seed, params=dict(params or {}))
    for trace in traces:
        report.n_requests += 1
        report.failed_requests += bool(trace.failed)
        report.e2e_latency_ms.append(trace.simulated_ms)
        for step in trace.steps:
            st = report.stage(step.stage.value if hasattr(step.stage, "value") else str(step.stage))
            st.invocations += 1
            kind = step.outcome.kind
            if kind == "exact_hit":
                st.exact_hits += 1
            elif kind == "semantic_hit":
                st.semantic_hits += 1
            else:
                st.llm_calls += 1
            if kind != "miss":
                if step.usage.total:
                    raise AccountingError(f"{st.stage} hit carries {step.usage.total} tokens")
                st.hit_latency_ms.append(step.simulated_ms)
            st.prompt_tokens += step.usage.prompt_tokens
            st.completion_tokens += step.usage.completion_tokens
            st.latency_ms.append(step.simulated_ms)
    report.stages = {k: report.stages[k] for k in sorted(report.stages, key=_stage_key)}
    report.check_identity()
    return report


def _stage_key(name: str):
    return (STAGE_ORDER.index(name) if name in STAGE_ORDER else len(STAGE_ORDER), name)


# -- projections ------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionInputs:
    air_tokens_uncached: float
    vs_tokens_uncached: float
    air_tokens_cached: float
    vs_tokens_cached: float
    vs_fanout: float

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            # a fully cached stage legitimately costs zero tokens
            floor_ok = value >= 0 if name.endswith("_cached") else value > 0
            if not (floor_ok and math.isfinite(value)):
                bound = ">= 0" if name.endswith("_cached") else "positive"
                raise ValidationError(f"{name}={value} must be finite and {bound}")


@dataclass(frozen=True)
class TokenProjection:
    without_caching: float
    with_caching: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.with_caching / self.without_caching


def project_tokens(inputs: ProjectionInputs) -> TokenProjection:
    """Per-prompt token cost with and without stage caching."""
    without = inputs.air_tokens_uncached + inputs.vs_fanout * inputs.vs_tokens_uncached
    with_ = inputs.air_tokens_cached + inputs.vs_fanout * inputs.vs_tokens_cached
    return TokenProjection(without, with_)


@dataclass(frozen=True)
class CostProjection:
    calls: int
    paid_calls: int
    without_caching: float
    with_caching: float


def project_cost(
    calls: int,
    retained_fraction: float,
    mean_in_tokens: float,
    mean_out_tokens: float,
    price_in: float,
    price_out: float,
) -> CostProjection:
    """API cost for ``calls`` requests when only ``retained_fraction`` reach the LLM.

    Prices are per token.
    """
    if calls < 0:
        raise ValidationError("calls must be >= 0")
    if not 0 <= retained_fraction <= 1:
        raise ValidationError("retained_fraction must lie in [0, 1]")
    if price_in < 0 or price_out < 0:
        raise ValidationError("prices must be >= 0")
    if mean_in_tokens < 0 or mean_out_tokens < 0:
        raise ValidationError("token means must be >= 0")
    without = calls * (mean_in_tokens * price_in + mean_out_tokens * price_out)
    return CostProjection(calls, round(calls * retained_fraction), without, without * retained_fraction)


def projection_from_report(report: RunReport) -> ProjectionInputs:
    """Observed inputs for :func:`project_tokens` from a pipeline report.

    Uncached per-call costs come from the report's own LLM-backed calls.
    """
    air, vs = report.stages["AIR"], report.stages["VS"]
    return ProjectionInputs(
        air_tokens_uncached=air.tokens_per_llm_call,
        vs_tokens_uncached=vs.tokens_per_llm_call,
        air_tokens_cached=air.tokens_per_invocation,
        vs_tokens_cached=vs.tokens_per_invocation,
        vs_fanout=vs.invocations / air.invocations,
    )


# -- latency ----------------------------------------------------------------


@dataclass(frozen=True)
class LatencySummary:
    mean: float
    p50: float
    p95: float


def nearest_rank(sorted_samples: Sequence[float], pct: float) -> float:
    n = len(sorted_samples)
    return sorted_samples[max(0, math.ceil(pct / 100.0 * n) - 1)]


def latency_percentiles(samples: Sequence[float]) -> LatencySummary:
    if len(samples) == 0:
        raise ValidationError("latency_percentiles needs at least one sample")
    ordered = sorted(samples)
    return LatencySummary(math.fsum(ordered) / len(ordered), nearest_rank(ordered, 50), nearest_rank(ordered, 95))


# -- rendering --------------------------------------------------------------


def _pct(num: int, den: int) -> str:
    return f"{num:,} ({100.0 * num / den:.2f}% of {den:,})" if den else f"{num:,} (n/a)"


def _summary(samples: Sequence[float]) -> str:
    if not samples:
        return "-"
    s = latency_percentiles(samples)
    return f"avg {s.mean:.2f} ms; p50 {s.p50:.2f} ms; p95 {s.p95:.2f} ms"


def render_table(report: RunReport) -> str:
    """Human-readable summary in the Stage / Invoc. / Exact / Semantic / LLM layout."""
    rows = [("Stage", "Invoc.", "Exact hits", "Semantic hits", "LLM calls")]
    for s in [*report.stages.values(), report.totals()]:
        rows.append(
            (s.stage, f"{s.invocations:,}", _pct(s.exact_hits, s.invocations),
             _pct(s.semantic_hits, s.invocations), f"{s.llm_calls:,}")
        )
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = [f"system: {report.system}  seed: {report.seed}  requests: {report.n_requests}"
             f"  failed: {report.failed_requests}"]
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))

    lines.append("")
    tok_rows = [("Stage", "Prompt tok.", "Compl. tok.", "Total tok.", "Avg tok./invoc.", "Avg tok./LLM call")]
    for s in [*report.stages.values(), report.totals()]:
        tok_rows.append(
            (s.stage, f"{s.prompt_tokens:,}", f"{s.completion_tokens:,}", f"{s.total_tokens:,}",
             f"{s.tokens_per_invocation:,.2f}", f"{s.tokens_per_llm_call:,.2f}")
        )
    widths = [max(len(r[i]) for r in tok_rows) for i in range(6)]
    for i, r in enumerate(tok_rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))

    lines.append("")
    lines.append(f"tokens per request: {report.tokens_per_request:,.2f}")
    for s in report.stages.values():
        lines.append(f"{s.stage} hit latency: {_summary(s.hit_latency_ms)}")
    lines.append(f"end-to-end latency: {_summary(report.e2e_latency_ms)}")
    return "\n".join(lines) + "\n"


def render_structured(report: RunReport) -> str:
    doc = asdict(report)
    return REPORT_HEADER + "\n" + json.dumps(doc, sort_keys=True, indent=1) + "\n"


def parse_structured(text: str) -> RunReport:
    header, _, body = text.partition("\n")
    if header.strip() != REPORT_HEADER:
        raise ValidationError(f"unsupported report header {header!r}")
    doc = json.loads(body)
    stages = {k: StageStats(**v) for k, v in doc.pop("stages").items()}
    return RunReport(stages=stages, **doc)


def render_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["system", "stage", "invocations", "exact_hits", "semantic_hits", "llm_calls",
                     "prompt_tokens", "completion_tokens", "hit_rate"])
    for s in [*report.stages.values(), report.totals()]:
        writer.writerow([report.system, s.stage, s.invocations, s.exact_hits, s.semantic_hits, s.llm_calls,
                         s.prompt_tokens, s.completion_tokens, f"{s.hit_rate:.6f}"])
    return buf.getvalue()
