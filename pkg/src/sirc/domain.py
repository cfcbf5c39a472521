"""Structured pipeline artifacts and their canonical text serialization.

Intents are cache keys for the synthesis stage, so the serializer must be
insensitive to list order and stable across processes. The canonical text
format (v1) is line-oriented ``key: value`` pairs with keys sorted
ascending, list values comma-joined and exactly one trailing newline::

    chart_primitives: bar/clicks/channel,kpi_card/spend/
    dimensions: channel
    filters: channel = paid%20search
    format: v1
    layout: 2x3
    metrics: clicks,spend
    namespace: client_a
    temporal_grain: week

A chart primitive renders as ``type/metric+metric/dimension+dimension``.
A filter renders as ``field op value`` with the value percent-encoded, so
it never contains spaces, commas or newlines.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable
from urllib.parse import quote, unquote

FORMAT_VERSION = "v1"

TEMPORAL_GRAINS = ("day", "week", "month", "quarter", "none")
CHART_TYPES = ("line", "bar", "pie", "scatter", "table", "kpi_card")
FILTER_OPERATORS = ("=", "!=", "<", ">", "in")

_TOKEN_RE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)*$")
_LAYOUT_RE = re.compile(r"^(\d+)x(\d+)$")


class ValidationError(ValueError):
    """Raised when an artifact or argument violates one of its invariants."""


def _check_token(token: str, what: str) -> None:
    if not isinstance(token, str) or not _TOKEN_RE.match(token):
        raise ValidationError(f"{what} token {token!r} is not lowercase snake_case")


@dataclass(frozen=True)
class Digest:
    """32-byte SHA-256 value; renders as 64 lowercase hex characters."""

    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != 32:
            raise ValidationError("digest must be exactly 32 bytes")

    @property
    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> Digest:
        if len(text) != 64:
            raise ValidationError(f"digest hex must be 64 chars, got {len(text)}")
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex

    def __lt__(self, other: Digest) -> bool:
        return self.value < other.value


def sha256_digest(data: str | bytes) -> Digest:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return Digest(hashlib.sha256(data).digest())


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValidationError("token counts must be non-negative")

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


ZERO_USAGE = TokenUsage()


@dataclass(frozen=True)
class Prompt:
    text: str
    client_namespace: str = "default"
    arrival_index: int = 0

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError("prompt text is empty after trimming")
        if self.arrival_index < 0:
            raise ValidationError("arrival_index must be non-negative")


@dataclass(frozen=True)
class SchemaContext:
    metrics: frozenset[str]
    dimensions: frozenset[str]
    namespace: str = "default"

    def __init__(self, metrics: Iterable[str], dimensions: Iterable[str], namespace: str = "default"):
        object.__setattr__(self, "metrics", frozenset(metrics))
        object.__setattr__(self, "dimensions", frozenset(dimensions))
        object.__setattr__(self, "namespace", namespace)
        if not self.metrics or not self.dimensions:
            raise ValidationError("schema metric and dimension sets must be non-empty")
        for t in self.metrics:
            _check_token(t, "metric")
        for t in self.dimensions:
            _check_token(t, "dimension")
        overlap = self.metrics & self.dimensions
        if overlap:
            raise ValidationError(f"metric and dimension sets overlap: {sorted(overlap)}")

    @property
    def tokens(self) -> frozenset[str]:
        return self.metrics | self.dimensions


@dataclass(frozen=True)
class ChartPrimitive:
    chart_type: str
    encoded_metrics: tuple[str, ...] = ()
    encoded_dimensions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.chart_type not in CHART_TYPES:
            raise ValidationError(f"unknown chart_type {self.chart_type!r}")
        object.__setattr__(self, "encoded_metrics", tuple(sorted(set(self.encoded_metrics))))
        object.__setattr__(self, "encoded_dimensions", tuple(sorted(set(self.encoded_dimensions))))
        for t in self.encoded_metrics:
            _check_token(t, "metric")
        for t in self.encoded_dimensions:
            _check_token(t, "dimension")

    def render(self) -> str:
        return "/".join(
            (self.chart_type, "+".join(self.encoded_metrics), "+".join(self.encoded_dimensions))
        )

    @classmethod
    def parse(cls, text: str) -> ChartPrimitive:
        parts = text.split("/")
        if len(parts) != 3:
            raise ValidationError(f"malformed chart primitive {text!r}")
        kind, ms, ds = parts
        return cls(kind, tuple(filter(None, ms.split("+"))), tuple(filter(None, ds.split("+"))))


@dataclass(frozen=True)
class Filter:
    field: str
    op: str
    value: str

    def __post_init__(self) -> None:
        _check_token(self.field, "filter field")
        if self.op not in FILTER_OPERATORS:
            raise ValidationError(f"filter operator {self.op!r} not in {FILTER_OPERATORS}")

    def render(self) -> str:
        return f"{self.field} {self.op} {quote(self.value, safe='')}"

    @classmethod
    def parse(cls, text: str) -> Filter:
        parts = text.split(" ")
        if len(parts) == 2:  # empty value at end of line loses its trailing space
            parts.append("")
        if len(parts) != 3:
            raise ValidationError(f"malformed filter {text!r}")
        return cls(parts[0], parts[1], unquote(parts[2]))


@dataclass(frozen=True)
class AnalyticIntent:
    """What to compute: the output of intent resolution.

    Token lists are normalized to sorted, de-duplicated tuples on
    construction, so two intents equal up to list order compare equal.
    """

    metrics: tuple[str, ...] = ()
    dimensions: tuple[str, ...] = ()
    filters: tuple[Filter, ...] = ()
    temporal_grain: str = "none"
    chart_primitives: tuple[ChartPrimitive, ...] = ()
    layout: tuple[int, int] | None = None
    namespace: str = "default"

    def __post_init__(self) -> None:
        for name in ("metrics", "dimensions"):
            object.__setattr__(self, name, tuple(sorted(set(getattr(self, name)))))
        object.__setattr__(
            self, "filters", tuple(sorted(set(self.filters), key=lambda f: (f.field, f.op, f.value)))
        )
        object.__setattr__(
            self, "chart_primitives", tuple(sorted(set(self.chart_primitives), key=ChartPrimitive.render))
        )
        self.validate()

    def validate(self, schema: SchemaContext | None = None) -> None:
        if not self.metrics and not self.chart_primitives:
            raise ValidationError("intent needs at least one metric or chart primitive")
        if self.temporal_grain not in TEMPORAL_GRAINS:
            raise ValidationError(f"temporal_grain {self.temporal_grain!r} not in {TEMPORAL_GRAINS}")
        for t in self.metrics:
            _check_token(t, "metric")
        for t in self.dimensions:
            _check_token(t, "dimension")
        if not self.namespace or any(c.isspace() or c == "," for c in self.namespace):
            raise ValidationError(f"namespace {self.namespace!r} must be non-empty without spaces or commas")
        metric_set, dim_set = set(self.metrics), set(self.dimensions)
        for p in self.chart_primitives:
            if not set(p.encoded_metrics) <= metric_set:
                raise ValidationError(f"chart primitive {p.render()} encodes metrics outside the intent")
            if not set(p.encoded_dimensions) <= dim_set:
                raise ValidationError(f"chart primitive {p.render()} encodes dimensions outside the intent")
        if self.layout is not None:
            rows, cols = self.layout
            if rows < 1 or cols < 1:
                raise ValidationError("layout rows and cols must be >= 1")
        if schema is not None:
            unknown = (metric_set - schema.metrics) | (dim_set - schema.dimensions)
            if unknown:
                raise ValidationError(f"tokens not in schema: {sorted(unknown)}")
            if schema.namespace != self.namespace:
                raise ValidationError(
                    f"intent namespace {self.namespace!r} does not match schema {schema.namespace!r}"
                )

    def restrict_to(self, primitive: ChartPrimitive) -> AnalyticIntent:
        """Sub-intent covering one chart primitive: the synthesis cache key.

        Filters survive only when they constrain a column the primitive
        encodes; layout is dashboard-level and is dropped.
        """
        columns = set(primitive.encoded_metrics) | set(primitive.encoded_dimensions)
        return AnalyticIntent(
            metrics=primitive.encoded_metrics,
            dimensions=primitive.encoded_dimensions,
            filters=tuple(f for f in self.filters if f.field in columns),
            temporal_grain=self.temporal_grain,
            chart_primitives=(primitive,),
            namespace=self.namespace,
        )


@dataclass(frozen=True)
class VisualizationDirective:
    source_intent_digest: Digest
    chart_spec: str
    cost: TokenUsage = field(default=ZERO_USAGE)


def canonicalize_intent(intent: AnalyticIntent) -> str:
    """Deterministic v1 text form of ``intent`` (see module docstring)."""
    intent.validate()
    fields = {
        "chart_primitives": ",".join(p.render() for p in intent.chart_primitives),
        "dimensions": ",".join(intent.dimensions),
        "filters": ",".join(f.render() for f in intent.filters),
        "format": FORMAT_VERSION,
        "layout": "" if intent.layout is None else f"{intent.layout[0]}x{intent.layout[1]}",
        "metrics": ",".join(intent.metrics),
        "namespace": intent.namespace,
        "temporal_grain": intent.temporal_grain,
    }
    lines = [f"{k}: {v}".rstrip() for k, v in sorted(fields.items())]
    return "\n".join(lines) + "\n"


def parse_canonical(text: str) -> AnalyticIntent:
    """Inverse of :func:`canonicalize_intent`."""
    values: dict[str, str] = {}
    for line in text.splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            raise ValidationError(f"malformed canonical line {line!r}")
        values[key.strip()] = value.strip()
    if values.get("format") != FORMAT_VERSION:
        raise ValidationError(f"unsupported canonical format {values.get('format')!r}")

    def items(key: str) -> list[str]:
        return [v for v in values.get(key, "").split(",") if v]

    layout = None
    if values.get("layout"):
        m = _LAYOUT_RE.match(values["layout"])
        if m is None:
            raise ValidationError(f"malformed layout {values['layout']!r}")
        layout = (int(m.group(1)), int(m.group(2)))
    return AnalyticIntent(
        metrics=tuple(items("metrics")),
        dimensions=tuple(items("dimensions")),
        filters=tuple(Filter.parse(f) for f in items("filters")),
        temporal_grain=values.get("temporal_grain", "none"),
        chart_primitives=tuple(ChartPrimitive.parse(p) for p in items("chart_primitives")),
        layout=layout,
        namespace=values.get("namespace", "default"),
    )


def intent_digest(intent: AnalyticIntent) -> Digest:
    return sha256_digest(canonicalize_intent(intent))
