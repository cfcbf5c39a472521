"""Deterministic synthetic prompt workloads for cache replay.

A workload is a temporally ordered list of prompts drawn from intent
families over a media-marketing schema. Family popularity is Zipf-skewed and
later families are introduced later in time, so a temporal seed/challenge
split carries some drift. Surface forms come from templates plus synonym
tables; a family's later prompts are either restyled copies of an earlier
phrasing (case/punctuation only), one-slot edits of one, or fresh renderings.

Chart primitives are built per metric (KPI card, trend line, breakdown bar)
plus one summary table, so families sharing metrics share most primitives.

Near-miss prompts restate a family's phrasing with one metric swapped for a
confusable sibling (``dda_revenue``/``ga4_revenue``, ``cpc``/``cpm`` ...).
Their ``family_id`` is the base family while ``true_intent`` carries the
swapped metric.

File format (v1): a ``sirc-workload v1`` header line, then one JSON object
per prompt with keys ``arrival_index``, ``namespace``, ``family_id``,
``near_miss``, ``text`` and ``intent`` (canonical intent text).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from sirc._validation import check_unit_interval
from sirc.domain import (
    AnalyticIntent,
    ChartPrimitive,
    Filter,
    Prompt,
    SchemaContext,
    ValidationError,
    canonicalize_intent,
    parse_canonical,
)

WORKLOAD_HEADER = "sirc-workload v1"

DEFAULT_METRICS = (
    "spend", "clicks", "impressions", "sales", "conversions", "video_views",
    "cpc", "cpm", "ctr", "cvr", "dda_revenue", "ga4_revenue",
)
DEFAULT_DIMENSIONS = ("channel", "campaign", "device", "region", "creative", "publisher")

CONFUSABLE = {
    "dda_revenue": "ga4_revenue",
    "ga4_revenue": "dda_revenue",
    "cpc": "cpm",
    "cpm": "cpc",
    "ctr": "cvr",
    "cvr": "ctr",
}
CHANNEL_VALUES = ("paid search", "social display", "programmatic video")

_VERBS = (
    "Show", "Show me", "Display", "Give me", "Plot", "Build a dashboard with",
    "I need a view of", "Chart", "Pull up", "Visualize", "Create a report on",
    "Build an executive summary dashboard with top KPIs across media such as",
)
_JOINERS = (", ", " and ", " & ", " plus ")
_DIM_PHRASES = ("by {d}", "broken down by {d}", "split by {d}", "for each {d}", "grouped by {d}")
_GRAIN_PHRASES = {
    "day": ("daily", "by day", "each day", "day over day"),
    "week": ("weekly", "by week", "each week", "week over week"),
    "month": ("monthly", "by month", "each month", "month over month"),
    "quarter": ("quarterly", "by quarter", "each quarter", "quarter over quarter"),
    "none": ("", "overall", "in total", "for the full period"),
}
_FILTER_PHRASES = ("for {v}", "only for {v}", "filtered to {v}", "limited to {v}")
_EXTRAS = ("", "please", "for the team", "for leadership", "for the weekly sync", "as a dashboard")
_CASES = ("asis", "lower", "upper_first", "title")
_PUNCT = ("", ".", "?", "!")

_GRAINS = ("day", "week", "month", "quarter", "none")
_GRAIN_WEIGHTS = (0.15, 0.35, 0.3, 0.1, 0.1)


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int = 0
    n_seed_prompts: int = 500
    n_challenge_prompts: int = 500
    n_intent_families: int = 150
    family_skew: float = 1.1
    restyle_rate: float = 0.3
    edit_rate: float = 0.35
    near_miss_rate: float = 0.1
    drift: float = 0.5
    filter_rate: float = 0.3
    namespaces: tuple[str, ...] = ("client_a",)
    metrics: tuple[str, ...] = DEFAULT_METRICS
    dimensions: tuple[str, ...] = DEFAULT_DIMENSIONS

    def __post_init__(self) -> None:
        for name in ("n_seed_prompts", "n_challenge_prompts", "n_intent_families"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("near_miss_rate", "restyle_rate", "edit_rate", "drift", "filter_rate"):
            check_unit_interval(getattr(self, name), name)
        if self.restyle_rate + self.edit_rate > 1:
            raise ValidationError("restyle_rate + edit_rate must not exceed 1")
        if self.family_skew < 0:
            raise ValidationError("family_skew must be >= 0")
        if not self.namespaces:
            raise ValidationError("at least one namespace is required")
        if self.n_intent_families > self.n_prompts:
            raise ValidationError(
                f"n_intent_families={self.n_intent_families} exceeds total prompts {self.n_prompts}"
            )
        if self.n_prompts and not self.n_intent_families:
            raise ValidationError("n_intent_families must be >= 1 when prompts are requested")
        if not set(CONFUSABLE) & set(self.metrics):
            raise ValidationError("metrics must include at least one confusable metric")

    @property
    def n_prompts(self) -> int:
        return self.n_seed_prompts + self.n_challenge_prompts

    def schema(self, namespace: str) -> SchemaContext:
        return SchemaContext(self.metrics, self.dimensions, namespace)


@dataclass(frozen=True)
class LabeledPrompt:
    prompt: Prompt
    family_id: str
    is_near_miss: bool
    true_intent: AnalyticIntent

    @property
    def text(self) -> str:
        return self.prompt.text


@dataclass
class _Family:
    family_id: str
    intent: AnalyticIntent
    choices: list[dict] = field(default_factory=list)
    texts: set[str] = field(default_factory=set)


def chart_primitives_for(metrics: Sequence[str], dimensions: Sequence[str], grain: str) -> list[ChartPrimitive]:
    """Deterministic primitive set: KPI card, trend and breakdown per metric, one table."""
    prims = []
    for m in metrics:
        prims.append(ChartPrimitive("kpi_card", (m,)))
        if grain != "none":
            prims.append(ChartPrimitive("line", (m,)))
        if dimensions:
            prims.append(ChartPrimitive("bar", (m,), (dimensions[0],)))
    prims.append(ChartPrimitive("table", tuple(metrics), tuple(dimensions)))
    return prims


def _build_intent(metrics, dimensions, grain, filters, namespace) -> AnalyticIntent:
    prims = chart_primitives_for(sorted(metrics), sorted(dimensions), grain)
    cols = 3
    return AnalyticIntent(
        metrics=tuple(metrics),
        dimensions=tuple(dimensions),
        filters=tuple(filters),
        temporal_grain=grain,
        chart_primitives=tuple(prims),
        layout=(math.ceil(len(prims) / cols), cols),
        namespace=namespace,
    )


def swap_metric(intent: AnalyticIntent, old: str, new: str) -> AnalyticIntent:
    metrics = [new if m == old else m for m in intent.metrics]
    return _build_intent(
        metrics,
        intent.dimensions,
        intent.temporal_grain,
        [f for f in intent.filters if f.field != old],
        intent.namespace,
    )


def _make_families(spec: WorkloadSpec, rng: np.random.Generator) -> list[_Family]:
    confusable = [m for m in spec.metrics if m in CONFUSABLE]
    plain = [m for m in spec.metrics if m not in CONFUSABLE]
    families = []
    seen = set()
    for i in range(spec.n_intent_families):
        for _attempt in range(50):
            n_extra = int(rng.choice([1, 2, 3], p=[0.3, 0.45, 0.25]))
            metrics = {str(rng.choice(confusable))}
            metrics.update(str(m) for m in rng.choice(plain, size=min(n_extra, len(plain)), replace=False))
            n_dims = int(rng.choice([1, 2], p=[0.75, 0.25]))
            dims = [str(d) for d in rng.choice(spec.dimensions, size=n_dims, replace=False)]
            grain = str(rng.choice(_GRAINS, p=_GRAIN_WEIGHTS))
            filters = []
            if "channel" in spec.dimensions and rng.random() < spec.filter_rate:
                filters.append(Filter("channel", "=", str(rng.choice(CHANNEL_VALUES))))
            ns = spec.namespaces[i % len(spec.namespaces)]
            intent = _build_intent(sorted(metrics), dims, grain, filters, ns)
            key = canonicalize_intent(intent)
            if key not in seen:
                break
        seen.add(key)
        families.append(_Family(f"f{i:04d}", intent))
    return families


def _draw_choices(intent: AnalyticIntent, rng: np.random.Generator) -> dict:
    order = [str(m) for m in rng.permutation(list(intent.metrics))]
    return {
        "verb": int(rng.integers(len(_VERBS))),
        "order": order,
        "metric_style": {m: int(rng.integers(3)) for m in intent.metrics},
        "joiner": int(rng.integers(len(_JOINERS))),
        "dim": int(rng.integers(len(_DIM_PHRASES))),
        "grain": int(rng.integers(4)),
        "filter": int(rng.integers(len(_FILTER_PHRASES))),
        "extra": int(rng.integers(len(_EXTRAS))),
        "case": int(rng.integers(len(_CASES))),
        "punct": int(rng.integers(len(_PUNCT))),
    }


def _render_metric(token: str, style: int) -> str:
    words = token.split("_")
    if style == 0:
        return " ".join(words)
    if style == 1:
        return token
    return " ".join(w.upper() if len(w) <= 3 else w.capitalize() for w in words)


def render_prompt(intent: AnalyticIntent, choices: dict) -> str:
    metrics = [_render_metric(m, choices["metric_style"].get(m, 0)) for m in choices["order"]]
    joiner = _JOINERS[choices["joiner"]]
    parts = [_VERBS[choices["verb"]], joiner.join(metrics[:-1]) + (joiner if len(metrics) > 1 else "") + metrics[-1]]
    if intent.dimensions:
        dims = " and ".join(intent.dimensions)
        parts.append(_DIM_PHRASES[choices["dim"]].format(d=dims))
    grain_phrase = _GRAIN_PHRASES[intent.temporal_grain][choices["grain"]]
    if grain_phrase:
        parts.append(grain_phrase)
    for f in intent.filters:
        parts.append(_FILTER_PHRASES[choices["filter"]].format(v=f.value))
    if _EXTRAS[choices["extra"]]:
        parts.append(_EXTRAS[choices["extra"]])
    text = " ".join(parts)
    case = _CASES[choices["case"]]
    if case == "lower":
        text = text.lower()
    elif case == "upper_first":
        text = text[0].upper() + text[1:].lower()
    elif case == "title":
        text = " ".join(w[:1].upper() + w[1:] for w in text.split(" "))
    return text + _PUNCT[choices["punct"]]


def _restyle(choices: dict, rng: np.random.Generator) -> dict:
    out = dict(choices)
    out["case"] = int(rng.integers(len(_CASES)))
    out["punct"] = int(rng.integers(len(_PUNCT)))
    return out


def _edit_one_slot(choices: dict, rng: np.random.Generator) -> dict:
    out = dict(choices)
    slot = str(rng.choice(["verb", "joiner", "dim", "grain", "filter", "extra"]))
    sizes = {"verb": len(_VERBS), "joiner": len(_JOINERS), "dim": len(_DIM_PHRASES), "grain": 4,
             "filter": len(_FILTER_PHRASES), "extra": len(_EXTRAS)}
    out[slot] = int(rng.integers(sizes[slot]))
    return out


def _allocate(n_prompts: int, n_families: int, skew: float) -> list[int]:
    """1 prompt per family plus a Zipf share of the rest (largest remainder)."""
    weights = 1.0 / np.arange(1, n_families + 1) ** skew
    weights /= weights.sum()
    extra = n_prompts - n_families
    raw = weights * extra
    counts = np.floor(raw).astype(int)
    short = extra - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return [1 + int(c) for c in counts]


def generate(spec: WorkloadSpec) -> list[LabeledPrompt]:
    """Generate the full temporally ordered workload for ``spec``."""
    n = spec.n_prompts
    if n == 0:
        return []
    rng = np.random.default_rng(spec.seed)
    families = _make_families(spec, rng)
    counts = _allocate(n, len(families), spec.family_skew)

    # popular families arrive early; later ones are introduced progressively
    slots = []
    for f_idx, count in enumerate(counts):
        intro = spec.drift * f_idx / max(1, len(families))
        times = intro + (1 - intro) * rng.random(count)
        times[0] = intro + (1 - intro) * 0.5 * rng.random()
        slots.extend((float(t), f_idx) for t in times)
    slots.sort()

    first_seen: set[int] = set()
    eligible = []
    for pos, (_, f_idx) in enumerate(slots):
        if f_idx in first_seen:
            eligible.append(pos)
        first_seen.add(f_idx)
    quota = int(round(spec.near_miss_rate * n))
    if quota > len(eligible):
        rest = [p for p in range(n) if p not in set(eligible)]
        eligible = eligible + rest
    near_miss = set(int(p) for p in rng.choice(eligible, size=quota, replace=False)) if quota else set()

    out = []
    for pos, (_, f_idx) in enumerate(slots):
        fam = families[f_idx]
        choices = _next_choices(fam, rng, spec)
        intent, text = fam.intent, None
        if pos in near_miss:
            old = str(rng.choice([m for m in fam.intent.metrics if m in CONFUSABLE]))
            intent = swap_metric(fam.intent, old, CONFUSABLE[old])
            choices = dict(choices)
            choices["order"] = [CONFUSABLE[old] if m == old else m for m in choices["order"]]
            choices["metric_style"] = {
                (CONFUSABLE[old] if m == old else m): s for m, s in choices["metric_style"].items()
            }
            text = render_prompt(intent, choices)
        else:
            text = render_prompt(intent, choices)
            fam.choices.append(choices)
            fam.texts.add(text)
        prompt = Prompt(text, intent.namespace, pos)
        out.append(LabeledPrompt(prompt, fam.family_id, pos in near_miss, intent))
    return out


def _next_choices(fam: _Family, rng: np.random.Generator, spec: WorkloadSpec) -> dict:
    for _attempt in range(12):
        r = rng.random()
        if fam.choices and r < spec.restyle_rate:
            base = fam.choices[int(rng.integers(len(fam.choices)))]
            choices = _restyle(base, rng)
        elif fam.choices and r < spec.restyle_rate + spec.edit_rate:
            base = fam.choices[int(rng.integers(len(fam.choices)))]
            choices = _edit_one_slot(base, rng)
        else:
            choices = _draw_choices(fam.intent, rng)
        if render_prompt(fam.intent, choices) not in fam.texts:
            return choices
    return choices


def split_temporal(prompts: Sequence[LabeledPrompt], n_seed: int) -> tuple[list[LabeledPrompt], list[LabeledPrompt]]:
    """First ``n_seed`` prompts by arrival index warm the cache; the rest are measured."""
    if not 0 <= n_seed <= len(prompts):
        raise ValidationError(f"n_seed={n_seed} outside [0, {len(prompts)}]")
    ordered = sorted(prompts, key=lambda p: p.prompt.arrival_index)
    return ordered[:n_seed], ordered[n_seed:]


def write_workload(prompts: Iterable[LabeledPrompt], fh: TextIO) -> int:
    fh.write(WORKLOAD_HEADER + "\n")
    count = 0
    for p in prompts:
        record = {
            "arrival_index": p.prompt.arrival_index,
            "namespace": p.prompt.client_namespace,
            "family_id": p.family_id,
            "near_miss": p.is_near_miss,
            "text": p.prompt.text,
            "intent": canonicalize_intent(p.true_intent),
        }
        fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        count += 1
    return count


def read_workload(fh: TextIO) -> list[LabeledPrompt]:
    header = fh.readline().rstrip("\n")
    if header != WORKLOAD_HEADER:
        raise ValidationError(f"unsupported workload header {header!r}")
    out = []
    seen = set()
    for lineno, line in enumerate(fh, start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            prompt = Prompt(rec["text"], rec["namespace"], int(rec["arrival_index"]))
            lp = LabeledPrompt(prompt, rec["family_id"], bool(rec["near_miss"]), parse_canonical(rec["intent"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"workload line {lineno}: {exc}") from exc
        if prompt.arrival_index in seen:
            raise ValidationError(f"workload line {lineno}: duplicate arrival_index {prompt.arrival_index}")
        seen.add(prompt.arrival_index)
        out.append(lp)
    return out
