"""Two-stage intent-resolution / visualization-synthesis pipeline with cache checkpoints.

``PipelineRunner.run_request`` intercepts both stages:

* AIR: the raw prompt is looked up in the AIR bucket; a miss asks the backend
  to resolve an intent and admits the canonical intent text.
* VS: each chart primitive of the resolved intent is looked up under the
  canonical text of the intent restricted to that primitive; a miss asks the
  backend to synthesize that chart and admits its spec.

``PipelineRunner.run_monolithic`` is the prompt -> final-response baseline: one
lookup, and on a miss the backend regenerates the whole response.

Simulated latencies are deterministic functions of the experiment seed and the
request position (retrieval) or the generated input (LLM calls), so identical
seeds yield identical reports. Wall-clock time is kept on the traces only.
"""

from __future__ import annotations

import hashlib
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from sirc.domain import (
    AnalyticIntent,
    Digest,
    Prompt,
    SchemaContext,
    TokenUsage,
    ValidationError,
    VisualizationDirective,
    ZERO_USAGE,
    canonicalize_intent,
    intent_digest,
    parse_canonical,
    sha256_digest,
)
from sirc.embedding import FeatureHashEmbedder
from sirc.lexical import tokenize
from sirc.metrics import RunReport, aggregate
from sirc.retrieval import HybridCache, RetrievalConfig, RetrievalOutcome
from sirc.store import CacheStore, Stage, StoreConfig
from sirc.workload import LabeledPrompt, split_temporal

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """The generator backend could not produce an artifact."""


class GeneratorBackend(Protocol):
    """Extension seam for real LLM agents; every method returns (artifact, usage, latency_ms)."""

    def resolve_intent(self, prompt: Prompt, schema: SchemaContext) -> tuple[AnalyticIntent, TokenUsage, float]: ...

    def synthesize(self, intent: AnalyticIntent) -> tuple[VisualizationDirective, TokenUsage, float]: ...

    def respond_monolithic(self, prompt: Prompt, schema: SchemaContext) -> tuple[str, TokenUsage, float]: ...


@dataclass(frozen=True)
class CostModel:
    """Mean prompt/completion tokens and latency of one generation."""

    prompt_tokens: float
    completion_tokens: float
    latency_ms: float
    cv: float = 0.2

    def draw(self, rng: np.random.Generator) -> tuple[TokenUsage, float]:
        shape = 1.0 / self.cv**2
        p = int(round(rng.gamma(shape, self.prompt_tokens / shape))) if self.prompt_tokens else 0
        c = int(round(rng.gamma(shape, self.completion_tokens / shape))) if self.completion_tokens else 0
        lat = float(rng.gamma(shape, self.latency_ms / shape)) if self.latency_ms else 0.0
        return TokenUsage(p, c), lat


# Per-call means of 6,414.55 (AIR) and 5,524.78 (VS) tokens, split by the
# observed prompt/completion totals over 306 AIR and 818 VS generations.
AIR_COST = CostModel(1_016_795 / 306, 946_058 / 306, latency_ms=6000.0)
VS_COST = CostModel(2_116_448 / 818, 2_402_825 / 818, latency_ms=3500.0)


@dataclass(frozen=True)
class MockLlmSpec:
    seed: int = 0
    air: CostModel = AIR_COST
    vs: CostModel = VS_COST
    version_epoch: int = 0


def _keyed_rng(*parts) -> np.random.Generator:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(h[:16], "big"))


class MockBackend:
    """Deterministic stand-in for the LLM agents.

    Intents come from an explicit ``prompt text -> intent`` table (normally
    the workload's ground truth). Token counts and latencies are drawn from
    RNGs keyed by the input, so identical inputs always cost the same.
    """

    def __init__(self, intents: Mapping[str, AnalyticIntent], spec: MockLlmSpec | None = None):
        self.intents = dict(intents)
        self.spec = spec or MockLlmSpec()
        self.calls = {"resolve_intent": 0, "synthesize": 0, "respond_monolithic": 0}

    @classmethod
    def from_workload(cls, prompts: Iterable[LabeledPrompt], spec: MockLlmSpec | None = None) -> MockBackend:
        return cls({p.prompt.text: p.true_intent for p in prompts}, spec)

    def _resolve(self, prompt: Prompt) -> tuple[AnalyticIntent, TokenUsage, float]:
        try:
            intent = self.intents[prompt.text]
        except KeyError:
            raise BackendError(f"no intent known for prompt {prompt.text!r}") from None
        usage, lat = self.spec.air.draw(_keyed_rng(self.spec.seed, "AIR", prompt.client_namespace, prompt.text))
        return intent, usage, lat

    def _synthesize(self, intent: AnalyticIntent) -> tuple[VisualizationDirective, TokenUsage, float]:
        canonical = canonicalize_intent(intent)
        usage, lat = self.spec.vs.draw(_keyed_rng(self.spec.seed, "VS", canonical))
        spec_text = f"# mock chart spec, epoch {self.spec.version_epoch}\n{canonical}"
        return VisualizationDirective(sha256_digest(canonical), spec_text, usage), usage, lat

    def resolve_intent(self, prompt: Prompt, schema: SchemaContext):
        self.calls["resolve_intent"] += 1
        intent, usage, lat = self._resolve(prompt)
        intent.validate(schema)
        return intent, usage, lat

    def synthesize(self, intent: AnalyticIntent):
        self.calls["synthesize"] += 1
        return self._synthesize(intent)

    def respond_monolithic(self, prompt: Prompt, schema: SchemaContext):
        """Full regeneration: resolve the intent, then synthesize every chart."""
        self.calls["respond_monolithic"] += 1
        intent, usage, lat = self._resolve(prompt)
        parts = [canonicalize_intent(intent)]
        for p in intent.chart_primitives:
            directive, u, l = self._synthesize(intent.restrict_to(p))
            parts.append(directive.chart_spec)
            usage, lat = usage + u, lat + l
        return "\n".join(parts), usage, lat


@dataclass(frozen=True)
class LatencyModel:
    """Lognormal simulated retrieval latencies in milliseconds.

    Defaults put exact hits at median 2.66 ms / mean 2.94 ms and semantic
    lookups at mean 440.39 ms.
    """

    exact_median_ms: float = 2.66
    exact_sigma: float = 0.4474
    semantic_median_ms: float = 414.2256
    semantic_sigma: float = 0.35

    def draw(self, kind: str, rng: np.random.Generator) -> float:
        if kind == "exact":
            return float(rng.lognormal(np.log(self.exact_median_ms), self.exact_sigma))
        return float(rng.lognormal(np.log(self.semantic_median_ms), self.semantic_sigma))

    def expected(self, kind: str) -> float:
        if kind == "exact":
            return self.exact_median_ms * float(np.exp(self.exact_sigma**2 / 2))
        return self.semantic_median_ms * float(np.exp(self.semantic_sigma**2 / 2))


@dataclass(frozen=True)
class PipelineConfig:
    air_retrieval: RetrievalConfig = RetrievalConfig(tau=0.90)
    vs_retrieval: RetrievalConfig = RetrievalConfig(tau=0.95)
    mono_retrieval: RetrievalConfig = RetrievalConfig(tau=0.90)
    vs_render_guard: bool = True
    latency: LatencyModel = LatencyModel()
    store: StoreConfig = StoreConfig()
    embedding_dimension: int = 256
    seed: int = 0

    def with_tau(self, tau: float) -> PipelineConfig:
        """Same config with the prompt-level (AIR and monolithic) threshold set to ``tau``."""
        return replace(
            self,
            air_retrieval=replace(self.air_retrieval, tau=tau),
            mono_retrieval=replace(self.mono_retrieval, tau=tau),
        )

    def params(self) -> dict:
        return {
            "air_tau": self.air_retrieval.tau,
            "vs_tau": self.vs_retrieval.tau,
            "mono_tau": self.mono_retrieval.tau,
            "vs_semantic": int(self.vs_retrieval.semantic_enabled),
            "k_rrf": self.air_retrieval.k_rrf,
            "top_k": self.air_retrieval.top_k,
            "entity_guard": self.air_retrieval.entity_guard,
            "embedding_dimension": self.embedding_dimension,
        }


@dataclass
class StepRecord:
    stage: Stage
    outcome: RetrievalOutcome
    usage: TokenUsage = ZERO_USAGE
    simulated_ms: float = 0.0


@dataclass
class RequestTrace:
    prompt: Prompt
    system: str
    steps: list[StepRecord] = field(default_factory=list)
    intent: AnalyticIntent | None = None
    failed: bool = False
    error: str | None = None
    wall_ms: float = 0.0

    @property
    def simulated_ms(self) -> float:
        return sum(s.simulated_ms for s in self.steps)

    @property
    def air_outcome(self) -> RetrievalOutcome | None:
        return next((s.outcome for s in self.steps if s.stage is Stage.AIR), None)

    @property
    def vs_outcomes(self) -> list[RetrievalOutcome]:
        return [s.outcome for s in self.steps if s.stage is Stage.VS]

    @property
    def intent_digest(self) -> Digest | None:
        return intent_digest(self.intent) if self.intent is not None else None

    @property
    def llm_calls(self) -> int:
        return sum(1 for s in self.steps if s.outcome.kind == "miss")

    def usage(self, stage: Stage | None = None) -> TokenUsage:
        total = ZERO_USAGE
        for s in self.steps:
            if stage is None or s.stage is stage:
                total = total + s.usage
        return total


def render_groups(primitive_intent: AnalyticIntent) -> dict[str, tuple[str, ...]]:
    """Chart type and temporal grain a synthesis candidate must share."""
    prim = primitive_intent.chart_primitives[0]
    return {
        f"chart:{prim.chart_type}": tuple(tokenize(prim.chart_type)),
        f"grain:{primitive_intent.temporal_grain}": ("grain", primitive_intent.temporal_grain),
    }


class PipelineRunner:
    """Runs requests through a :class:`HybridCache` and a generator backend."""

    def __init__(self, backend: GeneratorBackend, config: PipelineConfig | None = None, cache: HybridCache | None = None):
        self.backend = backend
        self.config = config or PipelineConfig()
        self.cache = cache or HybridCache(
            store=CacheStore(self.config.store),
            embedder=FeatureHashEmbedder(dimension=self.config.embedding_dimension, seed=self.config.seed),
            configs={
                Stage.AIR: self.config.air_retrieval,
                Stage.VS: self.config.vs_retrieval,
                Stage.MONOLITHIC: self.config.mono_retrieval,
            },
        )

    def _retrieval_ms(self, outcome: RetrievalOutcome, cfg: RetrievalConfig, *key) -> float:
        rng = _keyed_rng(self.config.seed, "retrieval", *key)
        if outcome.kind == "exact_hit" or not cfg.semantic_enabled:
            return self.config.latency.draw("exact", rng)
        return self.config.latency.draw("semantic", rng)

    def run_request(self, prompt: Prompt, schema: SchemaContext) -> RequestTrace:
        start = time.perf_counter()
        trace = RequestTrace(prompt, "pipeline")
        ns = prompt.client_namespace
        cfg_air, cfg_vs = self.config.air_retrieval, self.config.vs_retrieval
        try:
            out = self.cache.retrieve(Stage.AIR, ns, prompt.text, schema, cfg_air)
            step = StepRecord(Stage.AIR, out, simulated_ms=self._retrieval_ms(out, cfg_air, prompt.arrival_index, "AIR"))
            trace.steps.append(step)
            if out.hit:
                intent = parse_canonical(out.entry.payload.decode("utf-8"))
            else:
                intent, usage, llm_ms = self.backend.resolve_intent(prompt, schema)
                step.usage, step.simulated_ms = usage, step.simulated_ms + llm_ms
                self.cache.admit_after_miss(
                    Stage.AIR, ns, prompt.text, canonicalize_intent(intent).encode("utf-8"),
                    cfg_air, prompt.arrival_index, out,
                )
            trace.intent = intent

            for i, prim in enumerate(intent.chart_primitives):
                sub = intent.restrict_to(prim)
                key = canonicalize_intent(sub)
                extra = render_groups(sub) if self.config.vs_render_guard else None
                vs_out = self.cache.retrieve(Stage.VS, ns, key, schema, cfg_vs, extra_groups=extra)
                vs_step = StepRecord(
                    Stage.VS, vs_out, simulated_ms=self._retrieval_ms(vs_out, cfg_vs, prompt.arrival_index, "VS", i)
                )
                trace.steps.append(vs_step)
                if vs_out.hit:
                    continue
                directive, usage, llm_ms = self.backend.synthesize(sub)
                vs_step.usage, vs_step.simulated_ms = usage, vs_step.simulated_ms + llm_ms
                self.cache.admit_after_miss(
                    Stage.VS, ns, key, directive.chart_spec.encode("utf-8"), cfg_vs, prompt.arrival_index, vs_out
                )
        except BackendError as exc:
            log.warning("request %d failed: %s", prompt.arrival_index, exc)
            trace.failed, trace.error = True, str(exc)
        trace.wall_ms = (time.perf_counter() - start) * 1000.0
        return trace

    def run_monolithic(self, prompt: Prompt, schema: SchemaContext | None = None) -> RequestTrace:
        start = time.perf_counter()
        trace = RequestTrace(prompt, "monolithic")
        ns = prompt.client_namespace
        cfg = self.config.mono_retrieval
        out = self.cache.retrieve(Stage.MONOLITHIC, ns, prompt.text, schema, cfg)
        step = StepRecord(Stage.MONOLITHIC, out, simulated_ms=self._retrieval_ms(out, cfg, prompt.arrival_index, "MONO"))
        trace.steps.append(step)
        if not out.hit:
            try:
                response, usage, llm_ms = self.backend.respond_monolithic(prompt, schema)
            except BackendError as exc:
                log.warning("monolithic request %d failed: %s", prompt.arrival_index, exc)
                trace.failed, trace.error = True, str(exc)
            else:
                step.usage, step.simulated_ms = usage, step.simulated_ms + llm_ms
                self.cache.admit_after_miss(
                    Stage.MONOLITHIC, ns, prompt.text, response.encode("utf-8"), cfg, prompt.arrival_index, out
                )
        trace.wall_ms = (time.perf_counter() - start) * 1000.0
        return trace


def run_request(prompt: Prompt, schema: SchemaContext, config: PipelineConfig, backend: GeneratorBackend,
                cache: HybridCache | None = None) -> RequestTrace:
    return PipelineRunner(backend, config, cache).run_request(prompt, schema)


def run_monolithic(prompt: Prompt, config: PipelineConfig, backend: GeneratorBackend,
                   cache: HybridCache | None = None, schema: SchemaContext | None = None) -> RequestTrace:
    return PipelineRunner(backend, config, cache).run_monolithic(prompt, schema)


@dataclass
class ExperimentResult:
    pipeline: RunReport
    monolithic: RunReport
    pipeline_traces: list[RequestTrace]
    monolithic_traces: list[RequestTrace]
    pipeline_snapshot: str = ""

    def __iter__(self):
        return iter((self.pipeline, self.monolithic))


def run_experiment(
    workload: Sequence[LabeledPrompt],
    config: PipelineConfig,
    backend: GeneratorBackend,
    schemas: Mapping[str, SchemaContext],
    n_seed: int | None = None,
    keep_snapshot: bool = False,
) -> ExperimentResult:
    """Warm both systems on the seed split, then measure them on the challenge split.

    ``n_seed`` defaults to half the workload. With ``keep_snapshot`` the
    pipeline's final store is returned in snapshot format.
    """
    for p in workload:
        if p.prompt.client_namespace not in schemas:
            raise ValidationError(f"workload namespace {p.prompt.client_namespace!r} has no schema")
    if n_seed is None:
        n_seed = len(workload) // 2
    seed_set, challenge = split_temporal(workload, n_seed)
    pipe = PipelineRunner(backend, config)
    mono = PipelineRunner(backend, config)
    for lp in seed_set:
        schema = schemas[lp.prompt.client_namespace]
        pipe.run_request(lp.prompt, schema)
        mono.run_monolithic(lp.prompt, schema)
    pipe_traces, mono_traces = [], []
    for lp in challenge:
        schema = schemas[lp.prompt.client_namespace]
        pipe_traces.append(pipe.run_request(lp.prompt, schema))
        mono_traces.append(mono.run_monolithic(lp.prompt, schema))
    params = config.params()
    snapshot = ""
    if keep_snapshot:
        buf = io.StringIO()
        pipe.cache.store.dump(buf)
        snapshot = buf.getvalue()
    return ExperimentResult(
        aggregate(pipe_traces, "pipeline", config.seed, params),
        aggregate(mono_traces, "monolithic", config.seed, params),
        pipe_traces,
        mono_traces,
        snapshot,
    )


def _run_one(args) -> ExperimentResult:
    workload, config, backend, schemas, n_seed, keep_snapshot = args
    return run_experiment(workload, config, backend, schemas, n_seed, keep_snapshot)


def run_sweep(
    workload: Sequence[LabeledPrompt],
    config: PipelineConfig,
    backend: GeneratorBackend,
    schemas: Mapping[str, SchemaContext],
    taus: Sequence[float],
    n_seed: int | None = None,
    workers: int = 1,
    keep_snapshot: bool = False,
) -> dict[float, ExperimentResult]:
    """One independent experiment per prompt-level threshold.

    Experiments share nothing, so ``workers > 1`` runs them in a process
    pool without changing any result; traces inside one experiment always
    replay in arrival order.
    """
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    jobs = [(list(workload), config.with_tau(t), backend, dict(schemas), n_seed, keep_snapshot) for t in taus]
    if workers == 1 or len(jobs) <= 1:
        results = [_run_one(j) for j in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    return dict(zip(taus, results))
