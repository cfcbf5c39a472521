"""Pipeline-aware semantic caching for two-stage analytics agents.

A prompt is first resolved into a canonical analytic intent (AIR), and each
chart primitive of that intent is then synthesized (VS). Both checkpoints
are cached behind an exact SHA-256 tier and a hybrid HNSW + BM25 tier fused
with reciprocal rank fusion and gated by schema-entity checks. A monolithic
prompt -> response cache serves as the baseline.
"""

from sirc.domain import (
    AnalyticIntent,
    ChartPrimitive,
    Digest,
    Filter,
    Prompt,
    SchemaContext,
    TokenUsage,
    ValidationError,
    VisualizationDirective,
    canonicalize_intent,
    intent_digest,
    parse_canonical,
    sha256_digest,
)
from sirc.embedding import (
    EmbedderSpec,
    FeatureHashEmbedder,
    LookupTableEmbedder,
    MissingVectorError,
    cosine,
    embed,
)
from sirc.lexical import Bm25Index, TokenizerSpec, bm25_search, entity_tokens, tokenize
from sirc.metrics import (
    AccountingError,
    ProjectionInputs,
    RunReport,
    StageStats,
    aggregate,
    check_accounting,
    latency_percentiles,
    project_cost,
    project_tokens,
)
from sirc.pipeline import (
    MockBackend,
    MockLlmSpec,
    PipelineConfig,
    PipelineRunner,
    run_experiment,
    run_monolithic,
    run_request,
    run_sweep,
)
from sirc.retrieval import HybridCache, RetrievalConfig, RetrievalOutcome, rrf_fuse
from sirc.store import AdmissionPolicy, CacheEntry, CacheStore, Stage, StoreConfig
from sirc.vector_index import HnswIndex, RankedCandidate, brute_force_search
from sirc.workload import LabeledPrompt, WorkloadSpec, generate, split_temporal

__version__ = "0.1.0"

__all__ = [
    "AccountingError", "AdmissionPolicy", "AnalyticIntent", "Bm25Index", "CacheEntry", "CacheStore",
    "ChartPrimitive", "Digest", "EmbedderSpec", "FeatureHashEmbedder", "Filter", "HnswIndex", "HybridCache",
    "LabeledPrompt", "LookupTableEmbedder", "MissingVectorError", "MockBackend", "MockLlmSpec",
    "PipelineConfig", "PipelineRunner", "ProjectionInputs", "Prompt", "RankedCandidate", "RetrievalConfig",
    "RetrievalOutcome", "RunReport", "SchemaContext", "Stage", "StageStats", "StoreConfig", "TokenUsage",
    "TokenizerSpec", "ValidationError", "VisualizationDirective", "WorkloadSpec", "aggregate", "bm25_search",
    "brute_force_search", "canonicalize_intent", "check_accounting", "cosine", "embed", "entity_tokens",
    "generate", "intent_digest", "latency_percentiles", "parse_canonical", "project_cost", "project_tokens",
    "rrf_fuse", "run_experiment", "run_monolithic", "run_request", "run_sweep", "sha256_digest",
    "split_temporal", "tokenize",
]
