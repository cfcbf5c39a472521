"""Hybrid cache retrieval: exact hash, dense + BM25 legs, RRF fusion, gated acceptance.

Lookup order for one query:

1. SHA-256 of the key text against the exact tier; a hit short-circuits.
2. When the stage has semantic matching enabled, the HNSW and BM25 legs each
   return ``top_k`` candidates, which are fused over their union with
   ``1/(k_rrf + dense_rank) + 1/(k_rrf + lexical_rank)`` (a missing rank adds 0).
3. Candidates missing a mandatory entity group are moved behind the ones that
   carry them all. The fused list is then walked and the first candidate whose
   raw cosine clears ``tau`` (and, in ``hard_reject`` mode, carries every
   mandatory group) is accepted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import clone

from sirc._validation import check_unit_interval
from sirc.domain import Digest, SchemaContext, ValidationError, sha256_digest
from sirc.embedding import FeatureHashEmbedder, cosine
from sirc.lexical import (
    DEFAULT_TOKENIZER,
    Bm25Index,
    TokenizerSpec,
    mandatory_groups,
    missing_groups,
    tokenize,
)
from sirc.store import AdmitResult, CacheEntry, CacheStore, Stage
from sirc.vector_index import HnswIndex, RankedCandidate

ENTITY_GUARDS = ("hard_reject", "downrank_only")


@dataclass(frozen=True)
class RetrievalConfig:
    tau: float = 0.90
    k_rrf: int = 60
    top_k: int = 10
    entity_guard: str = "hard_reject"
    semantic_enabled: bool = True

    def __post_init__(self) -> None:
        check_unit_interval(self.tau, "tau", open_low=True)
        if self.k_rrf < 1:
            raise ValidationError("k_rrf must be >= 1")
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")
        if self.entity_guard not in ENTITY_GUARDS:
            raise ValidationError(f"entity_guard must be one of {ENTITY_GUARDS}")


DEFAULT_CONFIGS = {
    Stage.AIR: RetrievalConfig(tau=0.90),
    Stage.VS: RetrievalConfig(tau=0.95),
    Stage.MONOLITHIC: RetrievalConfig(tau=0.90),
}


@dataclass(frozen=True)
class FusedCandidate:
    digest: Digest
    score: float
    rank: int
    dense_rank: int | None = None
    lexical_rank: int | None = None


@dataclass
class RetrievalOutcome:
    kind: str  # "exact_hit", "semantic_hit" or "miss"
    digest: Digest
    entry: CacheEntry | None = None
    similarity: float | None = None
    fused_score: float | None = None
    rejected_candidates: list[tuple[Digest, str]] = field(default_factory=list)
    latency_ms: float = 0.0
    query_vector: np.ndarray | None = field(default=None, repr=False)
    query_tokens: tuple[str, ...] = ()

    @property
    def hit(self) -> bool:
        return self.kind != "miss"


def rrf_fuse(
    dense: Sequence[RankedCandidate], lexical: Sequence[RankedCandidate], k_rrf: int = 60
) -> list[FusedCandidate]:
    """Reciprocal rank fusion over the union of both legs.

    >>> from sirc.domain import sha256_digest
    >>> a = sha256_digest("a")
    >>> fused = rrf_fuse([RankedCandidate(a, 0.9, 1)], [RankedCandidate(a, 3.0, 1)])
    >>> round(fused[0].score, 5)
    0.03279
    """
    dense_rank = {c.digest: c.rank for c in dense}
    lex_rank = {c.digest: c.rank for c in lexical}
    for ranks in (dense_rank, lex_rank):
        if sorted(ranks.values()) != list(range(1, len(ranks) + 1)):
            raise ValidationError("leg ranks must be unique and consecutive from 1")
    scored = []
    for d in set(dense_rank) | set(lex_rank):
        rd, rl = dense_rank.get(d), lex_rank.get(d)
        score = (1.0 / (k_rrf + rd) if rd else 0.0) + (1.0 / (k_rrf + rl) if rl else 0.0)
        scored.append((d, score, rd, rl))
    scored.sort(key=lambda t: (-t[1], t[0].hex))
    return [FusedCandidate(d, s, i, rd, rl) for i, (d, s, rd, rl) in enumerate(scored, start=1)]


@dataclass
class _StageIndex:
    dense: HnswIndex
    lexical: Bm25Index


class HybridCache:
    """Cache engine owning the store, the embedder and per-bucket indices.

    Parameters
    ----------
    store : CacheStore, optional
    embedder : estimator with ``embed(text)``, optional
        Defaults to a 256-d :class:`FeatureHashEmbedder`.
    configs : mapping of Stage to RetrievalConfig, optional
    index_template : HnswIndex, optional
        Cloned (unfitted) for every ``(stage, namespace)`` bucket.
    embed_namespace : bool
        Suffix the namespace to prompt text before embedding.
    """

    def __init__(
        self,
        store: CacheStore | None = None,
        embedder=None,
        configs: Mapping[Stage, RetrievalConfig] | None = None,
        index_template: HnswIndex | None = None,
        bm25_template: Bm25Index | None = None,
        tokenizer: TokenizerSpec = DEFAULT_TOKENIZER,
        embed_namespace: bool = True,
    ):
        self.store = store or CacheStore()
        self.embedder = embedder if embedder is not None else FeatureHashEmbedder()
        self.configs = {**DEFAULT_CONFIGS, **{Stage(s): c for s, c in (configs or {}).items()}}
        self.index_template = index_template if index_template is not None else HnswIndex()
        self.bm25_template = bm25_template if bm25_template is not None else Bm25Index()
        self.tokenizer = tokenizer
        self.embed_namespace = embed_namespace
        self._indices: dict[tuple[Stage, str], _StageIndex] = {}
        self.rebuild_indices()

    def config(self, stage: Stage, override: RetrievalConfig | None = None) -> RetrievalConfig:
        return override or self.configs[Stage(stage)]

    def _index(self, stage: Stage, namespace: str) -> _StageIndex:
        key = (Stage(stage), namespace)
        if key not in self._indices:
            self._indices[key] = _StageIndex(clone(self.index_template), clone(self.bm25_template))
        return self._indices[key]

    def rebuild_indices(self) -> None:
        """Re-derive dense and lexical indices from the live store entries."""
        self._indices = {}
        for e in self.store.entries():
            if e.embedding is not None:
                idx = self._index(e.stage, e.namespace)
                idx.dense.insert(e.digest, e.embedding)
                idx.lexical.add(e.digest, e.lexical_tokens)

    def embedding_text(self, stage: Stage, namespace: str, text: str) -> str:
        if self.embed_namespace and Stage(stage) is not Stage.VS:
            return f"{text} {namespace}"
        return text

    def retrieve(
        self,
        stage: Stage,
        namespace: str,
        query_text: str,
        schema: SchemaContext | None = None,
        config: RetrievalConfig | None = None,
        extra_groups: Mapping[str, tuple[str, ...]] | None = None,
    ) -> RetrievalOutcome:
        """Look ``query_text`` up in the ``(stage, namespace)`` bucket."""
        stage = Stage(stage)
        cfg = self.config(stage, config)
        start = time.perf_counter()
        digest = sha256_digest(query_text)
        entry = self.store.exact_lookup(stage, namespace, digest)
        if entry is not None:
            return RetrievalOutcome("exact_hit", digest, entry, latency_ms=_elapsed(start))
        if not cfg.semantic_enabled:
            return RetrievalOutcome("miss", digest, latency_ms=_elapsed(start))

        tokens = tuple(tokenize(query_text, self.tokenizer))
        qv = self.embedder.embed(self.embedding_text(stage, namespace, query_text))
        outcome = RetrievalOutcome("miss", digest, query_vector=qv, query_tokens=tokens)
        idx = self._indices.get((stage, namespace))
        if idx is None or len(idx.dense) == 0:
            outcome.latency_ms = _elapsed(start)
            return outcome

        dense = idx.dense.search(qv, cfg.top_k)
        lexical = idx.lexical.search(tokens, cfg.top_k)
        fused = rrf_fuse(dense, lexical, cfg.k_rrf)

        groups = mandatory_groups(tokens, schema, self.tokenizer) if schema is not None else {}
        groups.update(extra_groups or {})
        walk = []
        for cand in fused:
            cand_entry = self.store.get(stage, namespace, cand.digest)
            missing = missing_groups(cand_entry.lexical_tokens, groups) if cand_entry is not None else []
            walk.append((bool(missing), cand, cand_entry, missing))
        walk.sort(key=lambda item: item[0])  # stable: down-rank, keep fused order within

        for _, cand, cand_entry, missing in walk:
            if cand_entry is None:
                outcome.rejected_candidates.append((cand.digest, "stale"))
                continue
            if cand_entry.embedding is None:
                outcome.rejected_candidates.append((cand.digest, "no_embedding"))
                continue
            sim = cosine(qv, cand_entry.embedding)
            if sim < cfg.tau:
                outcome.rejected_candidates.append((cand.digest, f"below_threshold({sim:.4f})"))
                continue
            if missing and cfg.entity_guard == "hard_reject":
                extra = _extra_groups(cand_entry.lexical_tokens, groups, schema, self.tokenizer)
                reason = f"entity_mismatch({','.join(extra) or '-'} vs {','.join(missing)})"
                outcome.rejected_candidates.append((cand.digest, reason))
                continue
            self.store.touch(stage, namespace, cand.digest)
            outcome.kind = "semantic_hit"
            outcome.entry = cand_entry
            outcome.similarity = sim
            outcome.fused_score = cand.score
            break
        outcome.latency_ms = _elapsed(start)
        return outcome

    def admit_after_miss(
        self,
        stage: Stage,
        namespace: str,
        query_text: str,
        payload: bytes,
        config: RetrievalConfig | None = None,
        arrival_index: int = 0,
        outcome: RetrievalOutcome | None = None,
    ) -> AdmitResult:
        """Store a freshly generated artifact under ``query_text``."""
        stage = Stage(stage)
        cfg = self.config(stage, config)
        if outcome is not None and outcome.query_tokens:
            tokens = outcome.query_tokens
        else:
            tokens = tuple(tokenize(query_text, self.tokenizer))
        vector = None
        if cfg.semantic_enabled:
            if outcome is not None and outcome.query_vector is not None:
                vector = outcome.query_vector
            else:
                vector = self.embedder.embed(self.embedding_text(stage, namespace, query_text))
        entry = CacheEntry(
            digest=sha256_digest(query_text),
            stage=stage,
            payload=payload,
            namespace=namespace,
            embedding=vector,
            lexical_tokens=tokens or (query_text.strip().lower(),),
            admitted_at=arrival_index,
        )
        result = self.store.admit(stage, namespace, entry)
        if result.status == "admitted" and vector is not None:
            idx = self._index(stage, namespace)
            idx.dense.insert(entry.digest, vector)
            idx.lexical.add(entry.digest, entry.lexical_tokens)
        if result.evicted is not None:
            idx = self._indices.get((stage, namespace))
            if idx is not None:
                idx.dense.remove(result.evicted)
                idx.lexical.remove(result.evicted)
        return result

    def bump_epoch(self, namespace: str) -> int:
        epoch = self.store.bump_epoch(namespace)
        for key in [k for k in self._indices if k[1] == namespace]:
            del self._indices[key]
        return epoch


def _elapsed(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def _extra_groups(candidate_tokens, groups, schema, tokenizer) -> list[str]:
    if schema is None:
        return []
    return sorted(set(mandatory_groups(candidate_tokens, schema, tokenizer)) - set(groups))


def with_tau(config: RetrievalConfig, tau: float) -> RetrievalConfig:
    return replace(config, tau=tau)
