from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirc.domain import ValidationError
from sirc.embedding import FeatureHashEmbedder, LookupTableEmbedder
from sirc.retrieval import HybridCache, RetrievalConfig, rrf_fuse
from sirc.store import CacheStore, Stage, StoreConfig
from sirc.vector_index import RankedCandidate

from conftest import digest

A, B, C = digest("A"), digest("B"), digest("C")


def ranked(*digests, scores=None):
    scores = scores or [1.0 / (i + 1) for i in range(len(digests))]
    return [RankedCandidate(d, s, i) for i, (d, s) in enumerate(zip(digests, scores), start=1)]


def test_rrf_rank_one_in_both_legs():
    fused = rrf_fuse(ranked(A), ranked(A), 60)
    assert fused[0].score == pytest.approx(2 / 61, abs=1e-15)
    assert round(fused[0].score, 5) == 0.03279


def test_rrf_rank_one_dense_only():
    fused = rrf_fuse(ranked(A), [], 60)
    assert fused[0].score == pytest.approx(1 / 61, abs=1e-15)
    assert fused[0].lexical_rank is None


def test_rrf_three_candidate_ordering():
    fused = rrf_fuse(ranked(A, B), ranked(B, C), 60)
    assert [c.digest for c in fused] == [B, A, C]
    assert [c.score for c in fused] == pytest.approx([1 / 62 + 1 / 61, 1 / 61, 1 / 62], abs=1e-15)
    assert [c.rank for c in fused] == [1, 2, 3]


def test_rrf_rejects_bad_ranks():
    with pytest.raises(ValidationError):
        rrf_fuse([RankedCandidate(A, 1.0, 2)], [], 60)


@given(st.lists(st.floats(0.01, 100), min_size=3, max_size=3, unique=True), st.floats(0.1, 10))
@settings(max_examples=50, deadline=None)
def test_rrf_invariant_under_monotone_rescaling(scores, alpha):
    order = sorted(zip(scores, [A, B, C]), key=lambda t: -t[0])
    dense = ranked(*[d for _, d in order], scores=[s for s, _ in order])
    rescaled = ranked(*[d for _, d in order], scores=[alpha * s**3 for s, _ in order])
    lexical = ranked(C, A)
    assert rrf_fuse(dense, lexical) == rrf_fuse(rescaled, lexical)


def test_config_validation():
    with pytest.raises(ValidationError):
        RetrievalConfig(tau=0.0)
    with pytest.raises(ValidationError):
        RetrievalConfig(tau=1.5)
    with pytest.raises(ValidationError):
        RetrievalConfig(k_rrf=0)
    with pytest.raises(ValidationError):
        RetrievalConfig(top_k=0)
    with pytest.raises(ValidationError):
        RetrievalConfig(entity_guard="ignore")


def lookup_cache(emb, **kwargs) -> HybridCache:
    return HybridCache(embedder=emb, embed_namespace=False, **kwargs)


DDA = "Show DDA Revenue by channel"
GA4 = "Show GA4 Revenue by channel"


def test_dda_vs_ga4_rejected_by_entity_guard(schema):
    emb = LookupTableEmbedder(dimension=64)
    emb.register_pair(GA4, DDA, 0.96, seed=1)
    cache = lookup_cache(emb)
    cache.admit_after_miss(Stage.AIR, "client_a", GA4, b"ga4 intent")
    out = cache.retrieve(Stage.AIR, "client_a", DDA, schema)
    assert out.kind == "miss" and out.entry is None
    assert (digest(GA4), "entity_mismatch(ga4_revenue vs dda_revenue)") in out.rejected_candidates


def test_same_pair_hits_without_schema_guard():
    emb = LookupTableEmbedder(dimension=64)
    emb.register_pair(GA4, DDA, 0.96, seed=1)
    cache = lookup_cache(emb)
    cache.admit_after_miss(Stage.AIR, "client_a", GA4, b"ga4 intent")
    out = cache.retrieve(Stage.AIR, "client_a", DDA, schema=None)
    assert out.kind == "semantic_hit" and out.similarity == pytest.approx(0.96, abs=1e-9)


def test_downrank_only_mode_accepts_mismatch(schema):
    emb = LookupTableEmbedder(dimension=64)
    emb.register_pair(GA4, DDA, 0.96, seed=1)
    cache = lookup_cache(emb, configs={Stage.AIR: RetrievalConfig(tau=0.9, entity_guard="downrank_only")})
    cache.admit_after_miss(Stage.AIR, "client_a", GA4, b"ga4 intent")
    assert cache.retrieve(Stage.AIR, "client_a", DDA, schema).kind == "semantic_hit"


def test_downranking_prefers_entity_complete_candidate(schema):
    emb = LookupTableEmbedder(dimension=64)
    emb.register_pair(GA4, DDA, 0.97, seed=1)
    emb.register_near(DDA, "DDA revenue split by channel", 0.92, seed=2)
    cache = lookup_cache(emb, configs={Stage.AIR: RetrievalConfig(tau=0.9, entity_guard="downrank_only")})
    cache.admit_after_miss(Stage.AIR, "client_a", GA4, b"ga4")
    cache.admit_after_miss(Stage.AIR, "client_a", "DDA revenue split by channel", b"dda")
    out = cache.retrieve(Stage.AIR, "client_a", DDA, schema)
    assert out.entry.payload == b"dda"


def test_paraphrase_at_093_is_semantic_hit(schema):
    emb = LookupTableEmbedder(dimension=64)
    emb.register_pair("Show spend by channel", "Display spend per channel", 0.93, seed=3)
    cache = lookup_cache(emb)
    cache.admit_after_miss(Stage.AIR, "client_a", "Show spend by channel", b"spend intent")
    out = cache.retrieve(Stage.AIR, "client_a", "Display spend per channel", schema)
    assert out.kind == "semantic_hit"
    assert out.similarity == pytest.approx(0.93, abs=1e-9)
    assert out.entry.payload == b"spend intent"
    assert out.entry.hit_count == 1


def test_below_tau_is_miss_even_with_full_lexical_overlap(schema):
    emb = LookupTableEmbedder(dimension=64)
    emb.register_pair("spend by channel", "channel by spend", 0.80, seed=4)
    cache = lookup_cache(emb)
    cache.admit_after_miss(Stage.AIR, "client_a", "spend by channel", b"x")
    out = cache.retrieve(Stage.AIR, "client_a", "channel by spend", schema)
    assert out.kind == "miss"
    assert out.rejected_candidates[0][1].startswith("below_threshold(0.8000")


class _Exploding(FeatureHashEmbedder):
    armed = False

    def embed(self, text):
        if self.armed:
            raise AssertionError("dense leg must not run on an exact hit")
        return super().embed(text)


def test_exact_hit_short_circuits_semantic_legs(schema):
    emb = _Exploding()
    cache = HybridCache(embedder=emb)
    cache.admit_after_miss(Stage.AIR, "client_a", "spend by channel", b"x")
    emb.armed = True
    out = cache.retrieve(Stage.AIR, "client_a", "spend by channel", schema, RetrievalConfig(tau=1.0))
    assert out.kind == "exact_hit" and out.similarity is None


def test_miss_admit_round_trip_and_never_policy():
    cache = HybridCache()
    assert cache.retrieve(Stage.AIR, "client_a", "spend by channel").kind == "miss"
    cache.admit_after_miss(Stage.AIR, "client_a", "spend by channel", b"x")
    assert cache.retrieve(Stage.AIR, "client_a", "spend by channel").kind == "exact_hit"
    never = HybridCache(store=CacheStore(StoreConfig(admission_policy="never")))
    assert never.admit_after_miss(Stage.AIR, "client_a", "spend by channel", b"x").status == "rejected_policy"
    assert never.retrieve(Stage.AIR, "client_a", "spend by channel").kind == "miss"


def test_semantic_disabled_stage_is_exact_only():
    cache = HybridCache(configs={Stage.VS: RetrievalConfig(tau=0.95, semantic_enabled=False)})
    cache.admit_after_miss(Stage.VS, "client_a", "kpi_card spend", b"x")
    assert cache.store.get(Stage.VS, "client_a", digest("kpi_card spend")).embedding is None
    assert cache.retrieve(Stage.VS, "client_a", "kpi_card  spend").kind == "miss"


def test_bump_epoch_drops_semantic_candidates():
    cache = HybridCache()
    cache.admit_after_miss(Stage.AIR, "client_a", "spend by channel", b"x")
    assert cache.retrieve(Stage.AIR, "client_a", "spend by channel please").kind == "semantic_hit"
    cache.bump_epoch("client_a")
    out = cache.retrieve(Stage.AIR, "client_a", "spend by channel please")
    assert out.kind == "miss"


def test_rebuild_indices_from_snapshot_store():
    cache = HybridCache()
    cache.admit_after_miss(Stage.AIR, "client_a", "spend by channel", b"x")
    again = HybridCache(store=cache.store)
    assert again.retrieve(Stage.AIR, "client_a", "spend by channel please").kind == "semantic_hit"


def test_eviction_removes_from_indices():
    cache = HybridCache(store=CacheStore(StoreConfig(capacity=1)))
    cache.admit_after_miss(Stage.AIR, "client_a", "spend by channel", b"x")
    cache.admit_after_miss(Stage.AIR, "client_a", "clicks by device", b"y")
    out = cache.retrieve(Stage.AIR, "client_a", "spend by channel please")
    assert out.kind == "miss"
    assert digest("spend by channel") not in {d for d, _ in out.rejected_candidates}


WORDS = ["spend", "clicks", "sales", "channel", "device", "campaign", "weekly", "daily", "show", "trend"]
PHRASE = st.lists(st.sampled_from(WORDS), min_size=2, max_size=6).map(" ".join)


@given(st.lists(PHRASE, min_size=1, max_size=8, unique=True), st.lists(PHRASE, min_size=1, max_size=8))
@settings(max_examples=40, deadline=None)
def test_threshold_monotone_and_entity_safe(cached, queries):
    from sirc.domain import SchemaContext

    schema = SchemaContext({"spend", "clicks", "sales"}, {"channel", "device", "campaign"}, "client_a")
    hits = {}
    for tau in (0.85, 0.90):
        cache = HybridCache(configs={Stage.AIR: RetrievalConfig(tau=tau)})
        for text in cached:
            cache.admit_after_miss(Stage.AIR, "client_a", text, text.encode())
        hits[tau] = set()
        for i, q in enumerate(queries):
            out = cache.retrieve(Stage.AIR, "client_a", q, schema)
            if out.kind == "semantic_hit":
                hits[tau].add(i)
                assert out.similarity >= tau
                for tok in ("spend", "clicks", "sales", "channel", "device", "campaign"):
                    if tok in q.split():
                        assert tok in out.entry.lexical_tokens
    assert hits[0.90] <= hits[0.85]
