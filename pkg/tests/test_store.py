from __future__ import annotations

import io
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirc.domain import ValidationError
from sirc.store import AdmissionPolicy, CacheEntry, CacheStore, Stage, StoreConfig

from conftest import digest


def vs_entry(name: str, ns: str = "client_a", embedding=None) -> CacheEntry:
    return CacheEntry(digest(name), Stage.VS, name.encode(), namespace=ns, embedding=embedding)


def air_entry(name: str, ns: str = "client_a") -> CacheEntry:
    return CacheEntry(digest(name), Stage.AIR, name.encode(), namespace=ns, lexical_tokens=tuple(name.split()))


def test_lookup_on_empty_store_misses():
    store = CacheStore()
    assert store.exact_lookup(Stage.VS, "client_a", digest("x")) is None
    assert store.stats.lookups == 1 and store.stats.hits == 0


def test_admit_then_lookup_round_trip():
    store = CacheStore()
    e = vs_entry("a")
    assert store.admit(Stage.VS, "client_a", e).status == "admitted"
    got = store.exact_lookup(Stage.VS, "client_a", e.digest)
    assert got is e and got.hit_count == 1
    assert len(store.stats.latencies_ms) == 1


def test_lookup_is_scoped_by_stage_and_namespace():
    store = CacheStore()
    e = vs_entry("a")
    store.admit(Stage.VS, "client_a", e)
    assert store.exact_lookup(Stage.AIR, "client_a", e.digest) is None
    assert store.exact_lookup(Stage.VS, "client_b", e.digest) is None


def test_bump_epoch_invalidates():
    store = CacheStore()
    e = vs_entry("a")
    store.admit(Stage.VS, "client_a", e)
    store.bump_epoch("client_a")
    assert store.exact_lookup(Stage.VS, "client_a", e.digest) is None


def test_capacity_one_evicts_previous():
    store = CacheStore(StoreConfig(capacity=1))
    a, b = vs_entry("a"), vs_entry("b")
    store.admit(Stage.VS, "client_a", a)
    result = store.admit(Stage.VS, "client_a", b)
    assert result.status == "admitted" and result.evicted == a.digest
    assert store.exact_lookup(Stage.VS, "client_a", b.digest) is b
    assert store.exact_lookup(Stage.VS, "client_a", a.digest) is None


def test_policy_never_rejects():
    store = CacheStore(StoreConfig(admission_policy="never"))
    e = vs_entry("a")
    assert store.admit(Stage.VS, "client_a", e).status == "rejected_policy"
    assert store.exact_lookup(Stage.VS, "client_a", e.digest) is None


def test_duplicate_admit_is_idempotent():
    store = CacheStore()
    store.admit(Stage.VS, "client_a", vs_entry("a"))
    size = store.size(Stage.VS, "client_a")
    result = store.admit(Stage.VS, "client_a", vs_entry("a"))
    assert result.status == "duplicate" and result.admitted
    assert store.size(Stage.VS, "client_a") == size == 1


def test_bump_on_empty_store():
    store = CacheStore()
    assert store.epoch("client_a") == 0
    assert store.bump_epoch("client_a") == 1


def test_ten_entries_all_miss_after_bump():
    store = CacheStore()
    entries = [vs_entry(f"e{i}") for i in range(10)]
    for e in entries:
        store.admit(Stage.VS, "client_a", e)
    store.bump_epoch("client_a")
    assert [store.exact_lookup(Stage.VS, "client_a", e.digest) for e in entries] == [None] * 10


def test_other_namespace_survives_bump():
    store = CacheStore()
    a, b = vs_entry("a", "client_a"), vs_entry("b", "client_b")
    store.admit(Stage.VS, "client_a", a)
    store.admit(Stage.VS, "client_b", b)
    store.bump_epoch("client_a")
    assert store.exact_lookup(Stage.VS, "client_b", b.digest) is b
    assert store.exact_lookup(Stage.VS, "client_a", a.digest) is None


def test_readmission_after_bump_uses_new_epoch():
    store = CacheStore()
    store.admit(Stage.VS, "client_a", vs_entry("a"))
    store.bump_epoch("client_a")
    e = vs_entry("a")
    assert store.admit(Stage.VS, "client_a", e).status == "admitted"
    assert e.version_epoch == 1
    assert store.exact_lookup(Stage.VS, "client_a", e.digest) is e


def test_probation_admits_on_second_miss():
    store = CacheStore(StoreConfig(admission_policy=AdmissionPolicy.PROBATION))
    assert store.admit(Stage.VS, "client_a", vs_entry("a")).status == "rejected_policy"
    assert store.exact_lookup(Stage.VS, "client_a", digest("a")) is None
    assert store.admit(Stage.VS, "client_a", vs_entry("a")).status == "admitted"
    assert store.exact_lookup(Stage.VS, "client_a", digest("a")) is not None


def test_eviction_is_least_recently_hit():
    store = CacheStore(StoreConfig(capacity=2))
    a, b, c = vs_entry("a"), vs_entry("b"), vs_entry("c")
    store.admit(Stage.VS, "client_a", a)
    store.admit(Stage.VS, "client_a", b)
    store.exact_lookup(Stage.VS, "client_a", a.digest)
    assert store.admit(Stage.VS, "client_a", c).evicted == b.digest


def test_eviction_prefers_stale_entries():
    store = CacheStore(StoreConfig(capacity=2))
    store.admit(Stage.VS, "client_a", vs_entry("old"))
    store.bump_epoch("client_a")
    store.admit(Stage.VS, "client_a", vs_entry("a"))
    result = store.admit(Stage.VS, "client_a", vs_entry("b"))
    assert result.evicted == digest("old")
    assert store.size(Stage.VS, "client_a", live_only=True) == 2


def test_compact_removes_stale_entries():
    store = CacheStore()
    for i in range(3):
        store.admit(Stage.VS, "client_a", vs_entry(f"a{i}"))
    store.admit(Stage.VS, "client_b", vs_entry("b", "client_b"))
    store.bump_epoch("client_a")
    assert store.size(Stage.VS, "client_a") == 3
    assert store.compact() == 3
    assert store.size(Stage.VS, "client_a") == 0
    assert store.size(Stage.VS, "client_b") == 1


def test_get_does_not_count_hits():
    store = CacheStore()
    e = vs_entry("a")
    store.admit(Stage.VS, "client_a", e)
    assert store.get(Stage.VS, "client_a", e.digest) is e
    assert e.hit_count == 0
    store.touch(Stage.VS, "client_a", e.digest)
    assert e.hit_count == 1


def test_entry_invariants():
    with pytest.raises(ValidationError, match="lexical tokens"):
        CacheEntry(digest("a"), Stage.AIR, b"x")
    with pytest.raises(ValidationError, match="non-negative"):
        CacheEntry(digest("a"), Stage.VS, b"x", version_epoch=-1)
    with pytest.raises(ValidationError, match="capacity"):
        StoreConfig(capacity=0)
    store = CacheStore()
    with pytest.raises(ValidationError, match="stage"):
        store.admit(Stage.AIR, "client_a", vs_entry("a"))
    with pytest.raises(ValidationError, match="namespace"):
        store.admit(Stage.VS, "client_b", vs_entry("a"))


def test_snapshot_round_trip():
    store = CacheStore()
    vec = np.linspace(-1.0, 1.0, 16)
    store.admit(Stage.AIR, "client_a", air_entry("show spend by channel"))
    store.admit(Stage.VS, "client_a", vs_entry("v", embedding=vec))
    store.admit(Stage.MONOLITHIC, "client_b", CacheEntry(digest("m"), Stage.MONOLITHIC, b"\x00\xff", "client_b"))
    store.bump_epoch("client_b")
    store.admit(Stage.MONOLITHIC, "client_b", CacheEntry(digest("n"), Stage.MONOLITHIC, b"n", "client_b"))
    buf = io.StringIO()
    assert store.dump(buf) == 3
    text = buf.getvalue()
    assert text.splitlines()[0] == "sirc-snapshot v1"
    loaded = CacheStore.load(io.StringIO(text))
    assert loaded.epoch("client_b") == 1
    got = loaded.exact_lookup(Stage.VS, "client_a", digest("v"))
    np.testing.assert_array_equal(got.embedding, vec)
    air = loaded.exact_lookup(Stage.AIR, "client_a", digest("show spend by channel"))
    assert air.lexical_tokens == ("show", "spend", "by", "channel")
    assert loaded.exact_lookup(Stage.MONOLITHIC, "client_b", digest("m")) is None
    assert loaded.exact_lookup(Stage.MONOLITHIC, "client_b", digest("n")).payload == b"n"


def test_snapshot_rejects_bad_header_and_lines():
    with pytest.raises(ValidationError, match="header"):
        CacheStore.load(io.StringIO("sirc-snapshot v2\n"))
    with pytest.raises(ValidationError, match="line 2"):
        CacheStore.load(io.StringIO("sirc-snapshot v1\nVS\tns\n"))


def test_concurrent_admits_and_lookups():
    store = CacheStore(StoreConfig(capacity=50))
    errors = []

    def writer(k):
        for i in range(200):
            store.admit(Stage.VS, "client_a", vs_entry(f"{k}-{i}"))

    def reader():
        for i in range(200):
            e = store.exact_lookup(Stage.VS, "client_a", digest(f"0-{i}"))
            if e is not None and e.payload != f"0-{i}".encode():
                errors.append(e)

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(3)] + [threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert store.size(Stage.VS, "client_a") <= 50


OPS = st.lists(
    st.one_of(
        st.tuples(st.just("admit"), st.integers(0, 15), st.sampled_from(["client_a", "client_b"])),
        st.tuples(st.just("lookup"), st.integers(0, 15), st.sampled_from(["client_a", "client_b"])),
        st.tuples(st.just("bump"), st.just(0), st.sampled_from(["client_a", "client_b"])),
        st.tuples(st.just("compact"), st.just(0), st.just("client_a")),
    ),
    max_size=60,
)


@given(st.integers(1, 5), OPS)
@settings(max_examples=150, deadline=None)
def test_capacity_bound_and_idempotence(capacity, ops):
    store = CacheStore(StoreConfig(capacity=capacity))
    for op, i, ns in ops:
        if op == "admit":
            store.admit(Stage.VS, ns, vs_entry(f"k{i}", ns))
        elif op == "lookup":
            first = store.get(Stage.VS, ns, digest(f"k{i}"))
            second = store.exact_lookup(Stage.VS, ns, digest(f"k{i}"))
            assert first is second
        elif op == "bump":
            store.bump_epoch(ns)
        else:
            store.compact()
        for n in ("client_a", "client_b"):
            assert store.size(Stage.VS, n) <= capacity
            live = [e.digest for e in store.entries(Stage.VS, n)]
            assert len(live) == len(set(live))
