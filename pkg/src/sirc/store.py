"""Tier-0 exact-match store and the entry store shared by every tier.

Entries are bucketed by ``(stage, namespace)``. Each namespace carries a
version epoch; bumping it makes every older entry in the namespace
unretrievable, and stale entries are purged lazily. Buckets are bounded and
evict the least-recently-hit entry.

Snapshot format (v1), one tab-separated record per line after the header::

    sirc-snapshot v1
    <stage> <namespace> <hex digest> <epoch> <b64 payload> <tok,tok,...> [<b64 embedding>]
"""

from __future__ import annotations

import base64
import enum
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, TextIO

import numpy as np

from sirc.domain import Digest, ValidationError
from sirc.embedding import decode_vector, encode_vector

SNAPSHOT_HEADER = "sirc-snapshot v1"


class Stage(str, enum.Enum):
    AIR = "AIR"
    VS = "VS"
    MONOLITHIC = "MONOLITHIC"


class AdmissionPolicy(str, enum.Enum):
    ALWAYS = "always"
    NEVER = "never"
    PROBATION = "probation"


@dataclass
class CacheEntry:
    digest: Digest
    stage: Stage
    payload: bytes
    namespace: str = "default"
    embedding: np.ndarray | None = None
    lexical_tokens: tuple[str, ...] = ()
    version_epoch: int = 0
    admitted_at: int = 0
    hit_count: int = 0

    def __post_init__(self) -> None:
        self.stage = Stage(self.stage)
        self.lexical_tokens = tuple(self.lexical_tokens)
        if self.stage is Stage.AIR and not self.lexical_tokens:
            raise ValidationError("AIR entries need lexical tokens")
        if self.version_epoch < 0:
            raise ValidationError("version_epoch must be non-negative")


@dataclass(frozen=True)
class StoreConfig:
    capacity: int = 10_000
    admission_policy: AdmissionPolicy = AdmissionPolicy.ALWAYS
    current_epoch: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValidationError("capacity must be >= 1")
        object.__setattr__(self, "admission_policy", AdmissionPolicy(self.admission_policy))


@dataclass(frozen=True)
class AdmitResult:
    status: str  # "admitted", "duplicate" or "rejected_policy"
    evicted: Digest | None = None

    @property
    def admitted(self) -> bool:
        return self.status in ("admitted", "duplicate")


@dataclass
class LookupStats:
    lookups: int = 0
    hits: int = 0
    latencies_ms: list[float] = field(default_factory=list)


class CacheStore:
    """Bounded, epoch-versioned entry store.

    All mutation, including the LRU touch on a hit, runs under one lock, so
    readers never observe a half-admitted entry.
    """

    def __init__(self, config: StoreConfig | None = None):
        self.config = config or StoreConfig()
        self._buckets: dict[tuple[Stage, str], OrderedDict[Digest, CacheEntry]] = {}
        self._epochs: dict[str, int] = {}
        self._probation: dict[tuple[Stage, str], set[Digest]] = {}
        self._lock = threading.RLock()
        self.stats = LookupStats()

    def epoch(self, namespace: str) -> int:
        return self._epochs.get(namespace, self.config.current_epoch)

    def _bucket(self, stage: Stage, namespace: str) -> OrderedDict[Digest, CacheEntry]:
        return self._buckets.setdefault((Stage(stage), namespace), OrderedDict())

    def _live(self, entry: CacheEntry) -> bool:
        return entry.version_epoch == self.epoch(entry.namespace)

    def get(self, stage: Stage, namespace: str, digest: Digest) -> CacheEntry | None:
        """Peek at a live entry without counting a hit or touching LRU order."""
        with self._lock:
            entry = self._buckets.get((Stage(stage), namespace), {}).get(digest)
            return entry if entry is not None and self._live(entry) else None

    def exact_lookup(self, stage: Stage, namespace: str, digest: Digest) -> CacheEntry | None:
        start = time.perf_counter()
        with self._lock:
            bucket = self._bucket(stage, namespace)
            entry = bucket.get(digest)
            if entry is not None and not self._live(entry):
                del bucket[digest]
                entry = None
            if entry is not None:
                entry.hit_count += 1
                bucket.move_to_end(digest)
            self.stats.lookups += 1
            self.stats.hits += entry is not None
            self.stats.latencies_ms.append((time.perf_counter() - start) * 1000.0)
        return entry

    def touch(self, stage: Stage, namespace: str, digest: Digest) -> None:
        """Count a semantic-tier hit against ``digest``."""
        with self._lock:
            bucket = self._bucket(stage, namespace)
            entry = bucket.get(digest)
            if entry is not None and self._live(entry):
                entry.hit_count += 1
                bucket.move_to_end(digest)

    def admit(self, stage: Stage, namespace: str, entry: CacheEntry) -> AdmitResult:
        stage = Stage(stage)
        if entry.stage is not stage:
            raise ValidationError(f"entry stage {entry.stage.value} does not match {stage.value}")
        if entry.namespace != namespace:
            raise ValidationError(f"entry namespace {entry.namespace!r} does not match {namespace!r}")
        policy = self.config.admission_policy
        with self._lock:
            if policy is AdmissionPolicy.NEVER:
                return AdmitResult("rejected_policy")
            if policy is AdmissionPolicy.PROBATION:
                seen = self._probation.setdefault((stage, namespace), set())
                if entry.digest not in seen:
                    seen.add(entry.digest)
                    return AdmitResult("rejected_policy")
                seen.discard(entry.digest)
            bucket = self._bucket(stage, namespace)
            current = self.epoch(namespace)
            existing = bucket.get(entry.digest)
            if existing is not None and self._live(existing):
                return AdmitResult("duplicate")
            entry.version_epoch = current
            bucket[entry.digest] = entry
            bucket.move_to_end(entry.digest)
            evicted = None
            while len(bucket) > self.config.capacity:
                evicted = self._evict_one(bucket)
            return AdmitResult("admitted", evicted)

    def _evict_one(self, bucket: OrderedDict[Digest, CacheEntry]) -> Digest:
        for digest, entry in bucket.items():
            if not self._live(entry):
                del bucket[digest]
                return digest
        digest, _ = bucket.popitem(last=False)
        return digest

    def bump_epoch(self, namespace: str) -> int:
        with self._lock:
            self._epochs[namespace] = self.epoch(namespace) + 1
            return self._epochs[namespace]

    def compact(self) -> int:
        """Drop every stale-epoch entry; returns how many were removed."""
        removed = 0
        with self._lock:
            for bucket in self._buckets.values():
                stale = [d for d, e in bucket.items() if not self._live(e)]
                for d in stale:
                    del bucket[d]
                removed += len(stale)
        return removed

    def size(self, stage: Stage, namespace: str, *, live_only: bool = False) -> int:
        with self._lock:
            bucket = self._buckets.get((Stage(stage), namespace), {})
            if live_only:
                return sum(1 for e in bucket.values() if self._live(e))
            return len(bucket)

    def entries(self, stage: Stage | None = None, namespace: str | None = None) -> Iterator[CacheEntry]:
        """Live entries, optionally filtered, in LRU order within each bucket."""
        with self._lock:
            snapshot = [
                e
                for (s, ns), bucket in sorted(self._buckets.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))
                if (stage is None or s is Stage(stage)) and (namespace is None or ns == namespace)
                for e in bucket.values()
                if self._live(e)
            ]
        return iter(snapshot)

    # -- snapshot -------------------------------------------------------

    def dump(self, fh: TextIO) -> int:
        fh.write(SNAPSHOT_HEADER + "\n")
        count = 0
        for e in self.entries():
            fields = [
                e.stage.value,
                e.namespace,
                e.digest.hex,
                str(e.version_epoch),
                base64.b64encode(e.payload).decode("ascii"),
                ",".join(e.lexical_tokens),
            ]
            if e.embedding is not None:
                fields.append(encode_vector(e.embedding))
            fh.write("\t".join(fields) + "\n")
            count += 1
        return count

    @classmethod
    def load(cls, fh: TextIO, config: StoreConfig | None = None) -> CacheStore:
        header = fh.readline().rstrip("\n")
        if header != SNAPSHOT_HEADER:
            raise ValidationError(f"unsupported snapshot header {header!r}")
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) not in (6, 7):
                raise ValidationError(f"snapshot line {lineno}: expected 6 or 7 fields, got {len(parts)}")
            records.append(parts)
        store = cls(config)
        with store._lock:
            for parts in records:
                stage, ns, hexd, epoch, payload, tokens = parts[:6]
                store._epochs[ns] = max(store._epochs.get(ns, 0), int(epoch))
            for parts in records:
                stage, ns, hexd, epoch, payload, tokens = parts[:6]
                entry = CacheEntry(
                    digest=Digest.from_hex(hexd),
                    stage=Stage(stage),
                    payload=base64.b64decode(payload),
                    namespace=ns,
                    embedding=decode_vector(parts[6]) if len(parts) == 7 else None,
                    lexical_tokens=tuple(t for t in tokens.split(",") if t),
                    version_epoch=int(epoch),
                )
                store._bucket(entry.stage, ns)[entry.digest] = entry
        return store
