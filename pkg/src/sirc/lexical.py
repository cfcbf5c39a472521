"""Tokenization, Okapi BM25 and schema-entity extraction."""

from __future__ import annotations

import functools
import math
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from sirc.domain import Digest, SchemaContext, ValidationError
from sirc.vector_index import RankedCandidate, rank_by_score

DEFAULT_STOPWORDS = frozenset(
    """
    a an the and or but nor of to in on at by for with from into onto over under
    as is are was were be been being it its this that these those i me my we our
    you your he she they them their what which who whom please can could would
    should will do does did per via
    """.split()
)

_CAMEL_LOWER_UPPER = re.compile(r"([a-z0-9])([A-Z])")
_CAMEL_ACRONYM = re.compile(r"([A-Z]+)([A-Z][a-z])")
_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


@dataclass(frozen=True)
class TokenizerSpec:
    lowercase: bool = True
    split_camel: bool = True
    stopwords: frozenset[str] = field(default=DEFAULT_STOPWORDS)


DEFAULT_TOKENIZER = TokenizerSpec()


def tokenize(text: str, spec: TokenizerSpec = DEFAULT_TOKENIZER) -> list[str]:
    """Split on non-alphanumerics, underscores and camelCase humps.

    >>> tokenize("Show DDA Revenue by channel")
    ['show', 'dda', 'revenue', 'channel']
    >>> tokenize("ga4_revenue") == tokenize("GA4 Revenue")
    True
    """
    if spec.split_camel:
        text = _CAMEL_ACRONYM.sub(r"\1 \2", _CAMEL_LOWER_UPPER.sub(r"\1 \2", text))
    if spec.lowercase:
        text = text.lower()
    return [t for t in _SPLIT.split(text) if t and t not in spec.stopwords]


@functools.lru_cache(maxsize=256)
def token_groups(schema: SchemaContext, spec: TokenizerSpec = DEFAULT_TOKENIZER) -> dict[str, tuple[str, ...]]:
    """Schema token -> its sub-token sequence, e.g. ``dda_revenue -> (dda, revenue)``."""
    groups: dict[str, tuple[str, ...]] = {}
    for token in sorted(schema.tokens):
        parts = tuple(tokenize(token, spec))
        if parts:
            groups[token] = parts
    return groups


def _contains_run(tokens: Sequence[str], run: tuple[str, ...]) -> bool:
    first = run[0]
    if first not in tokens:
        return False
    n = len(run)
    if n == 1:
        return True
    tokens = tuple(tokens)
    return any(tokens[i] == first and tokens[i : i + n] == run for i in range(len(tokens) - n + 1))


def mandatory_groups(
    query_tokens: Sequence[str], schema: SchemaContext, spec: TokenizerSpec = DEFAULT_TOKENIZER
) -> dict[str, tuple[str, ...]]:
    """Schema tokens named by the query, matched as contiguous sub-token runs."""
    return {
        name: run for name, run in token_groups(schema, spec).items() if _contains_run(query_tokens, run)
    }


def entity_tokens(
    query_tokens: Sequence[str], schema: SchemaContext, spec: TokenizerSpec = DEFAULT_TOKENIZER
) -> set[str]:
    """Query tokens belonging to a schema metric or dimension named by the query."""
    return {t for run in mandatory_groups(query_tokens, schema, spec).values() for t in run}


def missing_groups(candidate_tokens: Sequence[str], groups: dict[str, tuple[str, ...]]) -> list[str]:
    """Names of the mandatory groups absent from ``candidate_tokens``."""
    return [name for name, run in groups.items() if not _contains_run(candidate_tokens, run)]


class Bm25Index(BaseEstimator):
    """Incremental Okapi BM25 over token lists keyed by :class:`Digest`.

    IDF uses the ``ln((N - n + 0.5) / (n + 0.5) + 1)`` form, which is never
    negative. Query terms are summed with multiplicity.
    """

    def __init__(self, k1=1.2, b=0.75):
        self.k1 = k1
        self.b = b

    def _check_params(self) -> None:
        if not self.k1 > 0:
            raise ValidationError("k1 must be > 0")
        if not 0 <= self.b <= 1:
            raise ValidationError("b must lie in [0, 1]")

    def _reset(self) -> None:
        self._check_params()
        self._slot: dict[Digest, int] = {}
        self._digests: list[Digest | None] = []
        self._docs: list[Counter | None] = []
        self._lengths = np.zeros(16, dtype=np.float64)
        self._postings: dict[str, dict[int, int]] = {}
        self._arrays: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._total_length = 0
        self._lock = threading.RLock()

    def fit(self, documents: Iterable[Sequence[str]], digests: Sequence[Digest]):
        self._reset()
        for digest, tokens in zip(digests, documents):
            self.add(digest, tokens)
        return self

    def add(self, digest: Digest, tokens: Sequence[str]) -> None:
        if not hasattr(self, "_slot"):
            self._reset()
        with self._lock:
            if digest in self._slot:
                self.remove(digest)
            slot = len(self._digests)
            if slot == len(self._lengths):
                self._lengths = np.concatenate([self._lengths, np.zeros_like(self._lengths)])
            counts = Counter(tokens)
            self._slot[digest] = slot
            self._digests.append(digest)
            self._docs.append(counts)
            self._lengths[slot] = len(tokens)
            self._total_length += len(tokens)
            for term, tf in counts.items():
                self._postings.setdefault(term, {})[slot] = tf
                self._arrays.pop(term, None)

    def remove(self, digest: Digest) -> bool:
        if not hasattr(self, "_slot") or digest not in self._slot:
            return False
        with self._lock:
            slot = self._slot.pop(digest)
            counts = self._docs[slot]
            self._docs[slot] = self._digests[slot] = None
            self._total_length -= int(self._lengths[slot])
            self._lengths[slot] = 0
            for term in counts:
                posting = self._postings[term]
                del posting[slot]
                self._arrays.pop(term, None)
                if not posting:
                    del self._postings[term]
        return True

    def __len__(self) -> int:
        return len(self._slot) if hasattr(self, "_slot") else 0

    @property
    def avgdl(self) -> float:
        return self._total_length / len(self) if len(self) else 0.0

    def idf(self, term: str) -> float:
        n_t = len(self._postings.get(term, ()))
        return math.log((len(self) - n_t + 0.5) / (n_t + 0.5) + 1.0)

    def score(self, query_tokens: Sequence[str], digest: Digest) -> float:
        """BM25 score of one document; 0 when it shares no query term."""
        slot = self._slot[digest]
        counts = self._docs[slot]
        avgdl = self.avgdl
        norm = self.k1 * (1 - self.b + self.b * self._lengths[slot] / avgdl) if avgdl else self.k1
        total = 0.0
        for term in query_tokens:
            tf = counts.get(term, 0)
            if tf:
                total += self.idf(term) * tf * (self.k1 + 1) / (tf + norm)
        return total

    def _posting_arrays(self, term: str) -> tuple[np.ndarray, np.ndarray] | None:
        arrays = self._arrays.get(term)
        if arrays is None:
            posting = self._postings.get(term)
            if not posting:
                return None
            slots = np.fromiter(posting.keys(), dtype=np.intp, count=len(posting))
            tfs = np.fromiter(posting.values(), dtype=np.float64, count=len(posting))
            arrays = self._arrays[term] = (slots, tfs)
        return arrays

    def search(self, query_tokens: Sequence[str], k: int = 10) -> list[RankedCandidate]:
        """Top-``k`` documents with a positive score, ties by ascending digest hex."""
        if k < 1:
            raise ValidationError("k must be >= 1")
        if not query_tokens or not len(self):
            return []
        k1, b = self.k1, self.b
        with self._lock:
            avgdl = self.avgdl
            n_slots = len(self._digests)
            scores = np.zeros(n_slots, dtype=np.float64)
            touched = np.zeros(n_slots, dtype=bool)
            for term, qtf in Counter(query_tokens).items():
                arrays = self._posting_arrays(term)
                if arrays is None:
                    continue
                slots, tfs = arrays
                weight = qtf * self.idf(term) * (k1 + 1)
                norm = k1 * (1 - b + b * self._lengths[slots] / avgdl)
                scores[slots] += weight * tfs / (tfs + norm)
                touched[slots] = True
            hits = np.flatnonzero(touched)
            if len(hits) > k:
                # keep every document tied with the k-th score so tie-breaking stays exact
                kth = np.partition(scores[hits], len(hits) - k)[len(hits) - k]
                hits = hits[scores[hits] >= kth]
            scored = [(self._digests[i], float(scores[i])) for i in hits.tolist()]
        return rank_by_score(scored, k)


def bm25_search(index: Bm25Index, query_tokens: Sequence[str], k: int = 10) -> list[RankedCandidate]:
    return index.search(query_tokens, k)
