"""Deterministic text embedders and cosine similarity.

``feature_hash`` is the offline default: unigram and bigram features of the
lexical tokenizer are hashed into ``dimension`` buckets with a hash-derived
sign, then L2-normalised. ``lookup_table`` returns registered vectors and is
used to stage exact similarity scenarios. ``external_stub`` is the seam for
a real embedding client.
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from sirc._validation import check_vector
from sirc.domain import ValidationError
from sirc.lexical import DEFAULT_TOKENIZER, TokenizerSpec, tokenize

EMBEDDER_KINDS = ("feature_hash", "lookup_table", "external_stub")


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "feature_hash"
    dimension: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in EMBEDDER_KINDS:
            raise ValidationError(f"unknown embedder kind {self.kind!r}")
        if self.dimension < 8:
            raise ValidationError("embedding dimension must be >= 8")


class MissingVectorError(KeyError):
    """Text has no registered vector in a lookup-table embedder."""


def cosine(a, b) -> float:
    a, b = check_vector(a), check_vector(b)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine undefined for zero-norm vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class _TextEmbedder(BaseEstimator, TransformerMixin):
    dimension: int

    def fit(self, X=None, y=None):
        return self

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def transform(self, X) -> np.ndarray:
        if isinstance(X, str):
            raise ValidationError("transform expects an iterable of texts, not a single string")
        rows = [self.embed(t) for t in X]
        return np.vstack(rows) if rows else np.zeros((0, self.dimension))


def _require_text(text: str) -> None:
    if not isinstance(text, str) or not text.strip():
        raise ValidationError("cannot embed empty text")


class FeatureHashEmbedder(_TextEmbedder):
    def __init__(self, dimension=256, seed=0, tokenizer: TokenizerSpec = DEFAULT_TOKENIZER):
        self.dimension = dimension
        self.seed = seed
        self.tokenizer = tokenizer

    def _features(self, text: str) -> list[str]:
        tokens = tokenize(text, self.tokenizer)
        if not tokens:
            # all-stopword text still needs a nonzero vector
            return [text.strip().lower()]
        return tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]

    def embed(self, text: str) -> np.ndarray:
        _require_text(text)
        if self.dimension < 8:
            raise ValidationError("embedding dimension must be >= 8")
        v = np.zeros(self.dimension, dtype=np.float64)
        key = self.seed.to_bytes(8, "big", signed=True)
        for feat in self._features(text):
            h = int.from_bytes(hashlib.blake2b(feat.encode("utf-8"), digest_size=8, key=key).digest(), "big")
            v[h % self.dimension] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(v)
        if norm == 0:
            # every feature cancelled in one bucket; fall back to the raw text
            h = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=key).digest(), "big")
            v[h % self.dimension] = 1.0
            norm = 1.0
        return v / norm


class LookupTableEmbedder(_TextEmbedder):
    """Returns pre-registered vectors; unknown text raises :class:`MissingVectorError`."""

    def __init__(self, dimension=256, table: Mapping[str, np.ndarray] | None = None):
        self.dimension = dimension
        self.table = table

    def _table(self) -> dict[str, np.ndarray]:
        if not hasattr(self, "_vectors"):
            self._vectors = {}
            for text, vec in (self.table or {}).items():
                self.register(text, vec)
        return self._vectors

    def register(self, text: str, vector) -> None:
        _require_text(text)
        vector = check_vector(vector, dimension=self.dimension)
        if not np.linalg.norm(vector) > 0:
            raise ValidationError("registered vectors must have nonzero norm")
        self._table()[text] = vector

    def embed(self, text: str) -> np.ndarray:
        _require_text(text)
        try:
            return self._table()[text].copy()
        except KeyError:
            raise MissingVectorError(f"no vector registered for {text!r}") from None

    def load(self, path) -> int:
        """Register ``text<TAB>base64-vector`` lines; returns the count loaded."""
        count = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                text, _, b64 = line.rstrip("\n").rpartition("\t")
                self.register(text, decode_vector(b64))
                count += 1
        return count

    def register_pair(self, a: str, b: str, similarity: float, seed: int = 0) -> None:
        """Register unit vectors for ``a`` and ``b`` at exactly ``similarity`` cosine."""
        va, vb = crafted_pair(self.dimension, similarity, seed)
        self.register(a, va)
        self.register(b, vb)

    def register_near(self, anchor: str, text: str, similarity: float, seed: int = 0) -> None:
        """Register ``text`` at ``similarity`` cosine to the already-registered ``anchor``."""
        base = self.embed(anchor)
        base = base / np.linalg.norm(base)
        rng = np.random.default_rng(seed)
        w = rng.standard_normal(self.dimension)
        w -= (w @ base) * base
        w /= np.linalg.norm(w)
        self.register(text, similarity * base + np.sqrt(max(0.0, 1 - similarity**2)) * w)


class ExternalEmbedder(_TextEmbedder):
    """Adapter around a caller-supplied ``text -> vector`` function."""

    def __init__(self, dimension=3072, fn: Callable[[str], np.ndarray] | None = None):
        self.dimension = dimension
        self.fn = fn

    def embed(self, text: str) -> np.ndarray:
        _require_text(text)
        if self.fn is None:
            raise NotImplementedError("no external embedding client configured")
        return check_vector(self.fn(text), dimension=self.dimension)


def crafted_pair(dimension: int, similarity: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if not -1 <= similarity <= 1:
        raise ValidationError("similarity must lie in [-1, 1]")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dimension)
    u /= np.linalg.norm(u)
    w = rng.standard_normal(dimension)
    w -= (w @ u) * u
    w /= np.linalg.norm(w)
    return u, similarity * u + np.sqrt(1 - similarity**2) * w


def make_embedder(spec: EmbedderSpec, **kwargs) -> _TextEmbedder:
    if spec.kind == "feature_hash":
        return FeatureHashEmbedder(dimension=spec.dimension, seed=spec.seed, **kwargs)
    if spec.kind == "lookup_table":
        return LookupTableEmbedder(dimension=spec.dimension, **kwargs)
    return ExternalEmbedder(dimension=spec.dimension, **kwargs)


def embed(text: str, spec: EmbedderSpec, **kwargs) -> np.ndarray:
    return make_embedder(spec, **kwargs).embed(text)


def encode_vector(v) -> str:
    """Base64 of little-endian float64 values (snapshot encoding)."""
    return base64.b64encode(np.asarray(v, dtype="<f8").tobytes()).decode("ascii")


def decode_vector(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)
