"""HNSW approximate nearest-neighbour index under cosine similarity.

The graph follows Malkov & Yashunin: every node lives on layer 0, a
geometrically decaying fraction also lives on upper layers, and search
descends greedily from the top entry point before running a beam of width
``ef_search`` on layer 0. Neighbour lists are pruned with the diversity
heuristic; overflowing lists of existing nodes keep their nearest links.
Distances are ``1 - cosine`` internally; results expose cosine.

:func:`brute_force_search` is the exact oracle the index is measured
against.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from sirc._validation import check_matrix, check_vector
from sirc.domain import Digest, ValidationError


@dataclass(frozen=True)
class RankedCandidate:
    digest: Digest
    score: float
    rank: int


def rank_by_score(scored: Iterable[tuple[Digest, float]], k: int | None = None) -> list[RankedCandidate]:
    """Sort by score descending, ties by ascending digest hex, and number from 1."""
    ordered = sorted(scored, key=lambda item: (-item[1], item[0].hex))
    if k is not None:
        ordered = ordered[:k]
    return [RankedCandidate(d, float(s), i) for i, (d, s) in enumerate(ordered, start=1)]


def brute_force_search(
    entries: Sequence[tuple[Digest, np.ndarray]] | dict[Digest, np.ndarray], q, k: int
) -> list[RankedCandidate]:
    """Exact top-``k`` by cosine similarity; defines ground truth for recall."""
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)
    if not items:
        return []
    q = check_vector(q)
    mat = check_matrix([v for _, v in items], dimension=q.shape[0])
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0):
        raise ValidationError("zero-norm vector in entry set")
    scores = (mat @ q) / (norms * np.linalg.norm(q))
    return rank_by_score(((d, float(s)) for (d, _), s in zip(items, scores)), k)


# Below this many stored nodes one matrix-vector product per operation is
# cheaper than per-neighbourhood products; the graph walk is unchanged.
_DENSE_ROW_LIMIT = 50_000


class HnswIndex(BaseEstimator):
    """Hierarchical navigable small-world graph keyed by :class:`Digest`.

    Parameters
    ----------
    M : int
        Maximum neighbours per node on upper layers; layer 0 keeps ``2 * M``.
    ef_construction : int
        Beam width while inserting.
    ef_search : int
        Beam width while querying; raised to ``k`` when smaller.
    level_mult : float or None
        Level normalisation factor; ``None`` means ``1 / ln(M)``.
    seed : int
        Salt for the digest-keyed level assignment.
    """

    def __init__(self, M=16, ef_construction=200, ef_search=64, level_mult=None, seed=0):
        self.M = M
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.level_mult = level_mult
        self.seed = seed

    # -- construction ---------------------------------------------------

    def _init_storage(self, dimension: int) -> None:
        if self.M < 2:
            raise ValidationError("M must be >= 2")
        self.dimension_ = dimension
        self._vectors = np.zeros((16, dimension), dtype=np.float64)
        self._digests: list[Digest] = []
        self._slot: dict[Digest, int] = {}
        self._deleted: set[int] = set()
        self._levels: list[int] = []
        self._links: list[list[list[int]]] = []
        self._layer_members: list[list[int]] = []
        self._entry: int | None = None
        self._max_level = -1
        self._lock = threading.RLock()

    def fit(self, X, digests: Sequence[Digest] | None = None):
        """Build the index from rows of ``X``; ``digests`` default to row hashes."""
        X = check_matrix(X)
        if digests is None:
            digests = [Digest(hashlib.sha256(i.to_bytes(8, "big")).digest()) for i in range(len(X))]
        if len(digests) != len(X):
            raise ValidationError("digests and X differ in length")
        self._init_storage(X.shape[1])
        for d, v in zip(digests, X):
            self.insert(d, v)
        return self

    def _ensure_ready(self, dimension: int) -> None:
        if not hasattr(self, "dimension_"):
            self._init_storage(dimension)
        elif dimension != self.dimension_:
            raise ValidationError(f"vector dimension {dimension} does not match index dimension {self.dimension_}")

    def _random_level(self, digest: Digest) -> int:
        mult = self.level_mult if self.level_mult is not None else 1.0 / math.log(self.M)
        h = hashlib.sha256(self.seed.to_bytes(8, "big", signed=True) + digest.value).digest()
        u = (int.from_bytes(h[:8], "big") + 1) / 2.0**64
        return int(-math.log(u) * mult)

    def _max_links(self, layer: int) -> int:
        return 2 * self.M if layer == 0 else self.M

    def insert(self, digest: Digest, v) -> None:
        """Insert ``v`` under ``digest``; an existing digest is replaced."""
        v = check_vector(v)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ValidationError("cannot index a zero-norm vector")
        self._ensure_ready(v.shape[0])
        with self._lock:
            if digest in self._slot:
                self.remove(digest)
            self._insert(digest, v / norm)

    def _insert(self, digest: Digest, unit) -> None:
        idx = len(self._digests)
        if idx == len(self._vectors):
            grown = np.zeros((2 * len(self._vectors), self.dimension_), dtype=np.float64)
            grown[:idx] = self._vectors[:idx]
            self._vectors = grown
        self._vectors[idx] = unit
        self._digests.append(digest)
        self._slot[digest] = idx
        level = self._random_level(digest)
        self._levels.append(level)
        self._links.append([[] for _ in range(level + 1)])
        while len(self._layer_members) <= level:
            self._layer_members.append([])

        if self._entry is None:
            self._entry, self._max_level = idx, level
            self._register(idx, level)
            return

        row = self._distance_row(unit)
        ep = [self._entry]
        for layer in range(self._max_level, level, -1):
            ep = [self._search_layer(unit, ep, 1, layer, row)[0][1]]
        for layer in range(min(level, self._max_level), -1, -1):
            found = self._candidates(unit, ep, layer, row)
            neighbours = self._select_neighbours(found, self._max_links(layer))
            self._links[idx][layer] = neighbours
            for n in neighbours:
                links = self._links[n][layer]
                links.append(idx)
                if len(links) > self._max_links(layer):
                    self._shrink(n, layer)
            ep = [c for _, c in found]
        if level > self._max_level:
            self._entry, self._max_level = idx, level
        self._register(idx, level)

    def _register(self, idx: int, level: int) -> None:
        for layer in range(level + 1):
            self._layer_members[layer].append(idx)

    def _candidates(self, unit, ep: list[int], layer: int, row: list[float] | None) -> list[tuple[float, int]]:
        """Insertion candidates; exact when the beam would span the whole layer."""
        members = self._layer_members[layer]
        if len(members) > self.ef_construction:
            return self._search_layer(unit, ep, self.ef_construction, layer, row)
        if row is not None:
            return sorted((row[m], m) for m in members)
        return sorted(zip((1.0 - self._vectors[members] @ unit).tolist(), members))

    def _shrink(self, node: int, layer: int) -> None:
        links = self._links[node][layer]
        dists = 1.0 - self._vectors[links] @ self._vectors[node]
        keep = np.argsort(dists, kind="stable")[: self._max_links(layer)]
        self._links[node][layer] = [links[i] for i in keep.tolist()]

    def _select_neighbours(self, candidates: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity heuristic, topped up with the nearest discarded candidates.

        A candidate is dropped when some already chosen neighbour is closer to
        it than the new node is.
        """
        if len(candidates) <= 1:
            return [c for _, c in candidates]
        ids = [c for _, c in candidates]
        dists = np.fromiter((d for d, _ in candidates), dtype=np.float64, count=len(candidates))
        block = self._vectors[ids]
        pair_dist = 1.0 - block @ block.T
        dominated = np.zeros(len(ids), dtype=bool)
        chosen: list[int] = []
        discarded: list[int] = []
        for pos in range(len(ids)):
            if len(chosen) >= m:
                break
            if dominated[pos]:
                discarded.append(pos)
            else:
                chosen.append(pos)
                dominated |= pair_dist[pos] < dists
        chosen.extend(discarded[: max(0, m - len(chosen))])
        return [ids[pos] for pos in chosen]

    def _distance_row(self, q) -> list[float] | None:
        """Distances from ``q`` to every stored node, when the index is small enough."""
        n = len(self._digests)
        if n > _DENSE_ROW_LIMIT:
            return None
        return (1.0 - self._vectors[:n] @ q).tolist()

    def _search_layer(
        self, q, entry_points: list[int], ef: int, layer: int, row: list[float] | None = None
    ) -> list[tuple[float, int]]:
        """Beam search on one layer; returns (distance, node) sorted ascending.

        ``row`` holds precomputed distances to every node; without it,
        distances are computed per expanded neighbourhood.
        """
        vecs = self._vectors
        visited = set(entry_points)
        if row is not None:
            candidates = [(row[e], e) for e in entry_points]
        else:
            candidates = [(float(d), e) for d, e in zip(1.0 - vecs[entry_points] @ q, entry_points)]
        heapq.heapify(candidates)
        best = [(-d, e) for d, e in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        links = self._links
        while candidates:
            dist, node = heapq.heappop(candidates)
            worst = -best[0][0]
            if dist > worst and len(best) >= ef:
                break
            fresh = [n for n in links[node][layer] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            if row is not None:
                pairs = [(row[n], n) for n in fresh]
            else:
                pairs = list(zip((1.0 - vecs[fresh] @ q).tolist(), fresh))
            for d, n in pairs:
                if len(best) < ef or d < worst:
                    heapq.heappush(candidates, (d, n))
                    heapq.heappush(best, (-d, n))
                    if len(best) > ef:
                        heapq.heappop(best)
                    worst = -best[0][0]
        return sorted((-d, n) for d, n in best)

    # -- mutation / query -------------------------------------------------

    def remove(self, digest: Digest) -> bool:
        """Tombstone ``digest``; the node still routes searches but is never returned."""
        if not hasattr(self, "_slot") or digest not in self._slot:
            return False
        with self._lock:
            idx = self._slot.pop(digest)
            self._deleted.add(idx)
        return True

    def __len__(self) -> int:
        return len(self._slot) if hasattr(self, "_slot") else 0

    def __contains__(self, digest: Digest) -> bool:
        return hasattr(self, "_slot") and digest in self._slot

    def search(self, q, k: int, ef_search: int | None = None) -> list[RankedCandidate]:
        """Approximate top-``k`` by cosine; an empty index yields ``[]``."""
        if k < 1:
            raise ValidationError("k must be >= 1")
        if len(self) == 0:
            return []
        q = check_vector(q, dimension=self.dimension_)
        norm = np.linalg.norm(q)
        if norm == 0:
            raise ValidationError("cannot search with a zero-norm vector")
        q = q / norm
        ef = max(ef_search or self.ef_search, k)
        with self._lock:
            row = self._distance_row(q)
            ep = [self._entry]
            for layer in range(self._max_level, 0, -1):
                ep = [self._search_layer(q, ep, 1, layer, row)[0][1]]
            # widen the beam so tombstones do not crowd out live results
            found = self._search_layer(q, ep, ef + len(self._deleted), 0, row)
            live = [(self._digests[n], 1.0 - d) for d, n in found if n not in self._deleted]
        return rank_by_score(live, k)

    def kneighbors(self, X, n_neighbors: int = 10):
        """sklearn-style batch query returning ``(distances, digests)``."""
        X = check_matrix(X, dimension=self.dimension_)
        dist, keys = [], []
        for row in X:
            hits = self.search(row, n_neighbors)
            dist.append([1.0 - h.score for h in hits])
            keys.append([h.digest for h in hits])
        return dist, keys
