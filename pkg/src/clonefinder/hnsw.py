"""Navigable small-world graph for approximate nearest-neighbour search.

Multi-layer greedy-search graph over unit vectors under cosine similarity
(distance = 1 - dot). Construction inserts nodes one at a time, linking each
to a diversity-pruned neighbour set per layer; queries descend the layers
greedily and run a beam search on the base layer. Deterministic for a fixed
seed and insertion order.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

DEFAULT_M = 16
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 128


class HnswGraph:
    def __init__(
        self,
        dimension: int,
        m: int = DEFAULT_M,
        ef_construction: int = DEFAULT_EF_CONSTRUCTION,
        ef_search: int = DEFAULT_EF_SEARCH,
        seed: int = 0,
    ):
        self.dimension = dimension
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.seed = seed
        self.level_mult = 1.0 / math.log(m)

        self._matrix: np.ndarray | None = None
        self._count = 0
        self._entry = -1
        self._max_level = -1
        # neighbour lists: _links[level][node] -> list[int]
        self._links: list[list[list[int]]] = []
        self._visit_stamp: np.ndarray | None = None
        self._visit_gen = 0

    def build(self, matrix: np.ndarray) -> None:
        """Insert all rows of a unit-vector matrix, in row order."""
        n = matrix.shape[0]
        self._matrix = matrix
        self._visit_stamp = np.zeros(n, dtype=np.int64)
        rng = np.random.default_rng(self.seed)
        uniform = rng.random(n)
        levels = (-np.log(np.clip(uniform, 1e-12, None)) * self.level_mult).astype(int)
        for i in range(n):
            self._insert(i, int(levels[i]))
        self._count = n

    # --- internals -----------------------------------------------------------

    def _ensure_levels(self, level: int) -> None:
        assert self._matrix is not None
        n = self._matrix.shape[0]
        while len(self._links) <= level:
            self._links.append([[] for _ in range(n)])

    def _distances(self, q: np.ndarray, nodes: list[int]) -> np.ndarray:
        assert self._matrix is not None
        return 1.0 - self._matrix[nodes] @ q

    def _search_layer(
        self, q: np.ndarray, entry_points: list[int], ef: int, level: int
    ) -> list[tuple[float, int]]:
        """Beam search on one layer; returns (dist, node) ascending by dist."""
        assert self._visit_stamp is not None
        self._visit_gen += 1
        gen = self._visit_gen
        stamp = self._visit_stamp

        dists = self._distances(q, entry_points)
        candidates: list[tuple[float, int]] = []
        results: list[tuple[float, int]] = []  # max-heap via negated dist
        for node, dist in zip(entry_points, dists):
            stamp[node] = gen
            heapq.heappush(candidates, (float(dist), node))
            heapq.heappush(results, (-float(dist), node))

        links = self._links[level]
        while candidates:
            dist, node = heapq.heappop(candidates)
            if dist > -results[0][0] and len(results) >= ef:
                break
            fresh = [nb for nb in links[node] if stamp[nb] != gen]
            if not fresh:
                continue
            for nb in fresh:
                stamp[nb] = gen
            fresh_dists = self._distances(q, fresh)
            for nb, nb_dist in zip(fresh, fresh_dists):
                nb_dist = float(nb_dist)
                if len(results) < ef:
                    heapq.heappush(candidates, (nb_dist, nb))
                    heapq.heappush(results, (-nb_dist, nb))
                elif nb_dist < -results[0][0]:
                    heapq.heappush(candidates, (nb_dist, nb))
                    heapq.heapreplace(results, (-nb_dist, nb))
        out = [(-neg, node) for neg, node in results]
        out.sort()
        return out

    def _select_neighbors(
        self, candidates: list[tuple[float, int]], limit: int
    ) -> list[int]:
        """Diversity-aware pruning: keep candidates closer to the query than
        to any already-selected neighbour; refill from pruned ones if short."""
        assert self._matrix is not None
        if len(candidates) <= limit:
            return [node for _, node in candidates]
        selected: list[int] = []
        selected_dists: list[float] = []
        pruned: list[tuple[float, int]] = []
        for dist, node in candidates:
            if len(selected) == limit:
                break
            if not selected:
                selected.append(node)
                selected_dists.append(dist)
                continue
            to_selected = 1.0 - self._matrix[selected] @ self._matrix[node]
            if dist < float(to_selected.min()):
                selected.append(node)
                selected_dists.append(dist)
            else:
                pruned.append((dist, node))
        for dist, node in pruned:
            if len(selected) == limit:
                break
            selected.append(node)
        return selected

    def _insert(self, i: int, level: int) -> None:
        assert self._matrix is not None
        q = self._matrix[i]
        self._ensure_levels(level)

        if self._entry < 0:
            self._entry = i
            self._max_level = level
            return

        ep = [self._entry]
        for lc in range(self._max_level, level, -1):
            nearest = self._search_layer(q, ep, 1, lc)
            ep = [nearest[0][1]]

        for lc in range(min(level, self._max_level), -1, -1):
            found = self._search_layer(q, ep, self.ef_construction, lc)
            limit = self.m0 if lc == 0 else self.m
            neighbors = self._select_neighbors(found, limit)
            links = self._links[lc]
            links[i] = list(neighbors)
            for nb in neighbors:
                nb_links = links[nb]
                nb_links.append(i)
                if len(nb_links) > limit:
                    nb_dists = 1.0 - self._matrix[nb_links] @ self._matrix[nb]
                    ranked = sorted(zip(nb_dists.tolist(), nb_links))
                    links[nb] = self._select_neighbors(ranked, limit)
            ep = [node for _, node in found]

        if level > self._max_level:
            self._entry = i
            self._max_level = level

    def query(self, q: np.ndarray, k: int, ef: int | None = None) -> list[tuple[int, float]]:
        """Approximate top-k as (node, similarity), best first."""
        if self._entry < 0:
            return []
        beam = max(ef if ef is not None else self.ef_search, k)
        ep = [self._entry]
        for lc in range(self._max_level, 0, -1):
            nearest = self._search_layer(q, ep, 1, lc)
            ep = [nearest[0][1]]
        found = self._search_layer(q, ep, beam, 0)
        return [(node, 1.0 - dist) for dist, node in found[:k]]
