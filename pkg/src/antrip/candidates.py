"""Trip hypergraph and fixed-length candidate retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from antrip.errors import DataError
from antrip.geo import Poi, Trip, TripQuery, distances_from

DEFAULT_N_CANDIDATES = 200


@dataclass(frozen=True)
class TripHypergraph:
    incidence: dict[int, frozenset[int]]
    edges: dict[int, frozenset[int]]

    def neighbors(self, poi: int) -> set[int]:
        out: set[int] = set()
        for e in self.incidence.get(poi, ()):
            out |= self.edges[e]
        out.discard(poi)
        return out


@dataclass(frozen=True)
class CandidateSet:
    query: TripQuery
    pois: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.pois)) != len(self.pois):
            raise DataError("candidate set contains duplicates")
        if not self.pois or self.pois[0] != self.query.start:
            raise DataError("candidate slot 0 must hold the start POI")

    def __len__(self) -> int:
        return len(self.pois)


def build_hypergraph(train_trips: Iterable[Trip]) -> TripHypergraph:
    edges: dict[int, frozenset[int]] = {}
    incidence: dict[int, set[int]] = {}
    for trip in train_trips:
        verts = frozenset(trip.pois)
        if len(verts) < 2:
            continue
        eid = len(edges)
        edges[eid] = verts
        for v in verts:
            incidence.setdefault(v, set()).add(eid)
    return TripHypergraph({v: frozenset(es) for v, es in incidence.items()}, edges)


def hypergraph_candidates(g: TripHypergraph, start: int) -> set[int]:
    return g.neighbors(start)


class CandidateRetriever:
    """Builds candidate sets against a fixed POI world, caching per-start orderings.

    The spatial order of the world around each start is computed once; the
    ranking is ascending distance with ties broken by POI id.
    """

    def __init__(self, g: TripHypergraph, world: Sequence[Poi], n: int = DEFAULT_N_CANDIDATES):
        if n < 2:
            raise DataError("need at least 2 candidates")
        if len(world) < n:
            raise DataError(f"world has {len(world)} POIs, fewer than N={n}")
        self.graph = g
        self.n = n
        self._ids = np.array([p.id for p in world], dtype=np.int64)
        self._coords = np.array([p.coords for p in world], dtype=np.float64)
        self._index = {p.id: i for i, p in enumerate(world)}
        self._order_cache: dict[int, np.ndarray] = {}

    def spatial_order(self, start: int) -> np.ndarray:
        """World POI ids sorted by distance to ``start`` (start itself first)."""
        cached = self._order_cache.get(start)
        if cached is not None:
            return cached
        try:
            i = self._index[start]
        except KeyError:
            raise DataError(f"start POI {start} not in world") from None
        dist = distances_from(tuple(self._coords[i]), self._coords)
        dist[i] = -1.0
        order = self._ids[np.lexsort((self._ids, dist))]
        self._order_cache[start] = order
        return order

    def clear_cache(self) -> None:
        self._order_cache.clear()

    def __call__(self, q: TripQuery) -> CandidateSet:
        order = self.spatial_order(q.start)
        hyper = self.graph.neighbors(q.start)
        rest = order[1:]
        in_hyper = np.fromiter((p in hyper for p in rest.tolist()), dtype=bool, count=len(rest))
        from_graph = rest[in_hyper][: self.n - 1]
        pad = rest[~in_hyper][: self.n - 1 - len(from_graph)]
        return CandidateSet(q, (q.start, *from_graph.tolist(), *pad.tolist()))

    def augment(self, cand: CandidateSet, trip: Trip) -> CandidateSet:
        """Ensure every POI of ``trip`` is a candidate by evicting the farthest non-target entries.

        Spatial padding is evicted before hypergraph neighbors.
        """
        present = set(cand.pois)
        missing = [p for p in trip.pois if p not in present]
        if not missing:
            return cand
        hyper = self.graph.neighbors(cand.query.start)
        targets = set(trip.pois)
        slots = list(cand.pois)
        evictable = [i for i in range(len(slots) - 1, 0, -1) if slots[i] not in targets]
        # farthest padding first (the tail of the list), then farthest hypergraph entries
        evictable.sort(key=lambda i: (slots[i] in hyper, -i))
        if len(evictable) < len(missing):
            raise DataError(f"trip of length {len(trip)} does not fit in {len(slots)} candidates")
        for i, p in zip(evictable, missing):
            slots[i] = p
        return CandidateSet(cand.query, tuple(slots))


def build_candidate_set(q: TripQuery, g: TripHypergraph, world: Sequence[Poi], n: int) -> CandidateSet:
    return CandidateRetriever(g, world, n)(q)
