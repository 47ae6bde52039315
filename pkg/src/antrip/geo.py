"""POIs, check-ins, trips and the deterministic time-cost model.

All times are float seconds. Transit time is great-circle distance divided by
a constant walking speed. Every distance used for budgets goes through
:func:`haversine_distance` so that decoder bookkeeping and :func:`trip_time`
agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from antrip.errors import DataError

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_WALK_SPEED = 2.0
TRANSIT_CACHE_LIMIT = 4_000_000
# per-origin rows of advance costs kept by advance_row
ADVANCE_ROW_LIMIT = 2048

Coords = tuple[float, float]


@dataclass(frozen=True)
class Poi:
    id: int
    lat: float
    lon: float
    category: int

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"POI {self.id}: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"POI {self.id}: longitude {self.lon} outside [-180, 180]")

    @property
    def coords(self) -> Coords:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class CheckIn:
    user: int
    poi: int
    arrival: float
    departure: float

    def __post_init__(self):
        if self.departure < self.arrival:
            raise DataError(
                f"check-in of user {self.user} at POI {self.poi}: departure before arrival"
            )


@dataclass(frozen=True)
class Trip:
    """Ordered POI visits of one user. ``start_ts`` and ``budget_s`` are optional metadata."""

    pois: tuple[int, ...]
    user: int
    start_ts: float = 0.0
    budget_s: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "pois", tuple(int(p) for p in self.pois))
        if not self.pois:
            raise DataError("trip must contain at least the start POI")
        if len(set(self.pois)) != len(self.pois):
            raise DataError(f"trip of user {self.user} repeats a POI: {self.pois}")

    @property
    def start(self) -> int:
        return self.pois[0]

    def __len__(self) -> int:
        return len(self.pois)


@dataclass(frozen=True)
class TripQuery:
    user: int
    start: int
    budget: float

    def __post_init__(self):
        if not self.budget > 0:
            raise DataError(f"query budget must be positive, got {self.budget}")


def haversine_distance(a: Coords, b: Coords) -> float:
    """Great-circle distance in meters between two (lat, lon) pairs in degrees."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    s_lat = math.sin((lat2 - lat1) / 2.0)
    s_lon = math.sin((lon2 - lon1) / 2.0)
    # sin is odd, so swapping a and b only flips signs that get squared away
    h = s_lat * s_lat + (math.cos(lat1) * math.cos(lat2)) * (s_lon * s_lon)
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


def haversine_matrix(coords: np.ndarray) -> np.ndarray:
    """Vectorised pairwise distances for an (n, 2) array of lat/lon degrees.

    Only used for ordering (candidate retrieval, synthesis); budget arithmetic
    uses the scalar function.
    """
    rad = np.radians(np.asarray(coords, dtype=np.float64))
    lat, lon = rad[:, 0], rad[:, 1]
    s_lat = np.sin((lat[None, :] - lat[:, None]) / 2.0)
    s_lon = np.sin((lon[None, :] - lon[:, None]) / 2.0)
    h = s_lat**2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * s_lon**2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def distances_from(origin: Coords, coords: np.ndarray) -> np.ndarray:
    rad = np.radians(np.asarray(coords, dtype=np.float64))
    lat0, lon0 = math.radians(origin[0]), math.radians(origin[1])
    s_lat = np.sin((rad[:, 0] - lat0) / 2.0)
    s_lon = np.sin((rad[:, 1] - lon0) / 2.0)
    h = s_lat**2 + math.cos(lat0) * np.cos(rad[:, 0]) * s_lon**2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def expected_duration(checkins_for_poi: Sequence[CheckIn]) -> float:
    if not checkins_for_poi:
        raise DataError("no observations for POI")
    poi = checkins_for_poi[0].poi
    if any(c.poi != poi for c in checkins_for_poi):
        raise DataError("check-ins for several POIs passed to expected_duration")
    return math.fsum(c.departure - c.arrival for c in checkins_for_poi) / len(checkins_for_poi)


@dataclass(frozen=True)
class TimeModel:
    pois: Mapping[int, Poi]
    duration_by_poi: Mapping[int, float]
    walk_speed: float = DEFAULT_WALK_SPEED
    _coords: dict = field(init=False, repr=False, compare=False)
    _transit_cache: dict = field(init=False, repr=False, compare=False)
    _advance_rows: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.walk_speed > 0:
            raise DataError("walk_speed must be positive")
        for pid, dur in self.duration_by_poi.items():
            if dur < 0 or not math.isfinite(dur):
                raise DataError(f"POI {pid}: invalid duration {dur}")
        object.__setattr__(self, "_coords", {pid: p.coords for pid, p in self.pois.items()})
        object.__setattr__(self, "_transit_cache", {})
        object.__setattr__(self, "_advance_rows", {})

    @classmethod
    def from_checkins(
        cls, pois: Iterable[Poi], checkins: Iterable[CheckIn], walk_speed: float = DEFAULT_WALK_SPEED
    ) -> "TimeModel":
        by_poi: dict[int, list[CheckIn]] = {}
        for c in checkins:
            by_poi.setdefault(c.poi, []).append(c)
        durations = {pid: expected_duration(cs) for pid, cs in by_poi.items()}
        return cls({p.id: p for p in pois}, durations, walk_speed)

    def duration(self, poi: int) -> float:
        try:
            return float(self.duration_by_poi[poi])
        except KeyError:
            raise DataError(f"unknown POI in time model: {poi}") from None

    def _xy(self, poi: int) -> Coords:
        try:
            return self._coords[poi]
        except KeyError:
            raise DataError(f"unknown POI in time model: {poi}") from None

    def transit(self, a: int, b: int) -> float:
        if a == b:
            return 0.0
        key = (a, b) if a < b else (b, a)
        cached = self._transit_cache.get(key)
        if cached is None:
            # memo of a pure function; bounded so huge worlds do not grow it forever
            if len(self._transit_cache) >= TRANSIT_CACHE_LIMIT:
                self._transit_cache.clear()
            cached = haversine_distance(self._xy(a), self._xy(b)) / self.walk_speed
            self._transit_cache[key] = cached
        return cached

    def advance(self, prev: int, nxt: int) -> float:
        return self.duration(nxt) + self.transit(prev, nxt)

    def advance_row(self, prev: int, pois: Sequence[int]) -> np.ndarray:
        """Advance cost from ``prev`` to every POI in ``pois``, bit-identical to :meth:`advance`."""
        row = self._advance_rows.get(prev)
        if row is None:
            if len(self._advance_rows) >= ADVANCE_ROW_LIMIT:
                self._advance_rows.clear()
            row = self._advance_rows[prev] = {}
        try:
            return np.fromiter(map(row.__getitem__, pois), dtype=np.float64, count=len(pois))
        except KeyError:
            for p in pois:
                if p not in row:
                    row[p] = self.advance(prev, p)
            return np.fromiter(map(row.__getitem__, pois), dtype=np.float64, count=len(pois))

    def trip_time(self, pois: Sequence[int]) -> float:
        pois = list(pois)
        total = self.duration(pois[0])
        for a, b in zip(pois, pois[1:]):
            total += self.advance(a, b)
        return total


def _poi_id(p: Poi | int) -> int:
    return p.id if isinstance(p, Poi) else int(p)


def transit_time(src: Poi | int, dst: Poi | int, tm: TimeModel) -> float:
    return tm.transit(_poi_id(src), _poi_id(dst))


def advance_cost(prev: Poi | int, nxt: Poi | int, tm: TimeModel) -> float:
    """Stay at ``nxt`` plus the walk from ``prev`` to it."""
    return tm.advance(_poi_id(prev), _poi_id(nxt))


def trip_time(trip: Trip | Sequence[int], tm: TimeModel) -> float:
    pois = trip.pois if isinstance(trip, Trip) else trip
    return tm.trip_time(pois)
