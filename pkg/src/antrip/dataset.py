"""Check-in ingestion, trip extraction, splits, synthetic worlds and corpus I/O."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from antrip.errors import DataError
from antrip.geo import CheckIn, Poi, TimeModel, Trip, distances_from

log = logging.getLogger(__name__)

CHECKIN_HEADER = ["user_id", "poi_id", "lat", "lon", "category", "arrival_ts", "departure_ts"]
LAST_STOP_S = 1800.0
TRIP_GAP_S = 18000.0
TRAIN_BUDGET_SLACK = 1.05


@dataclass(frozen=True)
class CheckInRecord:
    user_id: str
    poi_id: str
    lat: float
    lon: float
    category: str
    arrival_ts: int
    departure_ts: int | None = None
    # set by estimate_departures; estimated departures do not count as observed gaps
    estimated: bool = False


@dataclass
class Corpus:
    pois: list[Poi]
    trips: list[Trip]
    time_model: TimeModel
    split: tuple[list[int], list[int], list[int]] = field(default_factory=lambda: ([], [], []))

    def __post_init__(self):
        known = {p.id for p in self.pois}
        for t in self.trips:
            missing = [p for p in t.pois if p not in known]
            if missing:
                raise DataError(f"trip references unknown POIs {missing}")

    def _subset(self, idx: list[int]) -> list[Trip]:
        return [self.trips[i] for i in idx]

    @property
    def train(self) -> list[Trip]:
        return self._subset(self.split[0])

    @property
    def validation(self) -> list[Trip]:
        return self._subset(self.split[1])

    @property
    def test(self) -> list[Trip]:
        return self._subset(self.split[2])

    @property
    def users(self) -> list[int]:
        return sorted({t.user for t in self.trips})


# --------------------------------------------------------------------------- parsing


def parse_checkins(path: str | Path) -> list[CheckInRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"check-in file not found: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CHECKIN_HEADER:
            raise DataError(f"{path}: missing or wrong header, expected {','.join(CHECKIN_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CHECKIN_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(CHECKIN_HEADER)} fields, got {len(row)}")
            user, poi, lat, lon, cat, arr, dep = (c.strip() for c in row)
            try:
                rec = CheckInRecord(
                    user_id=user,
                    poi_id=poi,
                    lat=float(lat),
                    lon=float(lon),
                    category=cat,
                    arrival_ts=int(arr),
                    departure_ts=int(dep) if dep else None,
                )
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if rec.arrival_ts <= 0:
                raise DataError(f"{path}:{lineno}: arrival_ts must be positive")
            if rec.departure_ts is not None and rec.departure_ts < rec.arrival_ts:
                raise DataError(f"{path}:{lineno}: departure_ts before arrival_ts")
            if not (-90 <= rec.lat <= 90 and -180 <= rec.lon <= 180):
                raise DataError(f"{path}:{lineno}: coordinates out of range")
            records.append(rec)
    return records


def _by_user(records: Sequence[CheckInRecord]) -> dict[str, list[CheckInRecord]]:
    groups: dict[str, list[CheckInRecord]] = {}
    for r in records:
        groups.setdefault(r.user_id, []).append(r)
    for rs in groups.values():
        rs.sort(key=lambda r: r.arrival_ts)
    return groups


def _gap_reference(r: CheckInRecord) -> int:
    # observed departures bound the gap; otherwise successive arrivals do
    if r.departure_ts is not None and not r.estimated:
        return r.departure_ts
    return r.arrival_ts


def estimate_departures(
    records: Sequence[CheckInRecord], last_stop_s: float = LAST_STOP_S, gap_s: float = TRIP_GAP_S
) -> list[CheckInRecord]:
    """Fill missing departures: next arrival inside a trip, else arrival + ``last_stop_s``.

    Returns records grouped per user in arrival order.
    """
    out = []
    for rs in _by_user(records).values():
        for k, r in enumerate(rs):
            if r.departure_ts is not None:
                out.append(r)
                continue
            nxt = rs[k + 1] if k + 1 < len(rs) else None
            if nxt is not None and nxt.arrival_ts - r.arrival_ts <= gap_s:
                dep = nxt.arrival_ts
            else:
                dep = r.arrival_ts + int(last_stop_s)
            out.append(replace(r, departure_ts=dep, estimated=True))
    return out


def segment_checkins(
    records: Sequence[CheckInRecord],
    gap_s: float = TRIP_GAP_S,
    mode: str = "gap",
    utc_offset_s: int = 0,
) -> list[list[CheckInRecord]]:
    """Group each user's check-ins into trips; repeated consecutive POIs are merged."""
    if mode not in ("gap", "calendar-day", "day"):
        raise DataError(f"unknown split mode {mode!r}")
    segments = []
    for rs in _by_user(records).values():
        current: list[CheckInRecord] = []
        for r in rs:
            if current:
                prev = current[-1]
                if mode == "gap":
                    new_trip = r.arrival_ts - _gap_reference(prev) > gap_s
                else:
                    new_trip = (r.arrival_ts + utc_offset_s) // 86400 != (
                        current[0].arrival_ts + utc_offset_s
                    ) // 86400
                if new_trip:
                    segments.append(current)
                    current = []
            if current and current[-1].poi_id == r.poi_id:
                prev = current[-1]
                dep = max(d for d in (prev.departure_ts, r.departure_ts, r.arrival_ts) if d is not None)
                current[-1] = replace(prev, departure_ts=dep)
                continue
            current.append(r)
        if current:
            segments.append(current)
    return segments


def _drop_revisits(seg: list[CheckInRecord]) -> list[CheckInRecord]:
    # non-consecutive revisits inside one trip keep the first visit only
    seen, kept = set(), []
    for r in seg:
        if r.poi_id not in seen:
            seen.add(r.poi_id)
            kept.append(r)
    return kept


class _Interner:
    def __init__(self):
        self.ids: dict[str, int] = {}

    def __call__(self, key: str) -> int:
        return self.ids.setdefault(key, len(self.ids))


def split_into_trips(
    records: Sequence[CheckInRecord],
    gap_s: float = TRIP_GAP_S,
    mode: str = "gap",
    utc_offset_s: int = 0,
) -> list[Trip]:
    """Trips with integer ids assigned in order of first appearance of users and POIs."""
    users, pois = _Interner(), _Interner()
    for r in records:
        users(r.user_id)
        pois(r.poi_id)
    trips = []
    for seg in segment_checkins(records, gap_s, mode, utc_offset_s):
        seg = _drop_revisits(seg)
        trips.append(
            Trip(
                pois=tuple(pois(r.poi_id) for r in seg),
                user=users(seg[0].user_id),
                start_ts=float(seg[0].arrival_ts),
            )
        )
    return trips


def filter_corpus(trips: Sequence[Trip], min_len: int = 3, min_users_per_poi: int = 5) -> list[Trip]:
    """Drop rarely visited POIs from every trip, then drop short trips (single pass)."""
    users_at: dict[int, set[int]] = {}
    for t in trips:
        for p in t.pois:
            users_at.setdefault(p, set()).add(t.user)
    keep = {p for p, us in users_at.items() if len(us) >= min_users_per_poi}
    out = []
    for t in trips:
        pois = tuple(p for p in t.pois if p in keep)
        if len(pois) >= min_len:
            out.append(replace(t, pois=pois))
    return out


def chronological_split(trips: Sequence[Trip]) -> tuple[list[int], list[int], list[int]]:
    """Indices of the train/validation/test trips, by start time (80/10/10, floors)."""
    n = len(trips)
    if n < 10:
        raise DataError("corpus too small to split")
    order = sorted(range(n), key=lambda i: trips[i].start_ts)
    n_train, n_val = (8 * n) // 10, n // 10
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def ingest(
    path: str | Path,
    mode: str = "gap",
    gap_s: float = TRIP_GAP_S,
    last_stop_s: float = LAST_STOP_S,
    min_len: int = 3,
    min_users_per_poi: int = 5,
    utc_offset_s: int = 0,
    walk_speed: float = 2.0,
) -> Corpus:
    """parse -> estimate departures -> split -> filter -> chronological split."""
    records = estimate_departures(parse_checkins(path), last_stop_s, gap_s)
    users, poi_ids = _Interner(), _Interner()
    meta: dict[int, Poi] = {}
    cat_ids = _Interner()
    for r in records:
        users(r.user_id)
        pid = poi_ids(r.poi_id)
        if pid not in meta:
            meta[pid] = Poi(pid, r.lat, r.lon, cat_ids(r.category))
    checkins, trips = [], []
    for seg in segment_checkins(records, gap_s, mode, utc_offset_s):
        for r in seg:
            checkins.append(CheckIn(users(r.user_id), poi_ids(r.poi_id), r.arrival_ts, r.departure_ts))
        seg = _drop_revisits(seg)
        trips.append(
            Trip(tuple(poi_ids(r.poi_id) for r in seg), users(seg[0].user_id), float(seg[0].arrival_ts))
        )
    pois = [meta[i] for i in sorted(meta)]
    tm = TimeModel.from_checkins(pois, checkins, walk_speed)
    trips = filter_corpus(trips, min_len, min_users_per_poi)
    trips = [replace(t, budget_s=tm.trip_time(t.pois)) for t in trips]
    log.info("ingested %d check-ins into %d trips", len(records), len(trips))
    return Corpus(pois, trips, tm, chronological_split(trips))


# --------------------------------------------------------------------------- synthetic worlds


@dataclass
class SyntheticWorldConfig:
    n_pois: int = 100
    n_categories: int = 8
    grid_extent_m: float = 4000.0
    transition_concentration: float = 8.0
    mean_duration_s: tuple[float, ...] = (1800.0, 2700.0, 3600.0, 1200.0)
    n_trips: int = 2000
    budget_range_s: tuple[float, float] = (3 * 3600.0, 6 * 3600.0)
    rng_seed: int = 0
    n_users: int = 50
    distance_scale_m: float = 200.0
    min_trip_len: int = 3
    walk_speed: float = 2.0
    origin: tuple[float, float] = (40.75, -73.98)

    def __post_init__(self):
        if not self.n_pois >= self.n_categories >= 2:
            raise DataError("need n_pois >= n_categories >= 2")
        lo, hi = self.budget_range_s
        if not 0 < lo <= hi:
            raise DataError("budget_range_s must be positive and ordered")
        if self.transition_concentration <= 0:
            raise DataError("transition_concentration must be positive")

    def category_duration(self, c: int) -> float:
        durs = self.mean_duration_s
        return float(durs[c % len(durs)])


def planted_transitions(n_categories: int, concentration: float, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic category transition matrix peaked on one successor per category."""
    base = rng.dirichlet(np.ones(n_categories), size=n_categories)
    # a derangement: category i prefers successor succ[i] != i
    while True:
        succ = rng.permutation(n_categories)
        if np.all(succ != np.arange(n_categories)):
            break
    if math.isinf(concentration):
        mat = np.zeros((n_categories, n_categories))
        mat[np.arange(n_categories), succ] = 1.0
        return mat
    logits = np.log(base)
    logits[np.arange(n_categories), succ] += concentration
    logits -= logits.max(axis=1, keepdims=True)
    mat = np.exp(logits)
    return mat / mat.sum(axis=1, keepdims=True)


def _meters_to_degrees(origin: tuple[float, float], dx: np.ndarray, dy: np.ndarray):
    lat0 = origin[0]
    lat = lat0 + np.degrees(dy / 6_371_000.0)
    lon = origin[1] + np.degrees(dx / (6_371_000.0 * math.cos(math.radians(lat0))))
    return lat, lon


def generate_synthetic_world(cfg: SyntheticWorldConfig, max_attempts_per_trip: int = 50) -> Corpus:
    rng = np.random.default_rng(cfg.rng_seed)
    min_dur = min(cfg.category_duration(c) for c in range(cfg.n_categories))
    if cfg.budget_range_s[0] < min_dur:
        raise DataError("infeasible budget range: minimum budget below every category duration")

    cats = np.concatenate(
        [np.arange(cfg.n_categories), rng.integers(0, cfg.n_categories, cfg.n_pois - cfg.n_categories)]
    )
    rng.shuffle(cats)
    dx = rng.uniform(0.0, cfg.grid_extent_m, cfg.n_pois)
    dy = rng.uniform(0.0, cfg.grid_extent_m, cfg.n_pois)
    lat, lon = _meters_to_degrees(cfg.origin, dx, dy)
    pois = [Poi(i, float(lat[i]), float(lon[i]), int(cats[i])) for i in range(cfg.n_pois)]
    tm = TimeModel(
        {p.id: p for p in pois},
        {p.id: cfg.category_duration(p.category) for p in pois},
        cfg.walk_speed,
    )
    trans = planted_transitions(cfg.n_categories, cfg.transition_concentration, rng)
    coords = np.array([p.coords for p in pois])
    durations = np.array([tm.duration(p.id) for p in pois])

    trips = []
    t0 = 1_600_000_000.0
    attempts = 0
    while len(trips) < cfg.n_trips:
        attempts += 1
        if attempts > max_attempts_per_trip * cfg.n_trips:
            raise DataError("synthetic world too constrained: could not sample enough trips")
        budget = float(rng.uniform(*cfg.budget_range_s))
        startable = np.flatnonzero(durations <= budget)
        cur = int(rng.choice(startable))
        seq, elapsed = [cur], tm.duration(cur)
        visited = np.zeros(cfg.n_pois, dtype=bool)
        visited[cur] = True
        while True:
            adv = tm.advance_row(cur, range(cfg.n_pois))
            ok = ~visited & (elapsed + adv <= budget)
            dist = distances_from(pois[cur].coords, coords)
            w = trans[pois[cur].category, cats] * np.exp(-dist / cfg.distance_scale_m) * ok
            total = w.sum()
            if not total > 0:
                break
            cur = int(rng.choice(cfg.n_pois, p=w / total))
            seq.append(cur)
            elapsed += adv[cur]
            visited[cur] = True
        if len(seq) < cfg.min_trip_len:
            continue
        trips.append(
            Trip(tuple(seq), int(rng.integers(cfg.n_users)), t0 + 3600.0 * len(trips), budget)
        )
    return Corpus(pois, trips, tm, chronological_split(trips))


# --------------------------------------------------------------------------- persistence


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "pois.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lat", "lon", "category"])
        for p in corpus.pois:
            w.writerow([p.id, repr(p.lat), repr(p.lon), p.category])
    with (out / "trips.jsonl").open("w") as fh:
        for t in corpus.trips:
            budget = t.budget_s if t.budget_s is not None else corpus.time_model.trip_time(t.pois)
            row = {"user": t.user, "poi_ids": list(t.pois), "start_ts": t.start_ts, "budget_s": budget}
            fh.write(json.dumps(row) + "\n")
    with (out / "time_model.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["poi_id", "duration_s"])
        for pid in sorted(corpus.time_model.duration_by_poi):
            w.writerow([pid, repr(float(corpus.time_model.duration_by_poi[pid]))])
    train, val, test = corpus.split
    (out / "split.json").write_text(
        json.dumps({"train": train, "validation": val, "test": test, "walk_speed": corpus.time_model.walk_speed})
        + "\n"
    )


def load_corpus(in_dir: str | Path) -> Corpus:
    src = Path(in_dir)
    needed = ["pois.csv", "trips.jsonl", "time_model.csv", "split.json"]
    missing = [n for n in needed if not (src / n).exists()]
    if missing:
        raise DataError(f"{src}: not a corpus directory (missing {', '.join(missing)})")
    try:
        with (src / "pois.csv").open(newline="") as fh:
            pois = [
                Poi(int(r["id"]), float(r["lat"]), float(r["lon"]), int(r["category"]))
                for r in csv.DictReader(fh)
            ]
        trips = []
        with (src / "trips.jsonl").open() as fh:
            for line in fh:
                if line.strip():
                    o = json.loads(line)
                    trips.append(Trip(tuple(o["poi_ids"]), int(o["user"]), float(o["start_ts"]), float(o["budget_s"])))
        with (src / "time_model.csv").open(newline="") as fh:
            durations = {int(r["poi_id"]): float(r["duration_s"]) for r in csv.DictReader(fh)}
        split = json.loads((src / "split.json").read_text())
    except (KeyError, ValueError) as exc:
        raise DataError(f"{src}: malformed corpus ({exc})") from None
    tm = TimeModel({p.id: p for p in pois}, durations, float(split.get("walk_speed", 2.0)))
    return Corpus(pois, trips, tm, (split["train"], split["validation"], split["test"]))


def training_query_budget(trip: Trip, tm: TimeModel) -> float:
    return tm.trip_time(trip.pois) * TRAIN_BUDGET_SLACK
