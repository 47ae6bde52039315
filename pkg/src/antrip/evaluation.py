"""HR / OSP metrics, model evaluation, the POP baseline and latency benchmarking."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
import torch

from antrip.candidates import CandidateRetriever, CandidateSet
from antrip.errors import DataError
from antrip.generator import TripGenerator, decode
from antrip.geo import TimeModel, Trip, TripQuery

Planner = Callable[[TripQuery, CandidateSet], Trip]


def _check_pair(recommended: Trip, real: Trip) -> None:
    if len(real) < 2:
        raise DataError("degenerate reference trip")
    if recommended.pois[0] != real.pois[0]:
        raise DataError("recommended and real trips start at different POIs")


def hit_ratio(recommended: Trip, real: Trip) -> float:
    _check_pair(recommended, real)
    shared = len(set(recommended.pois) & set(real.pois))
    return (shared - 1) / (len(real) - 1)


def osp(recommended: Trip, real: Trip) -> float:
    """Share of ordered pairs in the overlap (taken in recommended order) that keep the real order."""
    _check_pair(recommended, real)
    pos = {p: i for i, p in enumerate(real.pois)}
    overlap = [p for p in recommended.pois[1:] if p in pos]
    pairs = len(overlap) * (len(overlap) - 1) // 2
    if pairs == 0:
        return 0.0
    matched = sum(1 for a, b in combinations(overlap, 2) if pos[a] < pos[b])
    return matched / pairs


@dataclass
class QueryResult:
    query_id: int
    hr: float
    osp: float
    latency_ms: float


@dataclass
class EvalReport:
    per_query: list[QueryResult] = field(default_factory=list)

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    @property
    def hr_mean(self) -> float:
        return math.fsum(r.hr for r in self.per_query) / max(1, self.n_queries)

    @property
    def osp_mean(self) -> float:
        return math.fsum(r.osp for r in self.per_query) / max(1, self.n_queries)

    @property
    def latency_mean_ms(self) -> float:
        return math.fsum(r.latency_ms for r in self.per_query) / max(1, self.n_queries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "hr", "osp", "latency_ms"])
        for r in self.per_query:
            w.writerow([r.query_id, repr(r.hr), repr(r.osp), f"{r.latency_ms:.3f}"])
        w.writerow(["mean", repr(self.hr_mean), repr(self.osp_mean), f"{self.latency_mean_ms:.3f}"])
        return buf.getvalue()


def evaluation_query(trip: Trip, tm: TimeModel) -> TripQuery:
    return TripQuery(trip.user, trip.start, tm.trip_time(trip.pois))


def evaluate_planner(
    planner: Planner, trips: Sequence[Trip], retriever: CandidateRetriever, tm: TimeModel
) -> EvalReport:
    if not trips:
        raise DataError("nothing to evaluate: empty split")
    report = EvalReport()
    for i, real in enumerate(trips):
        t0 = time.perf_counter()
        q = evaluation_query(real, tm)
        rec = planner(q, retriever(q))
        latency = (time.perf_counter() - t0) * 1000.0
        report.per_query.append(QueryResult(i, hit_ratio(rec, real), osp(rec, real), latency))
    return report


def model_planner(gen: TripGenerator, tm: TimeModel, mode: str = "greedy", seed: int = 0) -> Planner:
    rng = np.random.default_rng(seed)

    def plan(q: TripQuery, cand: CandidateSet) -> Trip:
        with torch.no_grad():
            return decode(gen, [q], [cand], tm, mode, rng).rollouts[0].trip

    return plan


def evaluate_model(
    gen: TripGenerator,
    trips: Sequence[Trip],
    retriever: CandidateRetriever,
    tm: TimeModel,
    mode: str = "greedy",
    batch_size: int = 1,
) -> EvalReport:
    """Greedy evaluation on real trips with budget T(real).

    ``batch_size > 1`` decodes several queries together; latency is then the batch time split evenly.
    """
    was_training = gen.training
    gen.eval()
    try:
        if batch_size <= 1:
            return evaluate_planner(model_planner(gen, tm, mode), trips, retriever, tm)
        if not trips:
            raise DataError("nothing to evaluate: empty split")
        report = EvalReport()
        rng = np.random.default_rng(0)
        for lo in range(0, len(trips), batch_size):
            chunk = trips[lo : lo + batch_size]
            t0 = time.perf_counter()
            qs = [evaluation_query(t, tm) for t in chunk]
            with torch.no_grad():
                out = decode(gen, qs, [retriever(q) for q in qs], tm, mode, rng)
            each = (time.perf_counter() - t0) * 1000.0 / len(chunk)
            for k, (real, r) in enumerate(zip(chunk, out.rollouts)):
                report.per_query.append(QueryResult(lo + k, hit_ratio(r.trip, real), osp(r.trip, real), each))
        return report
    finally:
        gen.train(was_training)


class PopPlanner:
    """Greedy popularity planner: most visited feasible unvisited candidate first (ties: lower id)."""

    def __init__(self, train_trips: Sequence[Trip], tm: TimeModel, max_len: int | None = None):
        if not train_trips:
            raise DataError("POP baseline needs a non-empty training split")
        self.counts = Counter(p for t in train_trips for p in t.pois)
        self.tm = tm
        self.max_len = max_len

    def __call__(self, q: TripQuery, cand: CandidateSet) -> Trip:
        ranked = sorted(cand.pois[1:], key=lambda p: (-self.counts.get(p, 0), p))
        seq = [q.start]
        elapsed = self.tm.duration(q.start)
        if elapsed > q.budget:
            raise DataError("infeasible query: budget below the stay at the start POI")
        remaining = list(ranked)
        while remaining and (self.max_len is None or len(seq) < self.max_len):
            for p in remaining:
                cost = self.tm.advance(seq[-1], p)
                if elapsed + cost <= q.budget:
                    elapsed += cost
                    seq.append(p)
                    remaining.remove(p)
                    break
            else:
                break
        return Trip(tuple(seq), q.user)


def pop_baseline(train_trips: Sequence[Trip], tm: TimeModel, max_len: int | None = None) -> PopPlanner:
    return PopPlanner(train_trips, tm, max_len)


@dataclass
class LatencyRow:
    n: int
    median_ms: float
    p95_ms: float


def bench_latency(
    gen: TripGenerator,
    trips: Sequence[Trip],
    world,
    graph,
    tm: TimeModel,
    sizes: Sequence[int] = (50, 100, 200, 400),
    reps: int = 20,
) -> list[LatencyRow]:
    """Single-query greedy latency including candidate construction, per candidate-set size."""
    if not trips:
        raise DataError("no queries to benchmark")
    gen.eval()
    queries = [evaluation_query(t, tm) for t in trips]
    rows = []
    for n in sizes:
        retriever = CandidateRetriever(graph, world, n)
        # warm-up outside the timed region
        with torch.no_grad():
            decode(gen, [queries[0]], [retriever(queries[0])], tm)
        times = []
        for r in range(reps):
            q = queries[r % len(queries)]
            retriever.clear_cache()
            t0 = time.perf_counter()
            with torch.no_grad():
                decode(gen, [q], [retriever(q)], tm)
            times.append((time.perf_counter() - t0) * 1000.0)
        times.sort()
        p95 = times[min(len(times) - 1, math.ceil(0.95 * len(times)) - 1)]
        rows.append(LatencyRow(n, statistics.median(times), p95))
    return rows


def latency_csv(rows: Sequence[LatencyRow]) -> str:
    lines = ["n_candidates,median_ms,p95_ms"]
    lines += [f"{r.n},{r.median_ms:.4f},{r.p95_ms:.4f}" for r in rows]
    return "\n".join(lines) + "\n"
