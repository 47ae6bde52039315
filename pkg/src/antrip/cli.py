"""Command-line front end.

Config files are flat ``key = value`` lines; ``#`` starts a comment.

synth keys: n_pois, n_categories, grid_extent_m, transition_concentration,
  mean_duration_s (comma list), n_trips, budget_range_s (lo,hi), rng_seed,
  n_users, distance_scale_m, min_trip_len, walk_speed, origin (lat,lon).
train keys: batch_size, pretrain_epochs, adv_epochs, batches_per_epoch,
  disc_pretrain_epochs, lr_pretrain, lr_adv, baseline_decay, baseline_enabled,
  teacher_forcing, rng_seed, n_candidates, d_model, n_heads, n_layers, d_ffn,
  poi_dim, category_dim, user_dim, max_len, disc_poi_dim, disc_hidden,
  eval_batch_size, record_timing.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from antrip.candidates import CandidateRetriever, build_hypergraph
from antrip.dataset import SyntheticWorldConfig, generate_synthetic_world, ingest, load_corpus, save_corpus
from antrip.errors import DataError
from antrip.evaluation import bench_latency, evaluate_model, evaluate_planner, latency_csv, pop_baseline
from antrip.generator import TripGenerator, generate_trip
from antrip.geo import TripQuery
from antrip.training import TrainConfig, coerce_fields, history_csv, train

log = logging.getLogger("antrip")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def _parse_sizes(raw: str) -> list[int]:
    try:
        sizes = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--sizes: expected comma-separated integers, got {raw!r}") from None
    if not sizes or min(sizes) < 2:
        raise UsageError("--sizes: need at least one size >= 2")
    return sizes


def _candidates_for(gen: TripGenerator, override: int | None, n_pois: int) -> int:
    n = override or int(getattr(gen, "checkpoint_meta", {}).get("n_candidates", 200))
    return min(n, n_pois)


def cmd_synth(args) -> None:
    values = coerce_fields(SyntheticWorldConfig, read_config(args.config))
    if args.seed is not None:
        values["rng_seed"] = args.seed
    corpus = generate_synthetic_world(SyntheticWorldConfig(**values))
    save_corpus(corpus, args.out)
    log.info("wrote %d POIs and %d trips to %s", len(corpus.pois), len(corpus.trips), args.out)


def cmd_ingest(args) -> None:
    corpus = ingest(
        args.checkins, args.mode, min_len=args.min_len, min_users_per_poi=args.min_users,
        utc_offset_s=args.utc_offset,
    )
    if not corpus.trips:
        raise DataError("no trips survive filtering")
    save_corpus(corpus, args.out)
    log.info("wrote %d POIs and %d trips to %s", len(corpus.pois), len(corpus.trips), args.out)


def cmd_train(args) -> None:
    corpus = load_corpus(args.corpus)
    cfg = TrainConfig.from_dict(read_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    result = train(corpus, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_cand = min(cfg.n_candidates, len(corpus.pois))
    result.generator.save(out / "generator.ant", n_candidates=n_cand)
    result.discriminator.save(out / "discriminator.ant")
    (out / "metrics.csv").write_text(history_csv(result.history))
    log.info("best validation HR %.4f; checkpoints in %s", result.best_val_hr, out)


def cmd_evaluate(args) -> None:
    corpus = load_corpus(args.corpus)
    gen = TripGenerator.load(args.ckpt)
    trips = corpus.test if args.split == "test" else corpus.validation
    n = _candidates_for(gen, args.n_candidates, len(corpus.pois))
    retriever = CandidateRetriever(build_hypergraph(corpus.train), corpus.pois, n)
    tm = corpus.time_model
    report = evaluate_model(gen, trips, retriever, tm)
    Path(args.out).write_text(report.to_csv())
    log.info("ANT: HR %.4f OSP %.4f over %d queries", report.hr_mean, report.osp_mean, report.n_queries)
    if args.baseline_out:
        pop = evaluate_planner(pop_baseline(corpus.train, tm, gen.cfg.max_len), trips, retriever, tm)
        Path(args.baseline_out).write_text(pop.to_csv())
        log.info("POP: HR %.4f OSP %.4f", pop.hr_mean, pop.osp_mean)


def cmd_recommend(args) -> None:
    corpus = load_corpus(args.corpus)
    gen = TripGenerator.load(args.ckpt)
    n = _candidates_for(gen, args.n_candidates, len(corpus.pois))
    retriever = CandidateRetriever(build_hypergraph(corpus.train), corpus.pois, n)
    q = TripQuery(args.user, args.start, args.budget)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    rollout = generate_trip(q, retriever(q), gen, corpus.time_model, args.mode, rng=rng)
    sys.stdout.write(rollout.to_json(q) + "\n")


def cmd_bench(args) -> None:
    corpus = load_corpus(args.corpus)
    gen = TripGenerator.load(args.ckpt)
    sizes = _parse_sizes(args.sizes)
    if max(sizes) > len(corpus.pois):
        raise DataError(f"world has {len(corpus.pois)} POIs, fewer than the requested size {max(sizes)}")
    trips = corpus.test or corpus.trips
    rows = bench_latency(gen, trips, corpus.pois, build_hypergraph(corpus.train), corpus.time_model, sizes, args.reps)
    text = latency_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="antrip", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="overrides rng_seed / sampling seed")
        sp.add_argument("--workers", type=int, default=1, help="torch intra-op threads (1 = bit-exact)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common(sub.add_parser("synth", help="write a synthetic corpus"))
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("ingest", help="build a corpus from a check-in CSV"))
    sp.add_argument("--checkins", required=True)
    sp.add_argument("--mode", choices=["gap", "day", "calendar-day"], default="gap")
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-len", type=int, default=3)
    sp.add_argument("--min-users", type=int, default=5)
    sp.add_argument("--utc-offset", type=int, default=0, help="seconds, for day mode")
    sp.set_defaults(func=cmd_ingest)

    sp = common(sub.add_parser("train", help="train generator and discriminator"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("evaluate", help="HR/OSP report on the test split"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=["test", "validation"], default="test")
    sp.add_argument("--n-candidates", type=int)
    sp.add_argument("--baseline-out", help="also write a POP baseline report here")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("recommend", help="print one recommended trip as JSON"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--user", type=int, required=True)
    sp.add_argument("--start", type=int, required=True)
    sp.add_argument("--budget", type=float, required=True, help="seconds")
    sp.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    sp.add_argument("--n-candidates", type=int)
    sp.set_defaults(func=cmd_recommend)

    sp = common(sub.add_parser("bench", help="greedy latency per candidate-set size"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--sizes", default="50,100,200,400")
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    torch.set_num_threads(args.workers)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"antrip: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"antrip: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        # bad config values
        print(f"antrip: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
