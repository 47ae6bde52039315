"""Demonstration pre-training, adversarial REINFORCE updates and teacher forcing."""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from torch import Tensor

from antrip import nn as ann
from antrip.candidates import CandidateRetriever, CandidateSet, build_hypergraph
from antrip.dataset import Corpus, training_query_budget
from antrip.discriminator import DiscriminatorConfig, TripDiscriminator, discriminator_loss
from antrip.errors import DataError
from antrip.evaluation import evaluate_model
from antrip.generator import GeneratorConfig, TripGenerator, decode
from antrip.geo import TimeModel, Trip, TripQuery

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "phase", "loss", "mean_reward", "val_hr", "val_osp", "seconds"]


@dataclass
class TrainConfig:
    batch_size: int = 32
    pretrain_epochs: int = 10
    adv_epochs: int = 2
    batches_per_epoch: int = 10
    disc_pretrain_epochs: int = 3
    lr_pretrain: float = 1e-4
    lr_adv: float = 1e-5
    baseline_decay: float = 0.9
    baseline_enabled: bool = True
    teacher_forcing: bool = True
    rng_seed: int = 0
    n_candidates: int = 200
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 64
    poi_dim: int = 64
    category_dim: int = 16
    user_dim: int = 64
    max_len: int = 20
    disc_poi_dim: int = 64
    disc_hidden: int = 64
    eval_batch_size: int = 64
    record_timing: bool = False

    def __post_init__(self):
        if self.lr_pretrain <= 0 or self.lr_adv <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(
            batch_size=512, d_model=256, n_heads=8, n_layers=6, d_ffn=256, poi_dim=256,
            category_dim=32, user_dim=256, disc_poi_dim=256, disc_hidden=256, n_candidates=200,
        )
        return cls(**{**base, **overrides})

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers, d_ffn=self.d_ffn,
            poi_dim=self.poi_dim, category_dim=self.category_dim, user_dim=self.user_dim,
            max_len=self.max_len,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(poi_dim=self.disc_poi_dim, hidden=self.disc_hidden)

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TrainConfig":
        return cls(**coerce_fields(cls, values))


def coerce_fields(cls, values: dict[str, str]) -> dict:
    """Convert flat ``key = value`` strings to the dataclass field types of ``cls``."""
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in kinds:
            raise ValueError(f"unknown config key {key!r}")
        kind = str(kinds[key])
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{key}: expected a boolean, got {raw!r}")
            out[key] = low in ("true", "1", "yes")
        elif kind == "int":
            out[key] = int(raw)
        elif kind == "float":
            out[key] = float(raw)
        elif kind.startswith("tuple"):
            out[key] = tuple(float(x) for x in raw.split(",") if x.strip())
        else:
            out[key] = raw
    return out


@dataclass
class Example:
    query: TripQuery
    cand: CandidateSet
    trip: Trip


def make_examples(trips: Sequence[Trip], retriever: CandidateRetriever, tm: TimeModel) -> list[Example]:
    """Training instances: budget T(real) * 1.05, candidates augmented with the real POIs."""
    out = []
    for t in trips:
        q = TripQuery(t.user, t.start, training_query_budget(t, tm))
        cand = retriever.augment(retriever(q), t)
        out.append(Example(q, cand, t))
    return out


@dataclass
class RewardBaseline:
    decay: float = 0.9
    enabled: bool = True
    ema: float | None = None

    def value(self, rewards: np.ndarray) -> float:
        if not self.enabled:
            return 0.0
        if self.ema is None:
            self.ema = float(rewards.mean())
        return self.ema

    def update(self, rewards: np.ndarray) -> None:
        if self.enabled:
            self.ema = self.decay * self.ema + (1.0 - self.decay) * float(rewards.mean())


def _unzip(batch: Sequence[Example]):
    return [e.query for e in batch], [e.cand for e in batch], [e.trip for e in batch]


def supervised_loss(gen: TripGenerator, batch: Sequence[Example], tm: TimeModel, rng: np.random.Generator):
    """Mean over trips of -sum_t log p(real_t | sampled prefix); also returns the number of terms."""
    qs, cands, trips = _unzip(batch)
    out = decode(gen, qs, cands, tm, "sample", rng, targets=trips)
    return out.target_nll.mean(), sum(out.target_terms)


def pretrain_generator_step(
    gen: TripGenerator,
    opt: torch.optim.Optimizer,
    batch: Sequence[Example],
    tm: TimeModel,
    rng: np.random.Generator,
) -> float:
    gen.train()
    loss, _ = supervised_loss(gen, batch, tm, rng)
    if loss.requires_grad:
        ann.adam_step(opt, loss)
    ann.assert_finite(gen)
    return loss.item()


# teacher forcing runs the same update, the caller points ``opt`` at the adversarial learning rate
teacher_forcing_step = pretrain_generator_step


def policy_gradient_loss(
    gen: TripGenerator,
    disc: TripDiscriminator | None,
    batch: Sequence[Example],
    tm: TimeModel,
    baseline: RewardBaseline,
    rng: np.random.Generator,
    reward_fn: Callable[[list[Trip]], np.ndarray] | None = None,
) -> tuple[Tensor, np.ndarray]:
    """REINFORCE surrogate -mean((r - b) * log p(S|q)) over sampled trips, and the rewards.

    The discriminator score of the whole trip is the terminal reward unless ``reward_fn`` is given.
    """
    qs, cands, _ = _unzip(batch)
    out = decode(gen, qs, cands, tm, "sample", rng)
    trips = [r.trip for r in out.rollouts]
    if reward_fn is not None:
        rewards = np.asarray(reward_fn(trips), dtype=np.float64)
    else:
        disc.eval()
        with torch.no_grad():
            rewards = disc.score(trips).numpy()
    advantage = torch.from_numpy(rewards - baseline.value(rewards))
    return -(advantage * out.log_prob).mean(), rewards


def policy_gradient_step(
    gen: TripGenerator,
    disc: TripDiscriminator | None,
    opt: torch.optim.Optimizer,
    batch: Sequence[Example],
    tm: TimeModel,
    baseline: RewardBaseline,
    rng: np.random.Generator,
    reward_fn: Callable[[list[Trip]], np.ndarray] | None = None,
) -> float:
    """One REINFORCE update with the discriminator held fixed; returns the mean reward."""
    gen.train()
    loss, rewards = policy_gradient_loss(gen, disc, batch, tm, baseline, rng, reward_fn)
    if loss.requires_grad:
        ann.adam_step(opt, loss)
    baseline.update(rewards)
    ann.assert_finite(gen)
    return float(rewards.mean())


def generate_fakes(
    gen: TripGenerator, batch: Sequence[Example], tm: TimeModel, rng: np.random.Generator
) -> list[Trip]:
    was_training = gen.training
    gen.eval()
    try:
        qs, cands, _ = _unzip(batch)
        with torch.no_grad():
            return [r.trip for r in decode(gen, qs, cands, tm, "sample", rng).rollouts]
    finally:
        gen.train(was_training)


def discriminator_step(
    disc: TripDiscriminator, opt: torch.optim.Optimizer, real: Sequence[Trip], fake: Sequence[Trip]
) -> float:
    disc.train()
    loss = discriminator_loss(real, fake, disc)
    ann.adam_step(opt, loss)
    ann.assert_finite(disc)
    return loss.item()


def update_discriminator(
    gen: TripGenerator,
    disc: TripDiscriminator,
    opt: torch.optim.Optimizer,
    batch: Sequence[Example],
    tm: TimeModel,
    rng: np.random.Generator,
) -> float:
    fakes = generate_fakes(gen, batch, tm, rng)
    return discriminator_step(disc, opt, [e.trip for e in batch], fakes)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


@dataclass
class HistoryRow:
    epoch: int
    phase: str
    loss: float | None = None
    mean_reward: float | None = None
    val_hr: float | None = None
    val_osp: float | None = None
    seconds: float | None = None

    def cells(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.epoch), self.phase, fmt(self.loss), fmt(self.mean_reward),
                fmt(self.val_hr), fmt(self.val_osp),
                "" if self.seconds is None else f"{self.seconds:.3f}"]


def history_csv(rows: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


@dataclass
class TrainResult:
    generator: TripGenerator
    discriminator: TripDiscriminator
    history: list[HistoryRow] = field(default_factory=list)
    best_val_hr: float = float("-inf")
    retriever: CandidateRetriever | None = None
    # generator parameters at the end of demonstration pre-training
    pretrained_state: dict | None = None


def _batches(examples: Sequence[Example], size: int, rng: np.random.Generator) -> list[list[Example]]:
    order = rng.permutation(len(examples))
    return [[examples[i] for i in order[lo : lo + size]] for lo in range(0, len(examples), size)]


def _cycle(examples: Sequence[Example], size: int, rng: np.random.Generator) -> Iterator[list[Example]]:
    while True:
        yield from _batches(examples, size, rng)


def build_models(corpus: Corpus, cfg: TrainConfig) -> tuple[TripGenerator, TripDiscriminator]:
    torch.manual_seed(cfg.rng_seed)
    gen = TripGenerator(cfg.generator_config(), {p.id: p.category for p in corpus.pois}, corpus.users)
    disc = TripDiscriminator(cfg.discriminator_config(), [p.id for p in corpus.pois])
    return gen, disc


def train(
    corpus: Corpus,
    cfg: TrainConfig,
    on_epoch: Callable[[HistoryRow], None] | None = None,
) -> TrainResult:
    """Pre-train D, pre-train G from demonstrations, then alternate D / adversarial G / teacher steps.

    The returned generator holds the parameters with the best validation HR seen.
    """
    train_trips = corpus.train
    if not train_trips:
        raise DataError("empty training split")
    tm = corpus.time_model
    rng = np.random.default_rng(cfg.rng_seed)
    n_cand = cfg.n_candidates
    if n_cand > len(corpus.pois):
        log.warning("n_candidates=%d exceeds world size; using %d", n_cand, len(corpus.pois))
        n_cand = len(corpus.pois)
    retriever = CandidateRetriever(build_hypergraph(train_trips), corpus.pois, n_cand)
    examples = make_examples(train_trips, retriever, tm)
    val_trips = corpus.validation
    gen, disc = build_models(corpus, cfg)
    g_opt = ann.make_adam(gen.parameters(), cfg.lr_pretrain)
    d_opt = ann.make_adam(disc.parameters(), cfg.lr_pretrain)
    result = TrainResult(gen, disc, retriever=retriever)
    best_state = copy.deepcopy(gen.state_dict())
    t_start = time.perf_counter()

    def record(row: HistoryRow, validate: bool) -> None:
        if validate and val_trips:
            rep = evaluate_model(gen, val_trips, retriever, tm, batch_size=cfg.eval_batch_size)
            row.val_hr, row.val_osp = rep.hr_mean, rep.osp_mean
            if rep.hr_mean > result.best_val_hr:
                result.best_val_hr = rep.hr_mean
                best_state.update(copy.deepcopy(gen.state_dict()))
        if cfg.record_timing:
            row.seconds = time.perf_counter() - t_start
        result.history.append(row)
        log.info("epoch %d %s loss=%s reward=%s val_hr=%s", row.epoch, row.phase, row.loss,
                 row.mean_reward, row.val_hr)
        if on_epoch:
            on_epoch(row)

    # discriminator pre-training against the untrained generator
    fakes = [generate_fakes(gen, b, tm, rng) for b in _batches(examples, cfg.batch_size, rng)]
    fake_pool = [t for chunk in fakes for t in chunk]
    for epoch in range(cfg.disc_pretrain_epochs):
        losses = []
        for batch in _batches(examples, cfg.batch_size, rng):
            picks = rng.integers(len(fake_pool), size=len(batch))
            losses.append(discriminator_step(disc, d_opt, [e.trip for e in batch], [fake_pool[i] for i in picks]))
        record(HistoryRow(epoch, "disc_pretrain", float(np.mean(losses))), validate=False)

    for epoch in range(cfg.pretrain_epochs):
        losses = [pretrain_generator_step(gen, g_opt, b, tm, rng) for b in _batches(examples, cfg.batch_size, rng)]
        record(HistoryRow(epoch, "pretrain", float(np.mean(losses))), validate=True)
    result.pretrained_state = copy.deepcopy(gen.state_dict())

    if cfg.adv_epochs > 0:
        set_lr(g_opt, cfg.lr_adv)
        set_lr(d_opt, cfg.lr_adv)
        baseline = RewardBaseline(cfg.baseline_decay, cfg.baseline_enabled)
        stream = _cycle(examples, cfg.batch_size, rng)
        for epoch in range(cfg.adv_epochs):
            d_losses, rewards, tf_losses = [], [], []
            for _ in range(cfg.batches_per_epoch):
                batch = next(stream)
                d_losses.append(update_discriminator(gen, disc, d_opt, batch, tm, rng))
                rewards.append(policy_gradient_step(gen, disc, g_opt, batch, tm, baseline, rng))
                if cfg.teacher_forcing:
                    tf_losses.append(teacher_forcing_step(gen, g_opt, batch, tm, rng))
            if tf_losses:
                record(HistoryRow(epoch, "teacher", float(np.mean(tf_losses))), validate=False)
            record(HistoryRow(epoch, "adversarial", float(np.mean(d_losses)), float(np.mean(rewards))),
                   validate=True)

    if result.best_val_hr > float("-inf"):
        gen.load_state_dict(best_state)
    gen.eval()
    return result
