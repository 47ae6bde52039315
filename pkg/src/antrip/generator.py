"""Time-aware trip generator: joint embedding, set encoder, masked attention decoder.

The decoder works on a batch of queries at once. Feasibility bookkeeping is
done in numpy with the same left-to-right summation as
:meth:`TimeModel.trip_time`, so a slot is offered only if appending it keeps
``trip_time(trip) <= budget`` exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from antrip import nn as ann
from antrip.candidates import CandidateSet
from antrip.errors import DataError, InfeasibleQueryError
from antrip.geo import TimeModel, Trip, TripQuery


@dataclass
class GeneratorConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 64
    poi_dim: int = 64
    category_dim: int = 16
    user_dim: int = 64
    max_len: int = 20

    @classmethod
    def full_scale(cls) -> "GeneratorConfig":
        return cls(d_model=256, n_heads=8, n_layers=6, d_ffn=256, poi_dim=256, category_dim=32, user_dim=256)


class TripGenerator(nn.Module):
    def __init__(
        self,
        cfg: GeneratorConfig,
        poi_categories: dict[int, int],
        user_ids: Sequence[int],
    ):
        super().__init__()
        if cfg.d_model % cfg.n_heads:
            raise ValueError(f"d_model={cfg.d_model} not divisible by n_heads={cfg.n_heads}")
        self.cfg = cfg
        self.poi_ids = sorted(poi_categories)
        self.poi_categories = {int(k): int(v) for k, v in poi_categories.items()}
        self.user_ids = sorted(int(u) for u in user_ids)
        self._poi_index = {p: i for i, p in enumerate(self.poi_ids)}
        cats = sorted(set(self.poi_categories.values()))
        self._cat_index = {c: i for i, c in enumerate(cats)}
        self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        d = cfg.d_model

        self.poi_table = ann.Embedding(len(self.poi_ids), cfg.poi_dim)
        self.category_table = ann.Embedding(len(cats), cfg.category_dim)
        self.user_table = ann.Embedding(len(self.user_ids), cfg.user_dim)
        self.input_proj = ann.Linear(cfg.poi_dim + cfg.category_dim + cfg.user_dim, d)
        self.encoder = nn.ModuleList(
            ann.EncoderLayer(d, cfg.n_heads, cfg.d_ffn) for _ in range(cfg.n_layers)
        )
        self.glimpse_q = ann.Linear(2 * d + 1, d, bias=False)
        self.glimpse_k = ann.Linear(d, d, bias=False)
        self.glimpse_v = ann.Linear(d, d, bias=False)
        self.predict_q = ann.Linear(d, d, bias=False)
        self.predict_k = ann.Linear(d, d, bias=False)

    # ------------------------------------------------------------------ indices

    def index_batch(self, queries: Sequence[TripQuery], cands: Sequence[CandidateSet]):
        try:
            poi = [[self._poi_index[p] for p in c.pois] for c in cands]
            cat = [[self._cat_index[self.poi_categories[p]] for p in c.pois] for c in cands]
        except KeyError as exc:
            raise DataError(f"unknown POI id {exc.args[0]}") from None
        try:
            user = [self._user_index[q.user] for q in queries]
        except KeyError as exc:
            raise DataError(f"unknown user id {exc.args[0]}") from None
        return torch.tensor(poi), torch.tensor(cat), torch.tensor(user)

    # ------------------------------------------------------------------ network pieces

    def embed(self, poi_idx: Tensor, cat_idx: Tensor, user_idx: Tensor) -> Tensor:
        """(B, N) index tensors -> (B, N, d) joint embeddings."""
        x_u = self.user_table(user_idx)[:, None, :].expand(-1, poi_idx.shape[1], -1)
        x = torch.cat([self.poi_table(poi_idx), self.category_table(cat_idx), x_u], dim=-1)
        return self.input_proj(x)

    def encode(self, h: Tensor) -> Tensor:
        for layer in self.encoder:
            h = layer(h)
        return h

    def context(self, h_mean: Tensor, h_prev: Tensor, remaining_frac: Tensor) -> Tensor:
        return torch.cat([h_mean, h_prev, remaining_frac[:, None]], dim=-1)

    def glimpse(self, h_c: Tensor, keys: Tensor, values: Tensor, blocked: Tensor) -> Tensor:
        """Masked multi-head attention of the context over the candidates.

        ``keys``/``values`` are head-split (B, M, N, d_h); returns (B, d).
        """
        q = ann.split_heads(self.glimpse_q(h_c)[:, None, :], self.cfg.n_heads)
        out = ann.scaled_dot_attention(q, keys, values, blocked[:, None, None, :])
        return ann.merge_heads(out)[:, 0, :]

    def logits(self, h_bar: Tensor, pred_keys: Tensor, blocked: Tensor) -> Tensor:
        q = self.predict_q(h_bar)
        u = (pred_keys @ q[:, :, None])[:, :, 0] / math.sqrt(self.cfg.d_model)
        return u.masked_fill(blocked, ann.MASK_VALUE)

    def precompute(self, h_l: Tensor) -> "Encoded":
        heads = self.cfg.n_heads
        return Encoded(
            h_l=h_l,
            h_mean=h_l.mean(dim=1),
            keys=ann.split_heads(self.glimpse_k(h_l), heads),
            values=ann.split_heads(self.glimpse_v(h_l), heads),
            pred_keys=self.predict_k(h_l),
        )

    def forward_encoder(self, queries, cands) -> "Encoded":
        return self.precompute(self.encode(self.embed(*self.index_batch(queries, cands))))

    def step_log_probs(self, enc: "Encoded", rows: Tensor, prev: Tensor, frac: Tensor, blocked: Tensor):
        """Log-distribution over slots for the batch rows ``rows``."""
        h_prev = enc.h_l[rows, prev]
        h_c = self.context(enc.h_mean[rows], h_prev, frac)
        h_bar = self.glimpse(h_c, enc.keys[rows], enc.values[rows], blocked)
        return ann.log_softmax(self.logits(h_bar, enc.pred_keys[rows], blocked))

    # ------------------------------------------------------------------ persistence

    def meta(self) -> dict:
        return {
            "kind": "generator",
            "config": asdict(self.cfg),
            "poi_categories": [[p, self.poi_categories[p]] for p in self.poi_ids],
            "user_ids": self.user_ids,
        }

    def save(self, path: str | Path, **extra) -> None:
        ann.save_checkpoint(path, dict(self.state_dict()), {**self.meta(), **extra})

    @classmethod
    def from_meta(cls, meta: dict) -> "TripGenerator":
        if meta.get("kind") != "generator":
            raise DataError("checkpoint does not hold a generator")
        cfg = GeneratorConfig(**meta["config"])
        return cls(cfg, {int(p): int(c) for p, c in meta["poi_categories"]}, meta["user_ids"])

    @classmethod
    def load(cls, path: str | Path) -> "TripGenerator":
        meta, tensors = ann.load_checkpoint(path)
        model = cls.from_meta(meta)
        ann.load_state(model, tensors)
        model.checkpoint_meta = meta
        return model


@dataclass
class Encoded:
    h_l: Tensor
    h_mean: Tensor
    keys: Tensor
    values: Tensor
    pred_keys: Tensor


# ---------------------------------------------------------------------- decoder state


@dataclass(frozen=True)
class DecoderState:
    """Single-query decoding state; ``visited`` is indexed by candidate slot."""

    cand: CandidateSet
    selected: tuple[int, ...]
    visited: tuple[bool, ...]
    elapsed_s: float
    step: int
    prev_slot: int = 0

    @property
    def budget(self) -> float:
        return self.cand.query.budget

    @property
    def remaining_s(self) -> float:
        return self.budget - self.elapsed_s

    @classmethod
    def initial(cls, cand: CandidateSet, tm: TimeModel) -> "DecoderState":
        q = cand.query
        elapsed = tm.duration(q.start)
        if elapsed > q.budget:
            raise InfeasibleQueryError("infeasible query: budget below the stay at the start POI")
        visited = (True,) + (False,) * (len(cand) - 1)
        return cls(cand, (q.start,), visited, elapsed, 1, 0)

    def advance_costs(self, tm: TimeModel) -> np.ndarray:
        return tm.advance_row(self.selected[-1], self.cand.pois)

    def feasible(self, tm: TimeModel) -> np.ndarray:
        adv = self.advance_costs(tm)
        return ~np.array(self.visited) & (self.elapsed_s + adv <= self.budget)


def advance_state(state: DecoderState, slot: int, tm: TimeModel) -> DecoderState:
    if not state.feasible(tm)[slot]:
        raise DataError(f"slot {slot} is visited or exceeds the remaining time")
    poi = state.cand.pois[slot]
    visited = list(state.visited)
    visited[slot] = True
    return replace(
        state,
        selected=state.selected + (poi,),
        visited=tuple(visited),
        elapsed_s=state.elapsed_s + tm.advance(state.selected[-1], poi),
        step=state.step + 1,
        prev_slot=slot,
    )


def _single(model: TripGenerator, state: DecoderState, h_l: Tensor, tm: TimeModel):
    blocked = torch.from_numpy(~state.feasible(tm))[None, :]
    if bool(blocked.all()):
        return None
    enc = model.precompute(h_l[None] if h_l.dim() == 2 else h_l)
    frac = torch.tensor([state.remaining_s / state.budget], dtype=ann.DTYPE)
    return enc, blocked, frac


def context_refine(state: DecoderState, h_l: Tensor, model: TripGenerator, tm: TimeModel) -> Tensor | None:
    """Refined context embedding (d,), or None when nothing is feasible (decoding ends)."""
    got = _single(model, state, h_l, tm)
    if got is None:
        return None
    enc, blocked, frac = got
    h_c = model.context(enc.h_mean, enc.h_l[:, state.prev_slot], frac)
    return model.glimpse(h_c, enc.keys, enc.values, blocked)[0]


def next_poi_distribution(
    h_bar: Tensor, h_l: Tensor, state: DecoderState, model: TripGenerator, tm: TimeModel
) -> Tensor | None:
    got = _single(model, state, h_l, tm)
    if got is None:
        return None
    enc, blocked, _ = got
    return ann.softmax(model.logits(h_bar[None], enc.pred_keys, blocked))[0]


def joint_embed(q: TripQuery, cand: CandidateSet, model: TripGenerator) -> Tensor:
    return model.embed(*model.index_batch([q], [cand]))[0]


def encode(h0: Tensor, model: TripGenerator) -> Tensor:
    return model.encode(h0[None])[0]


# ---------------------------------------------------------------------- batched decoding


@dataclass
class Rollout:
    trip: Trip
    step_log_probs: list[float]
    total_time_s: float

    @property
    def step_probabilities(self) -> list[float]:
        return [math.exp(lp) for lp in self.step_log_probs]

    def to_json(self, q: TripQuery) -> str:
        return json.dumps(
            {
                "query": {"user": q.user, "start": q.start, "budget_s": q.budget},
                "poi_sequence": list(self.trip.pois),
                "per_step_probabilities": self.step_probabilities,
                "total_time_s": self.total_time_s,
            }
        )


@dataclass
class DecodeOutput:
    rollouts: list[Rollout]
    log_prob: Tensor  # (B,) sum of chosen-step log-probs, differentiable
    target_nll: Tensor  # (B,) teacher loss terms, zeros when no targets
    target_terms: list[int] = field(default_factory=list)


def _sample(logp: np.ndarray, rng: np.random.Generator) -> int:
    p = np.exp(logp)
    cum = np.cumsum(p)
    j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    if j >= len(p) or p[j] == 0.0:
        j = int(np.flatnonzero(p > 0)[-1])
    return j


def decode(
    model: TripGenerator,
    queries: Sequence[TripQuery],
    cands: Sequence[CandidateSet],
    tm: TimeModel,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    max_len: int | None = None,
    targets: Sequence[Trip] | None = None,
    follow: str = "policy",
) -> DecodeOutput:
    """Roll out a batch of queries.

    mode: ``greedy`` (argmax, lowest slot on ties) or ``sample`` (categorical draw from ``rng``).
    With ``targets``, accumulates ``-log p(target_t | own prefix)`` per query; a target step that
    is visited or infeasible under the prefix contributes nothing. ``follow="target"`` advances
    along the target instead of the policy choice (teacher replay) and stops when it ends.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    max_len = max_len or model.cfg.max_len
    B = len(queries)
    n = len(cands[0])
    if any(len(c) != n for c in cands):
        raise DataError("all candidate sets in a batch must have the same size")

    budgets = np.array([q.budget for q in queries], dtype=np.float64)
    elapsed = np.empty(B)
    for b, q in enumerate(queries):
        elapsed[b] = tm.duration(q.start)
        if elapsed[b] > q.budget:
            raise InfeasibleQueryError("infeasible query: budget below the stay at the start POI")
    visited = np.zeros((B, n), dtype=bool)
    visited[:, 0] = True
    prev = np.zeros(B, dtype=np.int64)
    seqs: list[list[int]] = [[q.start] for q in queries]
    step_lp: list[list[float]] = [[] for _ in range(B)]
    slot_of = [{p: i for i, p in enumerate(c.pois)} for c in cands]
    target_slots = None
    if targets is not None:
        target_slots = []
        for b, t in enumerate(targets):
            if t.pois[0] != queries[b].start:
                raise DataError("target trip must start at the query start")
            try:
                target_slots.append([slot_of[b][p] for p in t.pois])
            except KeyError as exc:
                raise DataError(f"target POI {exc.args[0]} missing from candidate set") from None

    enc = model.forward_encoder(queries, cands)
    # one gather per step; indexing single elements makes backward quadratic in B
    log_prob = torch.zeros(B, dtype=ann.DTYPE)
    nll = torch.zeros(B, dtype=ann.DTYPE)
    terms = [0] * B
    alive = np.ones(B, dtype=bool)

    while True:
        blocked = np.ones((B, n), dtype=bool)
        for b in np.flatnonzero(alive):
            step = len(seqs[b])
            if step >= max_len or (target_slots is not None and step >= len(target_slots[b])):
                alive[b] = False
                continue
            adv = tm.advance_row(seqs[b][-1], cands[b].pois)
            blocked[b] = visited[b] | (elapsed[b] + adv > budgets[b])
            if blocked[b].all():
                alive[b] = False
        rows = np.flatnonzero(alive)
        if len(rows) == 0:
            break
        rows_t = torch.from_numpy(rows)
        frac = torch.from_numpy((budgets[rows] - elapsed[rows]) / budgets[rows])
        logp = model.step_log_probs(
            enc, rows_t, torch.from_numpy(prev[rows]), frac, torch.from_numpy(blocked[rows])
        )
        logp_np = logp.detach().numpy()
        tgt_i, tgt_j, pick_i, pick_j = [], [], [], []
        for i, b in enumerate(rows):
            step = len(seqs[b])
            if target_slots is not None:
                tgt = target_slots[b][step]
                if not blocked[b, tgt]:
                    tgt_i.append(i)
                    tgt_j.append(tgt)
                    terms[b] += 1
            if follow == "target":
                j = target_slots[b][step]
                if blocked[b, j]:
                    alive[b] = False
                    continue
            elif mode == "greedy":
                j = int(np.argmax(logp_np[i]))
            else:
                j = _sample(logp_np[i], rng)
            pick_i.append(i)
            pick_j.append(j)
            step_lp[b].append(float(logp_np[i, j]))
            poi = cands[b].pois[j]
            elapsed[b] = elapsed[b] + tm.advance(seqs[b][-1], poi)
            seqs[b].append(poi)
            visited[b, j] = True
            prev[b] = j
        if tgt_i:
            ii = torch.tensor(tgt_i)
            nll = nll.index_add(0, rows_t[ii], -logp[ii, torch.tensor(tgt_j)])
        if pick_i:
            ii = torch.tensor(pick_i)
            log_prob = log_prob.index_add(0, rows_t[ii], logp[ii, torch.tensor(pick_j)])

    rollouts = [
        Rollout(Trip(tuple(seqs[b]), queries[b].user), step_lp[b], float(elapsed[b])) for b in range(B)
    ]
    return DecodeOutput(rollouts, log_prob, nll, terms)


def generate_trip(
    q: TripQuery,
    cand: CandidateSet,
    model: TripGenerator,
    tm: TimeModel,
    mode: str = "greedy",
    max_len: int | None = None,
    rng: np.random.Generator | None = None,
) -> Rollout:
    if cand.query != q:
        cand = CandidateSet(q, cand.pois)
    with torch.no_grad():
        return decode(model, [q], [cand], tm, mode, rng, max_len).rollouts[0]
