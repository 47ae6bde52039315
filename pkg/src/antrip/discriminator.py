"""GRU trip discriminator: probability that a POI sequence is a real-life trip."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from antrip import nn as ann
from antrip.errors import DataError
from antrip.geo import Trip

REAL, FAKE = 1, 0


@dataclass
class DiscriminatorConfig:
    poi_dim: int = 64
    hidden: int = 64
    head_inner: int = 32

    @classmethod
    def full_scale(cls) -> "DiscriminatorConfig":
        return cls(poi_dim=256, hidden=256, head_inner=32)


class TripDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig, poi_ids: Sequence[int]):
        super().__init__()
        self.cfg = cfg
        self.poi_ids = sorted(int(p) for p in poi_ids)
        self._index = {p: i for i, p in enumerate(self.poi_ids)}
        self.poi_table = ann.Embedding(len(self.poi_ids), cfg.poi_dim)
        self.gru = ann.GRUCell(cfg.poi_dim, cfg.hidden)
        self.head1 = ann.Linear(cfg.hidden, cfg.head_inner)
        self.head2 = ann.Linear(cfg.head_inner, 2)

    def pad(self, trips: Sequence[Trip]) -> tuple[Tensor, Tensor]:
        """(B, T) index tensor padded with 0 and the true lengths."""
        if not trips:
            raise DataError("empty trip batch")
        longest = max(len(t) for t in trips)
        idx = torch.zeros(len(trips), longest, dtype=torch.long)
        for b, t in enumerate(trips):
            try:
                idx[b, : len(t)] = torch.tensor([self._index[p] for p in t.pois])
            except KeyError as exc:
                raise DataError(f"unknown POI id {exc.args[0]}") from None
        return idx, torch.tensor([len(t) for t in trips])

    def logits(self, trips: Sequence[Trip]) -> Tensor:
        idx, lengths = self.pad(trips)
        x = self.poi_table(idx)
        h = torch.zeros(len(trips), self.cfg.hidden, dtype=ann.DTYPE)
        for t in range(idx.shape[1]):
            step = self.gru(x[:, t], h)
            # padded positions leave the state untouched
            h = torch.where((t < lengths)[:, None], step, h)
        return self.head2(F.relu(self.head1(h)))

    def log_probs(self, trips: Sequence[Trip]) -> Tensor:
        return torch.log_softmax(self.logits(trips), dim=-1)

    def score(self, trips: Sequence[Trip]) -> Tensor:
        return torch.softmax(self.logits(trips), dim=-1)[:, REAL]

    def save(self, path: str | Path) -> None:
        meta = {"kind": "discriminator", "config": asdict(self.cfg), "poi_ids": self.poi_ids}
        ann.save_checkpoint(path, dict(self.state_dict()), meta)

    @classmethod
    def load(cls, path: str | Path) -> "TripDiscriminator":
        meta, tensors = ann.load_checkpoint(path)
        if meta.get("kind") != "discriminator":
            raise DataError("checkpoint does not hold a discriminator")
        model = cls(DiscriminatorConfig(**meta["config"]), meta["poi_ids"])
        ann.load_state(model, tensors)
        return model


def score_trip(trip: Trip, model: TripDiscriminator) -> float:
    with torch.no_grad():
        return float(model.score([trip])[0])


def discriminator_loss(real: Sequence[Trip], fake: Sequence[Trip], model: TripDiscriminator) -> Tensor:
    """-mean log D(real) - mean log(1 - D(fake))."""
    if not real or not fake:
        raise DataError("discriminator loss needs non-empty real and fake batches")
    lp_real = model.log_probs(real)[:, REAL]
    lp_fake = model.log_probs(fake)[:, FAKE]
    return -lp_real.mean() - lp_fake.mean()
