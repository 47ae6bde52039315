import copy
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from antrip import nn as ann
from antrip.candidates import CandidateRetriever, build_hypergraph
from antrip.dataset import Corpus
from antrip.generator import DecoderState, advance_state, decode
from antrip.training import (
    RewardBaseline,
    TrainConfig,
    history_csv,
    make_examples,
    policy_gradient_step,
    pretrain_generator_step,
    supervised_loss,
    teacher_forcing_step,
    train,
    update_discriminator,
)
from antrip.candidates import CandidateSet
from antrip.generator import GeneratorConfig, TripGenerator
from antrip.geo import Poi, TimeModel, Trip, TripQuery
from antrip.training import Example
from conftest import tiny_discriminator, tiny_generator
from gradcases import supervised_loss_case
from oracles import fd_check_coords

TINY = dict(
    d_model=8, n_heads=2, n_layers=1, d_ffn=8, poi_dim=8, category_dim=4, user_dim=4,
    disc_poi_dim=8, disc_hidden=8, n_candidates=12, batch_size=16, eval_batch_size=32,
)


def params_of(m):
    return {k: v.clone() for k, v in m.state_dict().items()}


def test_make_examples_cover_real_trips(small_world, small_examples):
    tm = small_world.time_model
    for e in small_examples:
        assert set(e.trip.pois) <= set(e.cand.pois)
        assert e.query.budget == pytest.approx(1.05 * tm.trip_time(e.trip.pois), rel=1e-15)


def test_uniform_policy_loss_closed_form(small_world, small_examples):
    g = tiny_generator(small_world)
    with torch.no_grad():
        g.predict_k.weight.zero_()
    tm = small_world.time_model
    batch = small_examples[:5]
    loss, _ = supervised_loss(g, batch, tm, np.random.default_rng(3))
    out = decode(g, [e.query for e in batch], [e.cand for e in batch], tm, "sample", np.random.default_rng(3))
    expect = []
    for e, r in zip(batch, out.rollouts):
        s, total = DecoderState.initial(e.cand, tm), 0.0
        for t, poi in enumerate(r.trip.pois[1:], start=1):
            feas = s.feasible(tm)
            if t < len(e.trip) and feas[e.cand.pois.index(e.trip.pois[t])]:
                total += math.log(feas.sum())
            s = advance_state(s, e.cand.pois.index(poi), tm)
        expect.append(total)
    assert loss.item() == pytest.approx(float(np.mean(expect)), abs=1e-10)


def test_forced_choices_give_zero_loss():
    # POIs on a meridian 1 km apart; with budget T((0, 1)) only POI 1 is ever reachable
    step = math.degrees(1000.0 / 6371000.0)
    pois = [Poi(i, step * i, 0.0, 0) for i in range(5)]
    tm = TimeModel({p.id: p for p in pois}, {p.id: 600.0 for p in pois})
    torch.manual_seed(0)
    g = TripGenerator(GeneratorConfig(d_model=8, n_heads=2, n_layers=1, d_ffn=8, poi_dim=4, category_dim=2, user_dim=2),
                      {p.id: 0 for p in pois}, [0])
    trip = Trip((0, 1), 0)
    q = TripQuery(0, 0, tm.trip_time(trip.pois))
    batch = [Example(q, CandidateSet(q, (0, 1, 4)), trip)]
    loss, terms = supervised_loss(g, batch, tm, np.random.default_rng(0))
    assert terms == 1 and loss.item() == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_supervised_loss_gradient(small_world, small_examples, seed):
    fn, coords = supervised_loss_case(seed, small_world, small_examples, tiny_generator)
    assert fd_check_coords(fn, coords) < 1e-4


def test_teacher_step_is_pretrain_step(small_world, small_examples):
    tm = small_world.time_model
    a, b = tiny_generator(small_world), tiny_generator(small_world)
    la = pretrain_generator_step(a, ann.make_adam(a.parameters(), 1e-3), small_examples[:8], tm, np.random.default_rng(5))
    lb = teacher_forcing_step(b, ann.make_adam(b.parameters(), 1e-3), small_examples[:8], tm, np.random.default_rng(5))
    assert la == lb
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])


def _toy_examples(world, retriever, n=10):
    starts, picked = set(), []
    for t in world.train:
        if t.start not in starts:
            starts.add(t.start)
            picked.append(t)
        if len(picked) == n:
            break
    return make_examples(picked, retriever, world.time_model)


def test_memorizable_corpus_overfits(small_world, small_retriever):
    tm = small_world.time_model
    toy = _toy_examples(small_world, small_retriever)
    torch.manual_seed(0)
    g = tiny_generator(small_world, seed=0)
    opt = ann.make_adam(g.parameters(), 1e-2)
    rng = np.random.default_rng(0)

    def per_step():
        g.train()
        with torch.no_grad():
            loss, terms = supervised_loss(g, toy, tm, np.random.default_rng(123))
        return loss.item() * len(toy) / max(terms, 1)

    checkpoints = [per_step()]
    for step in range(1, 501):
        pretrain_generator_step(g, opt, toy, tm, rng)
        if step % 10 == 0 and step <= 50:
            checkpoints.append(per_step())
        if step >= 50 and step % 25 == 0 and per_step() < 0.1:
            break
    assert all(b < a for a, b in zip(checkpoints, checkpoints[1:]))
    assert per_step() < 0.1


def test_pg_zero_advantage_leaves_parameters(small_world, small_examples):
    tm = small_world.time_model
    g = tiny_generator(small_world)
    before = params_of(g)
    opt = ann.make_adam(g.parameters(), 1e-2)
    # 0.75 is exact in binary, so the first-batch baseline equals the reward bit-for-bit
    base = RewardBaseline(0.9, True)
    policy_gradient_step(g, None, opt, small_examples[:6], tm, base, np.random.default_rng(0), reward_fn=lambda ts: np.full(len(ts), 0.75))
    policy_gradient_step(g, None, opt, small_examples[6:12], tm, base, np.random.default_rng(1), reward_fn=lambda ts: np.full(len(ts), 0.75))
    policy_gradient_step(g, None, opt, small_examples[:6], tm, RewardBaseline(0.9, False), np.random.default_rng(2),
                         reward_fn=lambda ts: np.zeros(len(ts)))
    for k, p in g.named_parameters():
        assert torch.equal(p, before[k]), k
    assert base.ema == 0.75


def test_pg_constant_reward_is_max_likelihood_step(small_world, small_examples):
    tm = small_world.time_model
    batch = small_examples[:6]
    a, b = tiny_generator(small_world), tiny_generator(small_world)
    policy_gradient_step(a, None, ann.make_adam(a.parameters(), 1e-3), batch, tm, RewardBaseline(0.9, False),
                         np.random.default_rng(4), reward_fn=lambda ts: np.ones(len(ts)))
    # replay the same samples and take a max-likelihood step on them
    b.train()
    sampled = decode(b, [e.query for e in batch], [e.cand for e in batch], tm, "sample", np.random.default_rng(4))
    trips = [r.trip for r in sampled.rollouts]
    opt = ann.make_adam(b.parameters(), 1e-3)
    replay = decode(b, [e.query for e in batch], [e.cand for e in batch], tm, targets=trips, follow="target")
    ann.adam_step(opt, replay.target_nll.mean())
    theirs = dict(b.named_parameters())
    for k, v in a.named_parameters():
        assert torch.allclose(v, theirs[k], atol=1e-12, rtol=0), k


def test_disc_update_separable_decreases(small_world, small_examples):
    tm = small_world.time_model
    g = tiny_generator(small_world)
    d = tiny_discriminator(small_world)
    opt = ann.make_adam(d.parameters(), 1e-2)
    rng = np.random.default_rng(0)
    losses = [update_discriminator(g, d, opt, small_examples[:32], tm, rng) for _ in range(20)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    assert all(math.isfinite(x) for x in losses)


def test_nan_guard():
    m = torch.nn.Linear(2, 2)
    with torch.no_grad():
        m.weight[0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        ann.assert_finite(m)


def test_config_coercion():
    cfg = TrainConfig.from_dict({"batch_size": "4", "lr_pretrain": "3e-3", "teacher_forcing": "false"})
    assert cfg.batch_size == 4 and cfg.lr_pretrain == 3e-3 and cfg.teacher_forcing is False
    with pytest.raises(ValueError, match="unknown config key"):
        TrainConfig.from_dict({"nope": "1"})
    with pytest.raises(ValueError):
        TrainConfig(baseline_decay=1.0)


def _small_cfg(**kw):
    return TrainConfig(**{**TINY, "pretrain_epochs": 2, "adv_epochs": 1, "batches_per_epoch": 2,
                          "disc_pretrain_epochs": 1, "lr_pretrain": 3e-3, **kw})


@pytest.fixture(scope="module")
def mini_corpus(small_world):
    return Corpus(small_world.pois, small_world.trips[:150], small_world.time_model,
                  (list(range(120)), list(range(120, 135)), list(range(135, 150))))


def test_train_deterministic(mini_corpus):
    a = train(mini_corpus, _small_cfg())
    b = train(mini_corpus, _small_cfg())
    assert history_csv(a.history) == history_csv(b.history)
    for k, v in a.generator.state_dict().items():
        assert torch.equal(v, b.generator.state_dict()[k])
    phases = [r.phase for r in a.history]
    assert phases == ["disc_pretrain", "pretrain", "pretrain", "teacher", "adversarial"]


def test_zero_adversarial_epochs_is_pretraining(mini_corpus):
    a = train(mini_corpus, _small_cfg(adv_epochs=0))
    b = train(mini_corpus, _small_cfg(adv_epochs=0, lr_adv=1e-1, batches_per_epoch=7))
    assert history_csv(a.history) == history_csv(b.history)
    assert {r.phase for r in a.history} == {"disc_pretrain", "pretrain"}


def test_training_without_teacher_forcing_runs(mini_corpus):
    res = train(mini_corpus, _small_cfg(teacher_forcing=False))
    assert "teacher" not in {r.phase for r in res.history}
    assert res.best_val_hr >= 0.0


def test_adversarial_phase_keeps_supervised_loss_bounded(small_world, small_retriever):
    tm = small_world.time_model
    toy = _toy_examples(small_world, small_retriever)
    g = tiny_generator(small_world, seed=1)
    d = tiny_discriminator(small_world, seed=1)
    g_opt = ann.make_adam(g.parameters(), 1e-2)
    d_opt = ann.make_adam(d.parameters(), 1e-3)
    rng = np.random.default_rng(2)
    eval_loss = lambda: supervised_loss(g, toy, tm, np.random.default_rng(9))[0].item()
    for _ in range(150):
        pretrain_generator_step(g, g_opt, toy, tm, rng)
    best = eval_loss()
    for group in g_opt.param_groups:
        group["lr"] = 1e-3
    base = RewardBaseline(0.9, True)
    worst = best
    for _ in range(20):
        update_discriminator(g, d, d_opt, toy, tm, rng)
        policy_gradient_step(g, d, g_opt, toy, tm, base, rng)
        teacher_forcing_step(g, g_opt, toy, tm, rng)
        worst = max(worst, eval_loss())
    assert worst <= 2 * best + 1e-9
