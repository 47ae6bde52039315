import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from antrip import nn as ann
from antrip.candidates import CandidateSet
from antrip.errors import InfeasibleQueryError
from antrip.generator import (
    DecoderState,
    GeneratorConfig,
    TripGenerator,
    advance_state,
    context_refine,
    decode,
    encode,
    generate_trip,
    joint_embed,
    next_poi_distribution,
)
from antrip.geo import Poi, TimeModel, TripQuery
from conftest import TINY_GEN, tiny_generator
from oracles import attention_loops, softmax_list

# five POIs, 1 km apart on a meridian, 600 s stays
STEP = math.degrees(1000.0 / 6371000.0)
LINE_POIS = [Poi(i, STEP * i, 0.0, i % 2) for i in range(5)]
LINE_TM = TimeModel({p.id: p for p in LINE_POIS}, {p.id: 600.0 for p in LINE_POIS})


def line_gen(seed=0, **cfg):
    torch.manual_seed(seed)
    g = TripGenerator(GeneratorConfig(**{**TINY_GEN.__dict__, **cfg}), {p.id: p.category for p in LINE_POIS}, [0, 1])
    return g.eval()


def line_cand(budget, start=0, order=(0, 1, 2, 3, 4)):
    q = TripQuery(0, start, budget)
    return q, CandidateSet(q, order)


def test_joint_embed_zero_tables():
    g = line_gen()
    with torch.no_grad():
        for t in (g.poi_table, g.category_table, g.user_table):
            t.weight.zero_()
        g.input_proj.bias.zero_()
    q, cand = line_cand(1e4)
    assert torch.equal(joint_embed(q, cand, g), torch.zeros(5, g.cfg.d_model, dtype=ann.DTYPE))


def test_joint_embed_matches_concat_oracle():
    g = line_gen(1)
    q, cand = line_cand(1e4)
    rows = []
    for p in cand.pois:
        x = torch.cat([g.poi_table.weight[p], g.category_table.weight[LINE_POIS[p].category], g.user_table.weight[0]])
        rows.append(x @ g.input_proj.weight + g.input_proj.bias)
    assert torch.allclose(joint_embed(q, cand, g), torch.stack(rows), atol=1e-12, rtol=0)
    # POIs 0 and 2 share category and user, so only the POI row differs
    h = joint_embed(q, cand, g)
    w_poi = g.input_proj.weight[: g.cfg.poi_dim]
    diff = (g.poi_table.weight[0] - g.poi_table.weight[2]) @ w_poi
    assert torch.allclose(h[0] - h[2], diff, atol=1e-12)


def test_encode_identity_without_layers():
    g = line_gen(n_layers=0)
    h0 = torch.randn(5, g.cfg.d_model, dtype=ann.DTYPE)
    assert torch.equal(encode(h0, g), h0)


def test_encode_matches_layer_composition():
    g = line_gen(2)
    h0 = torch.randn(5, g.cfg.d_model, dtype=ann.DTYPE)
    h = h0[None]
    for layer in g.encoder:
        h = layer(h)
    assert torch.allclose(encode(h0, g), h[0], atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(5))))
def test_encode_permutation_equivariant(perm):
    g = line_gen(3)
    g.train()
    h0 = torch.randn(5, g.cfg.d_model, dtype=ann.DTYPE, generator=torch.Generator().manual_seed(4))
    perm = list(perm)
    assert torch.allclose(encode(h0[perm], g), encode(h0, g)[perm], atol=1e-10, rtol=0)


def test_initial_state_and_boundary():
    q, cand = line_cand(600.0 + LINE_TM.advance(0, 1))
    s = DecoderState.initial(cand, LINE_TM)
    assert s.remaining_s == q.budget - 600.0
    assert s.feasible(LINE_TM).tolist() == [False, True, False, False, False]
    s2 = advance_state(s, 1, LINE_TM)
    assert s2.remaining_s == 0.0
    assert not s2.feasible(LINE_TM).any()


def test_advance_sequence_matches_trip_time():
    q, cand = line_cand(1e5)
    s = DecoderState.initial(cand, LINE_TM)
    for slot in (2, 1, 4):
        s = advance_state(s, slot, LINE_TM)
    assert s.elapsed_s == LINE_TM.trip_time(s.selected)
    assert s.selected == (0, 2, 1, 4)


def test_infeasible_start():
    q, cand = line_cand(599.0)
    with pytest.raises(InfeasibleQueryError, match="infeasible query"):
        DecoderState.initial(cand, LINE_TM)
    with pytest.raises(InfeasibleQueryError):
        generate_trip(q, cand, line_gen(), LINE_TM)


def _encoded(g, q, cand):
    return encode(joint_embed(q, cand, g), g)


def test_single_feasible_glimpse_is_value_row():
    g = line_gen(5)
    q, cand = line_cand(600.0 + LINE_TM.advance(0, 1))
    s = DecoderState.initial(cand, LINE_TM)
    h_l = _encoded(g, q, cand)
    h_bar = context_refine(s, h_l, g, LINE_TM)
    assert torch.allclose(h_bar, g.glimpse_v(h_l)[1], atol=1e-14, rtol=0)
    probs = next_poi_distribution(h_bar, h_l, s, g, LINE_TM)
    assert probs.tolist() == [0.0, 1.0, 0.0, 0.0, 0.0]


def test_equal_keys_give_uniform_attention_and_probs():
    g = line_gen(6)
    with torch.no_grad():
        g.glimpse_k.weight.zero_()
        g.predict_k.weight.zero_()
    q, cand = line_cand(1e5)
    s = DecoderState.initial(cand, LINE_TM)
    h_l = _encoded(g, q, cand)
    h_bar = context_refine(s, h_l, g, LINE_TM)
    values = g.glimpse_v(h_l)[1:]
    assert torch.allclose(h_bar, values.mean(dim=0), atol=1e-13)
    probs = next_poi_distribution(h_bar, h_l, s, g, LINE_TM)
    assert probs.tolist() == pytest.approx([0.0, 0.25, 0.25, 0.25, 0.25], abs=1e-15)


def test_two_feasible_equal_logits():
    g = line_gen(7)
    with torch.no_grad():
        g.predict_k.weight.zero_()
    q, cand = line_cand(600 + LINE_TM.advance(1, 0) + 1.0, start=1, order=(1, 0, 2, 3, 4))
    s = DecoderState.initial(cand, LINE_TM)
    h_l = _encoded(g, q, cand)
    probs = next_poi_distribution(context_refine(s, h_l, g, LINE_TM), h_l, s, g, LINE_TM)
    assert probs.tolist() == [0.0, 0.5, 0.5, 0.0, 0.0]


def test_glimpse_and_pointer_match_loop_oracle():
    g = line_gen(8)
    q, cand = line_cand(600 + LINE_TM.advance(0, 1) + LINE_TM.advance(1, 3) + 1)
    s = advance_state(DecoderState.initial(cand, LINE_TM), 1, LINE_TM)
    h_l = _encoded(g, q, cand)
    blocked = (~s.feasible(LINE_TM)).tolist()
    assert blocked.count(False) >= 2
    h_c = torch.cat([h_l.mean(0), h_l[1], torch.tensor([s.remaining_s / q.budget], dtype=ann.DTYPE)])
    qv, kv, vv = g.glimpse_q(h_c), g.glimpse_k(h_l), g.glimpse_v(h_l)
    dh = g.cfg.d_model // g.cfg.n_heads
    parts = []
    for m in range(g.cfg.n_heads):
        sl = slice(m * dh, (m + 1) * dh)
        parts += attention_loops([qv[sl].tolist()], kv[:, sl].tolist(), vv[:, sl].tolist(), blocked)[0]
    h_bar = context_refine(s, h_l, g, LINE_TM)
    assert h_bar.tolist() == pytest.approx(parts, abs=1e-10)
    u = (g.predict_k(h_l) @ g.predict_q(h_bar)) / math.sqrt(g.cfg.d_model)
    expect = softmax_list([-math.inf if b else x for b, x in zip(blocked, u.tolist())])
    assert next_poi_distribution(h_bar, h_l, s, g, LINE_TM).tolist() == pytest.approx(expect, abs=1e-10)


def test_budget_equal_to_start_stay():
    q, cand = line_cand(600.0)
    for mode in ("greedy", "sample"):
        r = generate_trip(q, cand, line_gen(), LINE_TM, mode, rng=np.random.default_rng(0))
        assert r.trip.pois == (0,) and r.step_log_probs == []


def test_only_one_feasible_is_deterministic():
    q, cand = line_cand(600.0 + LINE_TM.advance(0, 1) + 1.0, order=(0, 1, 3))
    for mode in ("greedy", "sample"):
        for seed in range(3):
            r = generate_trip(q, cand, line_gen(seed), LINE_TM, mode, rng=np.random.default_rng(seed))
            assert r.trip.pois == (0, 1)
            assert r.step_probabilities == [1.0]


def test_sampling_reproducible(small_world, small_examples):
    g = tiny_generator(small_world).eval()
    e = small_examples[0]
    a = generate_trip(e.query, e.cand, g, small_world.time_model, "sample", rng=np.random.default_rng(9))
    b = generate_trip(e.query, e.cand, g, small_world.time_model, "sample", rng=np.random.default_rng(9))
    assert a == b


def test_rollout_json(small_world, small_examples):
    import json

    g = tiny_generator(small_world).eval()
    e = small_examples[1]
    r = generate_trip(e.query, e.cand, g, small_world.time_model)
    obj = json.loads(r.to_json(e.query))
    assert obj["poi_sequence"] == list(r.trip.pois)
    assert len(obj["per_step_probabilities"]) == len(r.trip) - 1
    assert obj["total_time_s"] == small_world.time_model.trip_time(r.trip.pois)


def test_batched_decode_matches_single(small_world, small_examples):
    g = tiny_generator(small_world, seed=2).eval()
    tm = small_world.time_model
    batch = small_examples[:6]
    with torch.no_grad():
        out = decode(g, [e.query for e in batch], [e.cand for e in batch], tm)
        for e, r in zip(batch, out.rollouts):
            single = decode(g, [e.query], [e.cand], tm).rollouts[0]
            assert single.trip == r.trip
            assert single.step_log_probs == pytest.approx(r.step_log_probs, abs=1e-12)


def test_log_prob_consistency_and_teacher_replay(small_world, small_examples):
    g = tiny_generator(small_world, seed=3).eval()
    tm = small_world.time_model
    rng = np.random.default_rng(0)
    batch = small_examples[:8]
    with torch.no_grad():
        out = decode(g, [e.query for e in batch], [e.cand for e in batch], tm, "sample", rng)
        for b, r in enumerate(out.rollouts):
            assert math.exp(out.log_prob[b].item()) == pytest.approx(math.prod(r.step_probabilities), rel=1e-10, abs=1e-300)
            replay = decode(g, [batch[b].query], [batch[b].cand], tm, targets=[r.trip], follow="target")
            assert replay.rollouts[0].trip == r.trip
            assert replay.target_nll[0].item() == pytest.approx(-out.log_prob[b].item(), rel=1e-10, abs=1e-12)
            # and the step-by-step single-instance API agrees
            s = DecoderState.initial(batch[b].cand, tm)
            h_l = _encoded(g, batch[b].query, batch[b].cand)
            total = 0.0
            for poi in r.trip.pois[1:]:
                slot = batch[b].cand.pois.index(poi)
                probs = next_poi_distribution(context_refine(s, h_l, g, tm), h_l, s, g, tm)
                total += math.log(probs[slot].item())
                s = advance_state(s, slot, tm)
            assert total == pytest.approx(out.log_prob[b].item(), abs=1e-10)


def test_mask_mass_is_exactly_zero(small_world, small_examples):
    g = tiny_generator(small_world, seed=4).eval()
    tm = small_world.time_model
    for e in small_examples[:10]:
        s = DecoderState.initial(e.cand, tm)
        h_l = _encoded(g, e.query, e.cand)
        while True:
            h_bar = context_refine(s, h_l, g, tm)
            if h_bar is None:
                break
            probs = next_poi_distribution(h_bar, h_l, s, g, tm)
            feas = s.feasible(tm)
            assert torch.all(probs[torch.from_numpy(~feas)] == 0.0)
            s = advance_state(s, int(torch.argmax(probs)), tm)
        assert tm.trip_time(s.selected) <= e.query.budget


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sampled_rollouts_feasible(small_world, small_examples, seed):
    g = tiny_generator(small_world, seed=5)
    tm = small_world.time_model
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(small_examples), 8, replace=False)
    batch = [small_examples[i] for i in idx]
    with torch.no_grad():
        out = decode(g, [e.query for e in batch], [e.cand for e in batch], tm, "sample", rng, max_len=30)
    for e, r in zip(batch, out.rollouts):
        assert len(set(r.trip.pois)) == len(r.trip)
        assert tm.trip_time(r.trip.pois) <= e.query.budget


def test_checkpoint_round_trip(tmp_path, small_world, small_examples):
    g = tiny_generator(small_world, seed=6)
    g.train()
    with torch.no_grad():
        decode(g, [small_examples[0].query], [small_examples[0].cand], small_world.time_model)
    g.eval()
    g.save(tmp_path / "g.ant", n_candidates=12)
    back = TripGenerator.load(tmp_path / "g.ant")
    assert back.checkpoint_meta["n_candidates"] == 12
    for k, v in g.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)
    e = small_examples[2]
    assert generate_trip(e.query, e.cand, g, small_world.time_model) == generate_trip(
        e.query, e.cand, back.eval(), small_world.time_model
    )
