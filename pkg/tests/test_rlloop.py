from __future__ import annotations

import csv

import pytest
import torch
from hypothesis import given, settings, strategies as st

from convforge.corpus import Conversation, Turn
from convforge.errors import DataError
from convforge.generators import GeneratedConversation, Mode
from convforge.lmbridge import SamplingParams, TinyArch, TinyCausalLM
from convforge.rlloop import (
    AdaptiveKLController,
    FixedKLController,
    IdentitySummarizer,
    PPOConfig,
    PPOTrace,
    clipped_surrogate,
    compute_reward,
    gae_advantages,
    masked_whiten,
    train_rl,
)

from .oracles import direct_gae, surrogate


def _gen(*turns, well_formed=True, raw=""):
    conv = Conversation("g", tuple(Turn(s, t) for s, t in turns))
    return GeneratedConversation(conv, well_formed, raw, Mode.RL_POLICY)


# -- reward ------------------------------------------------------------------------


def test_reward_worked_value():
    rec = compute_reward(_gen(("person_0", "person_0 will be late today")), "person_0 will be late", IdentitySummarizer())
    assert rec.generated_summary == "person_0 will be late today"
    assert rec.reward == pytest.approx(6 / 7, abs=1e-9)


def test_reward_identity_and_zero():
    summ = IdentitySummarizer()
    assert compute_reward(_gen(("person_1", "we meet at noon")), "we meet at noon", summ).reward == 1.0
    assert compute_reward(_gen(("person_1", "alpha beta gamma")), "we meet at noon", summ).reward == 0.0
    empty = GeneratedConversation(Conversation("e", ()), False, "", Mode.RL_POLICY)
    assert compute_reward(empty, "we meet", summ).reward == 0.0
    with pytest.raises(DataError):
        compute_reward(_gen(("person_0", "x")), "  ", summ)


def test_reward_reparses_raw_text():
    bad = GeneratedConversation(Conversation("b", ()), False, "<person_0> we meet at noon", Mode.RL_POLICY)
    assert compute_reward(bad, "we meet at noon", IdentitySummarizer()).reward == 1.0


words = st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=12).map(" ".join)


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_reward_bounded_and_deterministic(utt, summary):
    g = _gen(("person_0", utt))
    r1 = compute_reward(g, summary, IdentitySummarizer()).reward
    assert 0.0 <= r1 <= 1.0
    assert r1 == compute_reward(g, summary, IdentitySummarizer()).reward


# -- GAE / surrogate ---------------------------------------------------------------


def test_gae_worked_example():
    adv, ret = gae_advantages(torch.tensor([0.0, 0.0, 1.0]), torch.tensor([0.5, 0.5, 0.5]), 1.0, 1.0)
    assert adv.tolist() == [0.5, 0.5, 0.5]
    assert ret.tolist() == [1.0, 1.0, 1.0]


floats = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(floats, floats), min_size=1, max_size=25), st.floats(0.01, 1), st.floats(0.01, 1))
def test_gae_matches_direct_sum(pairs, gamma, lam):
    r = [p[0] for p in pairs]
    v = [p[1] for p in pairs]
    adv, ret = gae_advantages(torch.tensor(r, dtype=torch.float64), torch.tensor(v, dtype=torch.float64), gamma, lam)
    expected = direct_gae(r, v, gamma, lam)
    assert max(abs(a - b) for a, b in zip(adv.tolist(), expected)) <= 1e-9
    assert max(abs(x - (a + b)) for x, a, b in zip(ret.tolist(), expected, v)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(floats, floats), min_size=2, max_size=20), st.data())
def test_gae_mask_equals_truncation(pairs, data):
    n = data.draw(st.integers(1, len(pairs)))
    r = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    v = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    mask = torch.tensor([1.0] * n + [0.0] * (len(pairs) - n), dtype=torch.float64)
    adv, _ = gae_advantages(r.unsqueeze(0), v.unsqueeze(0), 0.9, 0.95, mask.unsqueeze(0))
    expected = direct_gae(r[:n].tolist(), v[:n].tolist(), 0.9, 0.95)
    assert max(abs(a - b) for a, b in zip(adv[0, :n].tolist(), expected)) <= 1e-9


def test_surrogate_grid():
    ratios = [0.5, 0.79, 0.8, 0.95, 1.0, 1.05, 1.2, 1.21, 2.0]
    advs = [-2.0, -0.5, 0.0, 0.5, 2.0]
    r = torch.tensor([x for x in ratios for _ in advs], dtype=torch.float64)
    a = torch.tensor([y for _ in ratios for y in advs], dtype=torch.float64)
    got = clipped_surrogate(r, a, 0.2).tolist()
    for g, x, y in zip(got, r.tolist(), a.tolist()):
        assert abs(g - surrogate(x, y, 0.2)) <= 1e-9


def test_surrogate_gradient_vanishes_outside_trust_region():
    r = torch.tensor([1.5, 0.5], requires_grad=True)
    clipped_surrogate(r, torch.tensor([1.0, -1.0]), 0.2).sum().backward()
    assert r.grad.tolist() == [0.0, 0.0]


def test_masked_whiten():
    x = torch.tensor([[1.0, 2.0, 3.0, 100.0]])
    m = torch.tensor([[1.0, 1.0, 1.0, 0.0]])
    w = masked_whiten(x, m)
    assert abs(float((w * m).sum())) < 1e-6


# -- KL controller -------------------------------------------------------------------


def test_adaptive_kl_controller():
    ctl = AdaptiveKLController(0.2, 6.0, 10000)
    ctl.update(12.0, 16)  # error clipped to +0.2
    assert ctl.value == pytest.approx(0.2 * (1 + 0.2 * 16 / 10000))
    ctl = AdaptiveKLController(0.2, 6.0, 10000)
    ctl.update(6.0, 16)
    assert ctl.value == 0.2
    ctl.update(0.0, 16)
    assert ctl.value < 0.2
    fixed = FixedKLController(0.3)
    fixed.update(100.0, 16)
    assert fixed.value == 0.3


def test_ppo_defaults_and_validation():
    cfg = PPOConfig()
    assert (cfg.steps, cfg.batch_size, cfg.forward_batch_size, cfg.learning_rate) == (10000, 16, 4, 1.41e-5)
    assert (cfg.init_kl_coef, cfg.kl_target, cfg.horizon, cfg.gamma, cfg.lam) == (0.2, 6.0, 10000, 1.0, 0.95)
    assert (cfg.cliprange, cfg.cliprange_value, cfg.vf_coef) == (0.2, 0.2, 0.1)
    with pytest.raises(DataError):
        PPOConfig(lam=0.0)
    with pytest.raises(DataError):
        PPOConfig(gamma=1.5)
    with pytest.raises(DataError):
        PPOConfig(steps=-1)


# -- training loop ---------------------------------------------------------------------


@pytest.fixture()
def small_policy():
    return TinyCausalLM.from_texts(["a b c d e f"], TinyArch(d_model=32, n_layers=1))


def test_zero_steps_is_a_noop(small_policy):
    before = [p.clone() for p in small_policy.parameters()]
    policy, trace = train_rl(small_policy, small_policy.clone(), None, ["a"], PPOConfig(steps=0), SamplingParams())
    assert len(trace) == 0
    assert all(torch.equal(a, b) for a, b in zip(before, policy.parameters()))


def test_missing_reward_source(small_policy):
    with pytest.raises(DataError):
        train_rl(small_policy, small_policy.clone(), None, ["a"], PPOConfig(steps=1), SamplingParams())
    with pytest.raises(DataError):
        train_rl(small_policy, small_policy.clone(), IdentitySummarizer(), [], PPOConfig(steps=1), SamplingParams())


def test_trace_and_csv(small_policy, tmp_path):
    cfg = PPOConfig(steps=3, batch_size=4, forward_batch_size=2, learning_rate=1e-3, ppo_epochs=1)
    _, trace = train_rl(small_policy, small_policy.clone(), IdentitySummarizer(), ["a b", "c d"], cfg,
                        SamplingParams(min_length=1, max_length=30))
    assert len(trace) == 3 and trace.skipped_steps == 0
    assert all(0.0 <= r <= 1.0 for r in trace.mean_reward)
    trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert tuple(rows[0]) == PPOTrace.COLUMNS
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]


def test_training_is_seeded(small_policy):
    cfg = PPOConfig(steps=2, batch_size=4, forward_batch_size=2, learning_rate=1e-3, ppo_epochs=1)
    runs = []
    for _ in range(2):
        p = small_policy.clone()
        _, trace = train_rl(p, small_policy.clone(), IdentitySummarizer(), ["a b"], cfg, SamplingParams(min_length=1, max_length=30))
        runs.append((trace.rows(), [x.detach().clone() for x in p.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_empty_rollouts_are_skipped(small_policy, monkeypatch):
    import convforge.rlloop as rl

    def empty(model, summary, params, conv_id="", mode=Mode.SL):
        return GeneratedConversation(Conversation(conv_id, ()), False, "", mode, token_ids=[], logprobs=[])

    monkeypatch.setattr(rl, "generate_sl", empty)
    cfg = PPOConfig(steps=2, batch_size=2, forward_batch_size=2)
    _, trace = train_rl(small_policy, small_policy.clone(), IdentitySummarizer(), ["a"], cfg, SamplingParams())
    assert len(trace) == 0 and trace.skipped_steps == 2


def test_kl_penalty_anchors_policy(sl_model, anon_records):
    summaries = [r.summary for r in anon_records[:40]]

    def reward(gen, gt):
        words = gen.raw_text.split()
        return sum(w == "ok" for w in words) / max(len(words), 1)

    kls = {}
    for coef in (0.0, 2.0):
        cfg = PPOConfig(steps=6, batch_size=8, forward_batch_size=8, learning_rate=1e-3, init_kl_coef=coef,
                        adaptive_kl=False, ppo_epochs=2, seed=3)
        _, trace = train_rl(sl_model.clone(), sl_model.clone(), None, summaries, cfg,
                            SamplingParams(min_length=0, max_length=80), reward_fn=reward)
        kls[coef] = sum(trace.mean_kl[-3:]) / 3
    assert kls[2.0] < kls[0.0]
