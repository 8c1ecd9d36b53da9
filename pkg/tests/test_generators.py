from __future__ import annotations

import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from convforge.corpus import Conversation, Turn
from convforge.errors import DataError
from convforge.generators import (
    CN_MAX_TURN_TOKENS,
    FALLBACK_UTTERANCE,
    GeneratedConversation,
    GenerationRequest,
    Mode,
    generate_cn,
    generate_sl,
    sample_inference_controls,
    summary_speakers,
)
from convforge.lmbridge import SamplingParams, TinyArch, TinyCausalLM
from convforge.metrics import rouge_l_f1
from convforge.seqformat import ControlState, LengthBucket, linearize_conversation


@pytest.fixture(scope="module")
def untrained():
    return TinyCausalLM.from_texts(["hello there , how are you ?"], TinyArch(d_model=32, n_layers=1))


def test_sl_memorises_training_data(sl_model, anon_records):
    params = SamplingParams(top_p=0.05, min_length=0, max_length=160)
    scores, ok = [], 0
    for i, rec in enumerate(anon_records[:20]):
        out = generate_sl(sl_model, rec.summary, SamplingParams(**{**params.__dict__, "seed": i}), rec.id)
        ok += out.well_formed
        scores.append(rouge_l_f1(linearize_conversation(out.conversation), linearize_conversation(rec.conversation)))
    assert ok >= 18
    assert sum(scores) / len(scores) > 0.5


def test_sl_output_fields(sl_model, anon_records):
    rec = anon_records[0]
    out = generate_sl(sl_model, rec.summary, SamplingParams(min_length=0, max_length=120, seed=4), "x")
    assert out.id == "x" and out.mode == Mode.SL and out.summary == rec.summary
    assert len(out.token_ids) == len(out.logprobs)
    assert out == generate_sl(sl_model, rec.summary, SamplingParams(min_length=0, max_length=120, seed=4), "x")
    with pytest.raises(DataError):
        generate_sl(sl_model, " ", SamplingParams())


@settings(max_examples=30, deadline=None)
@given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=60).filter(lambda s: s.strip() and "<" not in s))
def test_sl_never_raises_on_arbitrary_summaries(untrained, summary):
    out = generate_sl(untrained, summary, SamplingParams(min_length=0, max_length=60, seed=1))
    assert out.well_formed == bool(out.conversation.turns)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 10**6))
def test_cn_exact_turns_and_speakers(untrained, n, k, seed):
    speakers = [f"person_{j}" for j in range(k + 1)]
    controls = sample_inference_controls((n, n), speakers, seed)
    out = generate_cn(untrained, "person_0 says hello", controls, SamplingParams(min_length=0, max_length=160, seed=seed))
    assert len(out.conversation.turns) == n
    assert [t.speaker for t in out.conversation.turns] == [c.next_speaker for c in controls]
    assert out.well_formed
    assert all(t.text.strip() for t in out.conversation.turns)
    assert all(len(t.text.split()) <= CN_MAX_TURN_TOKENS for t in out.conversation.turns)
    assert out.controls_used == controls


def test_cn_fallbacks_counted(untrained):
    controls = sample_inference_controls((5, 5), seed=0)
    out = generate_cn(untrained, "s", controls, SamplingParams(min_length=0, max_length=160))
    assert out.n_fallbacks == sum(t.text == FALLBACK_UTTERANCE for t in out.conversation.turns)


def test_cn_rejects_bad_controls(untrained):
    with pytest.raises(DataError):
        generate_cn(untrained, "s", [], SamplingParams())
    with pytest.raises(DataError):
        generate_cn(untrained, "s", [ControlState(1, "person_0", "Short"), ControlState(1, "person_0", "Short")], SamplingParams())


def test_two_turn_range_gives_two():
    for seed in range(50):
        controls = sample_inference_controls((2, 2), seed=seed)
        assert [c.turns_to_go for c in controls] == [2, 1]


def test_controls_range_countdown_and_determinism():
    seen = set()
    for seed in range(500):
        controls = sample_inference_controls((4, 15), ("person_0", "person_1", "person_2"), seed)
        n = len(controls)
        seen.add(n)
        assert 4 <= n <= 15
        assert [c.turns_to_go for c in controls] == list(range(n, 0, -1))
        assert {c.next_speaker for c in controls} <= {"person_0", "person_1", "person_2"}
    assert seen == set(range(4, 16))
    assert sample_inference_controls(seed=9) == sample_inference_controls(seed=9)
    with pytest.raises(DataError):
        sample_inference_controls((5, 4))
    with pytest.raises(DataError):
        sample_inference_controls(speakers=())


def test_bucket_frequencies_within_three_sigma():
    counts: Counter = Counter()
    total = 0
    for seed in range(10_000):
        for c in sample_inference_controls((1, 3), seed=seed):
            counts[c.next_length] += 1
            total += 1
    sigma = math.sqrt(total * (1 / 3) * (2 / 3))
    for bucket in LengthBucket:
        assert abs(counts[bucket] - total / 3) <= 3 * sigma


def test_summary_speakers():
    assert summary_speakers("no tags here") == ["person_0", "person_1"]
    assert summary_speakers("person_3 calls person_1") == ["person_1", "person_3"]
    assert summary_speakers("person_3 calls person_1", minimum=3) == ["person_0", "person_1", "person_3"]
    assert summary_speakers("person_2 alone") == ["person_0", "person_2"]


def test_generation_request_validation():
    GenerationRequest("s", Mode.SL, SamplingParams())
    GenerationRequest("s", Mode.CN, SamplingParams(), (ControlState(1, "person_0", "Short"),))
    with pytest.raises(DataError):
        GenerationRequest("s", Mode.CN, SamplingParams())
    with pytest.raises(DataError):
        GenerationRequest("s", Mode.SL, SamplingParams(), (ControlState(1, "person_0", "Short"),))


def test_generated_roundtrip():
    rng = random.Random(0)
    conv = Conversation("g", tuple(Turn(f"person_{rng.randint(0, 1)}", "w x") for _ in range(3)))
    g = GeneratedConversation(conv, True, "raw", Mode.CN, "s", [ControlState(1, "person_0", "Long")], 2)
    assert GeneratedConversation.from_dict(g.to_dict()) == g
