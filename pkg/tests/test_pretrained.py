"""Pretrained backend wiring, exercised with tiny randomly initialised models."""

from __future__ import annotations

import pytest
import torch

transformers = pytest.importorskip("transformers")
tokenizers = pytest.importorskip("tokenizers")

from convforge.corpus import anonymize  # noqa: E402
from convforge.lmbridge import (  # noqa: E402
    SamplingParams,
    TrainConfig,
    finetune_causal,
    finetune_seq2seq,
    load_model,
    sample_causal,
)
from convforge.lmbridge.pretrained import PretrainedCausalLM, PretrainedSeq2Seq  # noqa: E402
from convforge.seqformat import encode_cn, encode_sl, linearize_conversation, special_tokens  # noqa: E402
from convforge.seqformat import ControlState, LengthBucket  # noqa: E402
from convforge.synthetic import synthetic_records  # noqa: E402


@pytest.fixture(scope="module")
def records():
    return [anonymize(r)[0] for r in synthetic_records(20)]


def _tokenizer(records):
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers
    from transformers import PreTrainedTokenizerFast

    words = sorted({w for r in records for w in (r.summary + " " + linearize_conversation(r.conversation)).split()})
    vocab = {w: i for i, w in enumerate(["[UNK]", "</s>", "<s>", "<pad>", "s", "hi", "hello", "2", "Short"] + words)}
    tk = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tk.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    tk.decoder = decoders.WordPiece(prefix="##")
    return PreTrainedTokenizerFast(tokenizer_object=tk, unk_token="[UNK]", eos_token="</s>", bos_token="<s>", pad_token="<pad>")


@pytest.fixture(scope="module")
def causal(records):
    from transformers import GPT2Config, GPT2LMHeadModel

    tok = _tokenizer(records)
    torch.manual_seed(0)
    model = GPT2LMHeadModel(GPT2Config(vocab_size=len(tok) + 40, n_positions=256, n_embd=32, n_layer=2, n_head=2))
    return PretrainedCausalLM(model, tok, max_length=256)


def test_reserved_tokens_are_atomic(causal):
    for tok in special_tokens(4):
        ids = causal.tokenizer(f"hello {tok} hello", add_special_tokens=False)["input_ids"]
        assert causal.token_id(tok) in ids
        assert len(ids) == 3


def test_encode_segments_align(causal, records):
    enc = encode_cn("s", list(records[0].conversation.turns[:1]), ControlState(2, "person_1", LengthBucket.SHORT), "hi")
    ids, segs = causal.encode(enc)
    assert len(ids) == len(segs)
    assert len(set(segs)) == 3
    assert causal.decode(ids).replace(" ", "") == enc.text.replace(" ", "").replace("\n", "")


def test_training_cache_and_roundtrip(causal, records, tmp_path):
    seqs = [encode_sl(r.summary, r.conversation) for r in records]
    finetune_causal(causal, seqs, TrainConfig(learning_rate=3e-3, epochs=3, batch_size=8, gradient_accumulation=1, warmup_steps=0))
    assert causal.train_losses[-1] < causal.train_losses[0]
    ids, segs = causal.encode(seqs[0])
    full, values = causal.forward(torch.tensor([ids]), torch.tensor([segs]))
    assert values.shape == full.shape[:2]
    _, cache = causal.next_logits(ids[:10], segs[:10])
    step, _ = causal.next_logits(ids[:11], segs[:11], cache)
    assert torch.allclose(step, full[0, 10], atol=1e-4)
    out = sample_causal(causal, encode_sl(records[0].summary), SamplingParams(min_length=3, max_length=60, seed=1))
    assert len(out.token_ids) >= 3
    causal.save(tmp_path / "m")
    loaded = load_model(tmp_path / "m")
    assert isinstance(loaded, PretrainedCausalLM)
    again, _ = loaded.forward(torch.tensor([ids]), torch.tensor([segs]))
    assert torch.allclose(again, full, atol=1e-5)


def test_seq2seq_wiring(records, tmp_path):
    from transformers import BartConfig, BartForConditionalGeneration

    tok = _tokenizer(records)
    torch.manual_seed(0)
    cfg = BartConfig(
        vocab_size=len(tok) + 40, d_model=32, encoder_layers=1, decoder_layers=1,
        encoder_attention_heads=2, decoder_attention_heads=2, encoder_ffn_dim=64, decoder_ffn_dim=64,
        max_position_embeddings=600, pad_token_id=3, bos_token_id=2, eos_token_id=1,
        decoder_start_token_id=2, forced_eos_token_id=1,
    )
    model = PretrainedSeq2Seq(BartForConditionalGeneration(cfg), tok)
    pairs = [(linearize_conversation(r.conversation), r.summary) for r in records]
    finetune_seq2seq(model, pairs, TrainConfig.summarizer(learning_rate=3e-3, epochs=3))
    assert model.train_losses[-1] < model.train_losses[0]
    out = model.summarize(pairs[0][0])
    assert out.strip() and out == model.summarize(pairs[0][0])
    model.save(tmp_path / "s")
    assert isinstance(load_model(tmp_path / "s"), PretrainedSeq2Seq)
