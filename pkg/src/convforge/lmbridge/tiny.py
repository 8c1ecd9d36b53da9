"""Small randomly initialised transformer backends.

These train in seconds on a CPU and stand in for the pretrained checkpoints
in tests and smoke runs. Vocabularies are word level (see :mod:`.vocab`), so
special tokens are atomic by construction.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..seqformat import BOS, EOS, SequenceEncoding
from .base import (
    MAX_LENGTH,
    MAX_SOURCE_LENGTH,
    MAX_TARGET_LENGTH,
    SEGMENT_IDS,
    CausalLM,
    Seq2SeqLM,
    TrainConfig,
    _Config,
    pad_batch,
    run_epochs,
)
from .vocab import WordVocab

WEIGHTS = "weights.pt"
VOCAB = "vocab.json"
SIDECAR = "config.json"


@dataclass(frozen=True)
class TinyArch(_Config):
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    dropout: float = 0.0
    n_speakers: int = 16
    init_seed: int = 0


def _encoder(arch: TinyArch) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        arch.d_model, arch.n_heads, arch.d_ff, arch.dropout, batch_first=True, norm_first=True
    )
    return nn.TransformerEncoder(layer, arch.n_layers, enable_nested_tensor=False)


class TinyDecoderNet(nn.Module):
    def __init__(self, vocab_size: int, arch: TinyArch, max_length: int) -> None:
        super().__init__()
        self.tok = nn.Embedding(vocab_size, arch.d_model)
        self.pos = nn.Embedding(max_length, arch.d_model)
        self.seg = nn.Embedding(len(SEGMENT_IDS), arch.d_model)
        self.blocks = _encoder(arch)
        self.norm = nn.LayerNorm(arch.d_model)
        self.lm_head = nn.Linear(arch.d_model, vocab_size)
        self.value_head = nn.Linear(arch.d_model, 1)

    def forward(self, ids: torch.Tensor, segs: torch.Tensor):
        t = ids.size(1)
        pos = torch.arange(t, device=ids.device)
        x = self.tok(ids) + self.pos(pos)[None] + self.seg(segs)
        mask = nn.Transformer.generate_square_subsequent_mask(t)
        h = self.norm(self.blocks(x, mask=mask, is_causal=True))
        return self.lm_head(h), self.value_head(h).squeeze(-1)


def _init_net(build, seed: int) -> nn.Module:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return build()


def _write_sidecar(path: Path, payload: dict) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / SIDECAR).write_text(json.dumps(payload, indent=2, sort_keys=True))


class TinyCausalLM(CausalLM):
    backend = "tiny"

    def __init__(self, vocab: WordVocab, arch: TinyArch = TinyArch(), max_length: int = MAX_LENGTH) -> None:
        super().__init__()
        self.vocab = vocab
        self.arch = arch
        self.max_length = max_length
        self.special_tokens = list(vocab.special)
        self.net = _init_net(lambda: TinyDecoderNet(len(vocab), arch, max_length), arch.init_seed)
        self.net.eval()

    @classmethod
    def from_texts(cls, texts: Iterable[str], arch: TinyArch = TinyArch(), max_length: int = MAX_LENGTH) -> TinyCausalLM:
        return cls(WordVocab.build(texts, arch.n_speakers), arch, max_length)

    def encode(self, enc: SequenceEncoding) -> tuple[list[int], list[int]]:
        return self.vocab.encode(enc, SEGMENT_IDS)

    def decode(self, ids: Sequence[int]) -> str:
        return self.vocab.decode(ids)

    def token_id(self, token: str) -> int:
        return self.vocab.stoi[token]

    @property
    def pad_id(self) -> int:
        return self.vocab.pad_id

    def forward(self, ids, segs, attention_mask=None):
        # right padding only, so the causal mask already hides pad positions
        return self.net(ids, segs)

    def modules(self) -> list[nn.Module]:
        return [self.net]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        _write_sidecar(path, {
            "backend": self.backend,
            "kind": "causal",
            "arch": self.arch.to_dict(),
            "max_length": self.max_length,
            "special_tokens": self.special_tokens,
        })
        torch.save(self.net.state_dict(), path / WEIGHTS)
        self.vocab.save(path / VOCAB)

    @classmethod
    def load(cls, path: str | Path) -> TinyCausalLM:
        path = Path(path)
        meta = json.loads((path / SIDECAR).read_text())
        model = cls(WordVocab.load(path / VOCAB), TinyArch.from_dict(meta["arch"]), meta["max_length"])
        model.net.load_state_dict(torch.load(path / WEIGHTS, weights_only=True))
        return model


class TinySeq2SeqNet(nn.Module):
    def __init__(self, vocab_size: int, arch: TinyArch, max_positions: int) -> None:
        super().__init__()
        self.tok = nn.Embedding(vocab_size, arch.d_model)
        self.pos = nn.Embedding(max_positions, arch.d_model)
        self.encoder = _encoder(arch)
        dec_layer = nn.TransformerDecoderLayer(
            arch.d_model, arch.n_heads, arch.d_ff, arch.dropout, batch_first=True, norm_first=True
        )
        self.decoder = nn.TransformerDecoder(dec_layer, arch.n_layers)
        self.norm = nn.LayerNorm(arch.d_model)
        self.lm_head = nn.Linear(arch.d_model, vocab_size)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok(ids) + self.pos(torch.arange(ids.size(1)))[None]

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.embed(src), src_key_padding_mask=src_pad)

    def decode(self, tgt: torch.Tensor, memory: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        t = tgt.size(1)
        mask = nn.Transformer.generate_square_subsequent_mask(t)
        h = self.decoder(self.embed(tgt), memory, tgt_mask=mask, tgt_is_causal=True, memory_key_padding_mask=src_pad)
        return self.lm_head(self.norm(h))


class TinySeq2Seq(Seq2SeqLM):
    backend = "tiny"

    def __init__(
        self,
        vocab: WordVocab,
        arch: TinyArch = TinyArch(),
        max_source_length: int = MAX_SOURCE_LENGTH,
        max_target_length: int = MAX_TARGET_LENGTH,
    ) -> None:
        super().__init__()
        self.vocab = vocab
        self.arch = arch
        self.max_source_length = max_source_length
        self.max_target_length = max_target_length
        positions = max(max_source_length, max_target_length + 1)
        self.net = _init_net(lambda: TinySeq2SeqNet(len(vocab), arch, positions), arch.init_seed)
        self.net.eval()
        self.bos_id = vocab.stoi[BOS]
        self.eos_id = vocab.stoi[EOS]

    @classmethod
    def from_texts(cls, texts: Iterable[str], arch: TinyArch = TinyArch()) -> TinySeq2Seq:
        return cls(WordVocab.build(texts, arch.n_speakers), arch)

    def _source(self, text: str) -> list[int]:
        ids = self.vocab.encode_text(text)[: self.max_source_length]
        return ids or [self.bos_id]

    def _target(self, text: str) -> list[int]:
        body = self.vocab.encode_text(text)[: self.max_target_length - 1]
        return [self.bos_id, *body, self.eos_id]

    def fit(self, pairs: Sequence[tuple[str, str]], cfg: TrainConfig) -> list[float]:
        data = [(self._source(src), self._target(tgt)) for src, tgt in pairs]
        pad = self.vocab.pad_id

        def batch_loss(idx):
            src = pad_batch([data[i][0] for i in idx], pad)
            tgt = pad_batch([data[i][1] for i in idx], pad)
            src_pad = src == pad
            memory = self.net.encode(src, src_pad)
            logits = self.net.decode(tgt[:, :-1], memory, src_pad)
            gold = tgt[:, 1:]
            mask = gold != pad
            loss = F.cross_entropy(logits.reshape(-1, logits.size(-1)), gold.reshape(-1), reduction="none")
            return loss.view(gold.shape)[mask].sum(), int(mask.sum())

        return run_epochs(list(self.net.parameters()), len(data), batch_loss, cfg, self.net.train)

    @torch.no_grad()
    def summarize(self, text: str) -> str:
        self.net.eval()
        src = torch.tensor([self._source(text)])
        src_pad = torch.zeros_like(src, dtype=torch.bool)
        memory = self.net.encode(src, src_pad)
        out = [self.bos_id]
        banned = [self.vocab.pad_id, self.bos_id]
        for step in range(self.max_target_length):
            logits = self.net.decode(torch.tensor([out]), memory, src_pad)[0, -1]
            logits[banned] = float("-inf")
            if step == 0:
                # at least one token, so the summary is never empty
                logits[self.eos_id] = float("-inf")
            tok = int(torch.argmax(logits))
            if tok == self.eos_id:
                break
            out.append(tok)
        return self.vocab.decode(out[1:])

    def save(self, path: str | Path) -> None:
        path = Path(path)
        _write_sidecar(path, {
            "backend": self.backend,
            "kind": "seq2seq",
            "arch": self.arch.to_dict(),
            "max_source_length": self.max_source_length,
            "max_target_length": self.max_target_length,
            "special_tokens": list(self.vocab.special),
        })
        torch.save(self.net.state_dict(), path / WEIGHTS)
        self.vocab.save(path / VOCAB)

    @classmethod
    def load(cls, path: str | Path) -> TinySeq2Seq:
        path = Path(path)
        meta = json.loads((path / SIDECAR).read_text())
        model = cls(
            WordVocab.load(path / VOCAB),
            TinyArch.from_dict(meta["arch"]),
            meta["max_source_length"],
            meta["max_target_length"],
        )
        model.net.load_state_dict(torch.load(path / WEIGHTS, weights_only=True))
        return model
