"""Hugging Face backends (GPT-2 style generators, BART style summarizers).

Reserved tokens are added to the tokenizer as atomic special tokens. Segment
labels become ``token_type_ids`` that point at reserved-token embeddings, so
no extra embedding table is needed.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from pathlib import Path

import torch
import torch.nn as nn
from transformers import (
    AutoModelForCausalLM,
    AutoModelForSeq2SeqLM,
    AutoTokenizer,
    PreTrainedModel,
    PreTrainedTokenizerBase,
)

from ..seqformat import BOS, CONTEXT, DIALOG, SequenceEncoding, special_tokens
from .base import (
    MAX_LENGTH,
    MAX_SOURCE_LENGTH,
    MAX_TARGET_LENGTH,
    SEGMENT_IDS,
    CausalLM,
    Seq2SeqLM,
    TrainConfig,
    run_epochs,
)

DEFAULT_GENERATOR = "gpt2"
DEFAULT_SUMMARIZER = "sshleifer/distilbart-xsum-12-6"
HF_DIR = "hf"
VALUE_HEAD = "value_head.pt"
SIDECAR = "config.json"
PAD = "<pad>"

# segment -> reserved token whose embedding doubles as the token-type embedding
SEGMENT_TYPE_TOKENS = {"summary": BOS, "conversation": DIALOG, "control": CONTEXT}


def add_reserved_tokens(tokenizer: PreTrainedTokenizerBase, n_speakers: int = 16) -> list[str]:
    reserved = special_tokens(n_speakers)
    extra = {"additional_special_tokens": reserved}
    if tokenizer.pad_token is None:
        extra["pad_token"] = PAD
    tokenizer.add_special_tokens(extra)
    return reserved


def _write_sidecar(path: Path, payload: dict) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / SIDECAR).write_text(json.dumps(payload, indent=2, sort_keys=True))


class PretrainedCausalLM(CausalLM):
    backend = "pretrained"

    def __init__(
        self,
        model: PreTrainedModel,
        tokenizer: PreTrainedTokenizerBase,
        max_length: int = MAX_LENGTH,
        n_speakers: int = 16,
    ) -> None:
        super().__init__()
        self.tokenizer = tokenizer
        self.special_tokens = add_reserved_tokens(tokenizer, n_speakers)
        self.n_speakers = n_speakers
        self.model = model
        if model.get_input_embeddings().num_embeddings < len(tokenizer):
            model.resize_token_embeddings(len(tokenizer))
        self.max_length = min(max_length, getattr(model.config, "n_positions", max_length))
        self.value_head = nn.Linear(model.config.hidden_size, 1)
        self.type_ids = {SEGMENT_IDS[seg]: tokenizer.convert_tokens_to_ids(tok) for seg, tok in SEGMENT_TYPE_TOKENS.items()}
        model.eval()

    @classmethod
    def from_pretrained(cls, name: str = DEFAULT_GENERATOR, max_length: int = MAX_LENGTH, n_speakers: int = 16):
        tokenizer = AutoTokenizer.from_pretrained(name)
        return cls(AutoModelForCausalLM.from_pretrained(name), tokenizer, max_length, n_speakers)

    def encode(self, enc: SequenceEncoding) -> tuple[list[int], list[int]]:
        batch = self.tokenizer(enc.text, return_offsets_mapping=True, add_special_tokens=False)
        segs = [SEGMENT_IDS[enc.label_at(start)] for start, _ in batch["offset_mapping"]]
        return list(batch["input_ids"]), segs

    def decode(self, ids: Sequence[int]) -> str:
        return self.tokenizer.decode(list(ids), skip_special_tokens=False, clean_up_tokenization_spaces=False)

    def token_id(self, token: str) -> int:
        return self.tokenizer.convert_tokens_to_ids(token)

    @property
    def pad_id(self) -> int:
        return self.tokenizer.pad_token_id

    def _token_types(self, segs: torch.Tensor) -> torch.Tensor:
        out = torch.empty_like(segs)
        for seg, tok in self.type_ids.items():
            out[segs == seg] = tok
        return out

    def forward(self, ids, segs, attention_mask=None):
        out = self.model(
            input_ids=ids,
            attention_mask=attention_mask,
            token_type_ids=self._token_types(segs),
            output_hidden_states=True,
        )
        values = self.value_head(out.hidden_states[-1]).squeeze(-1)
        return out.logits, values

    def next_logits(self, ids: list[int], segs: list[int], cache=None):
        if cache is None:
            start, past = 0, None
        else:
            past, start = cache
        new_ids = torch.tensor([ids[start:]])
        out = self.model(
            input_ids=new_ids,
            token_type_ids=self._token_types(torch.tensor([segs[start:]])),
            past_key_values=past,
            use_cache=True,
        )
        return out.logits[0, -1], (out.past_key_values, len(ids))

    def modules(self) -> list[nn.Module]:
        return [self.model, self.value_head]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        _write_sidecar(path, {
            "backend": self.backend,
            "kind": "causal",
            "max_length": self.max_length,
            "n_speakers": self.n_speakers,
            "special_tokens": self.special_tokens,
        })
        self.model.save_pretrained(path / HF_DIR)
        self.tokenizer.save_pretrained(path / HF_DIR)
        torch.save(self.value_head.state_dict(), path / VALUE_HEAD)

    @classmethod
    def load(cls, path: str | Path) -> PretrainedCausalLM:
        path = Path(path)
        meta = json.loads((path / SIDECAR).read_text())
        tokenizer = AutoTokenizer.from_pretrained(path / HF_DIR)
        model = AutoModelForCausalLM.from_pretrained(path / HF_DIR)
        lm = cls(model, tokenizer, meta["max_length"], meta["n_speakers"])
        lm.value_head.load_state_dict(torch.load(path / VALUE_HEAD, weights_only=True))
        return lm


class PretrainedSeq2Seq(Seq2SeqLM):
    backend = "pretrained"

    def __init__(
        self,
        model: PreTrainedModel,
        tokenizer: PreTrainedTokenizerBase,
        max_source_length: int = MAX_SOURCE_LENGTH,
        max_target_length: int = MAX_TARGET_LENGTH,
        n_speakers: int = 16,
    ) -> None:
        super().__init__()
        self.tokenizer = tokenizer
        add_reserved_tokens(tokenizer, n_speakers)
        self.n_speakers = n_speakers
        self.model = model
        if model.get_input_embeddings().num_embeddings < len(tokenizer):
            model.resize_token_embeddings(len(tokenizer))
        self.max_source_length = max_source_length
        self.max_target_length = max_target_length
        model.eval()

    @classmethod
    def from_pretrained(cls, name: str = DEFAULT_SUMMARIZER, n_speakers: int = 16) -> PretrainedSeq2Seq:
        return cls(AutoModelForSeq2SeqLM.from_pretrained(name), AutoTokenizer.from_pretrained(name), n_speakers=n_speakers)

    def fit(self, pairs: Sequence[tuple[str, str]], cfg: TrainConfig) -> list[float]:
        def batch_loss(idx):
            src = self.tokenizer(
                [pairs[i][0] for i in idx],
                max_length=self.max_source_length,
                truncation=True,
                padding=True,
                return_tensors="pt",
            )
            tgt = self.tokenizer(
                text_target=[pairs[i][1] for i in idx],
                max_length=self.max_target_length,
                truncation=True,
                padding=True,
                return_tensors="pt",
            )
            labels = tgt["input_ids"].masked_fill(tgt["attention_mask"] == 0, -100)
            logits = self.model(**src, labels=labels).logits
            loss = nn.functional.cross_entropy(
                logits.reshape(-1, logits.size(-1)), labels.reshape(-1), ignore_index=-100, reduction="sum"
            )
            return loss, int((labels != -100).sum())

        return run_epochs(list(self.model.parameters()), len(pairs), batch_loss, cfg, self.model.train)

    @torch.no_grad()
    def summarize(self, text: str) -> str:
        self.model.eval()
        src = self.tokenizer(text, max_length=self.max_source_length, truncation=True, return_tensors="pt")
        out = self.model.generate(
            **src, max_new_tokens=self.max_target_length, min_new_tokens=1, num_beams=1, do_sample=False
        )
        return self.tokenizer.decode(out[0], skip_special_tokens=True).strip()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        _write_sidecar(path, {
            "backend": self.backend,
            "kind": "seq2seq",
            "max_source_length": self.max_source_length,
            "max_target_length": self.max_target_length,
            "n_speakers": self.n_speakers,
        })
        self.model.save_pretrained(path / HF_DIR)
        self.tokenizer.save_pretrained(path / HF_DIR)

    @classmethod
    def load(cls, path: str | Path) -> PretrainedSeq2Seq:
        path = Path(path)
        meta = json.loads((path / SIDECAR).read_text())
        return cls(
            AutoModelForSeq2SeqLM.from_pretrained(path / HF_DIR),
            AutoTokenizer.from_pretrained(path / HF_DIR),
            meta["max_source_length"],
            meta["max_target_length"],
            meta["n_speakers"],
        )
