from __future__ import annotations

import copy
import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn.functional as F

from ..errors import DataError
from ..seqformat import CONTROL_SEG, CONVERSATION_SEG, EOS, SUMMARY_SEG, SequenceEncoding

log = logging.getLogger(__name__)

SEGMENT_IDS = {SUMMARY_SEG: 0, CONVERSATION_SEG: 1, CONTROL_SEG: 2}
MAX_LENGTH = 512
MAX_SOURCE_LENGTH = 512
MAX_TARGET_LENGTH = 80


def _check_fields(obj, positive: Iterable[str], non_negative: Iterable[str] = ()) -> None:
    for name in positive:
        if not getattr(obj, name) > 0:
            raise DataError(f"{type(obj).__name__}.{name} must be positive, got {getattr(obj, name)}")
    for name in non_negative:
        if getattr(obj, name) < 0:
            raise DataError(f"{type(obj).__name__}.{name} must be >= 0, got {getattr(obj, name)}")


class _Config:
    """Mixin for flat config dataclasses that round-trip through dicts."""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**d)

    def updated(self, overrides: dict | None):
        if not overrides:
            return self
        return type(self).from_dict({**self.to_dict(), **overrides})


@dataclass(frozen=True)
class SamplingParams(_Config):
    top_p: float = 0.95
    top_k: int = 0
    min_length: int = 20
    max_length: int = MAX_LENGTH
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.top_p <= 1:
            raise DataError(f"top_p must lie in (0, 1], got {self.top_p}")
        _check_fields(self, ["max_length", "temperature"], ["top_k", "min_length"])
        if self.min_length > self.max_length:
            raise DataError("min_length must not exceed max_length")


@dataclass(frozen=True)
class TrainConfig(_Config):
    learning_rate: float = 6.25e-5
    epochs: int = 10
    batch_size: int = 4
    gradient_accumulation: int = 4
    warmup_steps: int = 500
    max_grad_norm: float = 1.0
    adam_epsilon: float = 1e-8
    seed: int = 0
    # Exclude summary tokens from the causal LM loss.
    mask_summary: bool = False

    def __post_init__(self) -> None:
        _check_fields(
            self,
            ["learning_rate", "epochs", "batch_size", "gradient_accumulation", "max_grad_norm", "adam_epsilon"],
            ["warmup_steps"],
        )

    @classmethod
    def summarizer(cls, **overrides) -> TrainConfig:
        base = cls(learning_rate=3e-5, epochs=10, batch_size=4, gradient_accumulation=1, warmup_steps=0)
        return base.updated(overrides)


@dataclass
class SampleOutput:
    """Result of one sampling call.

    ``token_ids`` and ``logprobs`` include the terminating stop token when one
    was emitted; ``text`` never does.
    """

    text: str
    token_ids: list[int]
    logprobs: list[float]
    stopped: bool


# --------------------------------------------------------------------------- #
# Model interfaces
# --------------------------------------------------------------------------- #


class CausalLM(ABC):
    """Decoder-only LM with a scalar value head."""

    backend: str = ""
    max_length: int = MAX_LENGTH

    def __init__(self) -> None:
        self.train_losses: list[float] = []
        self.skipped_sequences = 0

    @abstractmethod
    def encode(self, enc: SequenceEncoding) -> tuple[list[int], list[int]]:
        """Token ids and segment ids for a linearized sequence."""

    @abstractmethod
    def decode(self, ids: Sequence[int]) -> str: ...

    @abstractmethod
    def token_id(self, token: str) -> int: ...

    @property
    @abstractmethod
    def pad_id(self) -> int: ...

    @abstractmethod
    def forward(self, ids: torch.Tensor, segs: torch.Tensor, attention_mask: torch.Tensor | None = None):
        """Return ``(logits [B, T, V], values [B, T])``."""

    @abstractmethod
    def modules(self) -> list[torch.nn.Module]: ...

    @abstractmethod
    def save(self, path: str | Path) -> None: ...

    def parameters(self) -> list[torch.nn.Parameter]:
        return [p for m in self.modules() for p in m.parameters()]

    def train(self, mode: bool = True) -> None:
        for m in self.modules():
            m.train(mode)

    def next_logits(self, ids: list[int], segs: list[int], cache=None):
        """Logits for the token following ``ids``; backends may keep a cache."""
        logits, _ = self.forward(torch.tensor([ids]), torch.tensor([segs]))
        return logits[0, -1], None

    def clone(self) -> CausalLM:
        return copy.deepcopy(self)

    def freeze(self) -> CausalLM:
        for p in self.parameters():
            p.requires_grad_(False)
        self.train(False)
        return self


class Seq2SeqLM(ABC):
    """Encoder-decoder summarizer with deterministic (greedy) decoding."""

    backend: str = ""
    max_source_length: int = MAX_SOURCE_LENGTH
    max_target_length: int = MAX_TARGET_LENGTH

    def __init__(self) -> None:
        self.train_losses: list[float] = []

    @abstractmethod
    def fit(self, pairs: Sequence[tuple[str, str]], cfg: TrainConfig) -> list[float]: ...

    @abstractmethod
    def summarize(self, text: str) -> str: ...

    @abstractmethod
    def save(self, path: str | Path) -> None: ...


# --------------------------------------------------------------------------- #
# Training helpers
# --------------------------------------------------------------------------- #


def linear_schedule(optimizer: torch.optim.Optimizer, warmup: int, total: int) -> torch.optim.lr_scheduler.LambdaLR:
    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / (warmup + 1)
        return max(0.0, (total - step) / max(1, total - warmup))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def pad_batch(rows: Sequence[Sequence[int]], pad: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    return torch.tensor([list(r) + [pad] * (width - len(r)) for r in rows], dtype=torch.long)


def run_epochs(
    params: list[torch.nn.Parameter],
    n_examples: int,
    batch_loss,
    cfg: TrainConfig,
    train_mode,
) -> list[float]:
    """Shared optimisation loop.

    ``batch_loss(indices)`` returns ``(summed_loss, n_tokens)`` for a batch of
    example indices. Returns the token-weighted mean loss of every epoch.
    """
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate, eps=cfg.adam_epsilon, weight_decay=0.0)
    batches_per_epoch = math.ceil(n_examples / cfg.batch_size)
    updates = cfg.epochs * math.ceil(batches_per_epoch / cfg.gradient_accumulation)
    scheduler = linear_schedule(optimizer, cfg.warmup_steps, updates)
    gen = torch.Generator().manual_seed(cfg.seed)
    train_mode(True)
    losses = []
    for _ in range(cfg.epochs):
        order = torch.randperm(n_examples, generator=gen).tolist()
        total, count = 0.0, 0
        optimizer.zero_grad()
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss_sum, n_tok = batch_loss(idx)
            (loss_sum / max(n_tok, 1) / cfg.gradient_accumulation).backward()
            total += loss_sum.item()
            count += n_tok
            last = b == batches_per_epoch - 1
            if (b + 1) % cfg.gradient_accumulation == 0 or last:
                torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
                optimizer.step()
                scheduler.step()
                optimizer.zero_grad()
        losses.append(total / max(count, 1))
    train_mode(False)
    return losses


def _prepare_causal(model: CausalLM, seq: SequenceEncoding, mask_summary: bool):
    ids, segs = model.encode(seq)
    summary_len = sum(1 for s in segs if s == SEGMENT_IDS[SUMMARY_SEG])
    if len(ids) > model.max_length:
        if summary_len + 1 >= model.max_length:
            return None
        # conversation side is cut from the right; the summary is kept whole
        ids, segs = ids[: model.max_length], segs[: model.max_length]
    targets = [True] * (len(ids) - 1)
    if mask_summary:
        targets = [s != SEGMENT_IDS[SUMMARY_SEG] for s in segs[1:]]
    if not any(targets):
        return None
    return ids, segs, targets


def finetune_causal(model: CausalLM, sequences: Sequence[SequenceEncoding], cfg: TrainConfig) -> CausalLM:
    """Cross-entropy fine-tuning over every token after ``<bos>``.

    Per-epoch mean losses land in ``model.train_losses``; sequences that leave
    nothing to train on are skipped and counted in ``model.skipped_sequences``.
    """
    if not sequences:
        raise DataError("finetune_causal needs at least one sequence")
    examples = []
    for seq in sequences:
        prepared = _prepare_causal(model, seq, cfg.mask_summary)
        if prepared is None:
            model.skipped_sequences += 1
            log.warning("skipping sequence with no trainable tokens (%d so far)", model.skipped_sequences)
            continue
        examples.append(prepared)
    if not examples:
        raise DataError("no sequence has trainable tokens")

    def batch_loss(idx):
        rows = [examples[i] for i in idx]
        ids = pad_batch([r[0] for r in rows], model.pad_id)
        segs = pad_batch([r[1] for r in rows], 0)
        mask = pad_batch([r[2] for r in rows], 0).bool()
        attn = pad_batch([[1] * len(r[0]) for r in rows], 0)
        logits, _ = model.forward(ids, segs, attn)
        loss = F.cross_entropy(logits[:, :-1].reshape(-1, logits.size(-1)), ids[:, 1:].reshape(-1), reduction="none")
        loss = loss.view(mask.shape)[mask]
        return loss.sum(), int(mask.sum())

    model.train_losses = run_epochs(model.parameters(), len(examples), batch_loss, cfg, model.train)
    return model


def finetune_seq2seq(model: Seq2SeqLM, pairs: Sequence[tuple[str, str]], cfg: TrainConfig) -> Seq2SeqLM:
    """Teacher-forced fine-tuning on (conversation text, summary) pairs."""
    if not pairs:
        raise DataError("finetune_seq2seq needs at least one pair")
    for i, (_, target) in enumerate(pairs):
        if not target.strip():
            raise DataError(f"pair {i} has an empty summary")
    model.train_losses = model.fit(pairs, cfg)
    return model


def summarize(model: Seq2SeqLM, conversation_text: str) -> str:
    return model.summarize(conversation_text)


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #


def filter_logits(logits: torch.Tensor, top_k: int, top_p: float) -> torch.Tensor:
    """Top-k then nucleus filtering of a 1-D logits vector (removed entries -> -inf)."""
    logits = logits.clone()
    if top_k > 0 and top_k < logits.numel():
        kth = torch.topk(logits, top_k).values[-1]
        logits[logits < kth] = float("-inf")
    if top_p < 1.0:
        sorted_logits, order = torch.sort(logits, descending=True)
        probs = torch.softmax(sorted_logits, dim=-1)
        cum = torch.cumsum(probs, dim=-1)
        drop = cum - probs >= top_p
        drop[0] = False
        logits[order[drop]] = float("-inf")
    return logits


@torch.no_grad()
def sample_causal(
    model: CausalLM,
    prompt: SequenceEncoding,
    params: SamplingParams,
    stop_tokens: Iterable[str] = (EOS,),
) -> SampleOutput:
    """Nucleus / top-k sampling continuation of ``prompt``.

    Stop tokens are suppressed until ``params.min_length`` tokens exist.
    Logprobs are taken from the unfiltered, temperature-scaled distribution,
    which is what the PPO ratio is computed against.
    """
    ids, segs = model.encode(prompt)
    limit = min(params.max_length, model.max_length)
    if len(ids) >= limit:
        raise DataError(f"prompt has {len(ids)} tokens; the limit is {limit}")
    stop_ids = {model.token_id(t) for t in stop_tokens}
    gen = torch.Generator().manual_seed(params.seed)
    seg = SEGMENT_IDS[CONVERSATION_SEG]
    out_ids: list[int] = []
    logprobs: list[float] = []
    stopped = False
    cache = None
    model.train(False)
    while len(ids) < limit:
        logits, cache = model.next_logits(ids, segs, cache)
        logits = logits.float() / params.temperature
        logp = torch.log_softmax(logits, dim=-1)
        masked = logits.clone()
        masked[model.pad_id] = float("-inf")
        if len(out_ids) < params.min_length:
            blocked = masked.clone()
            blocked[list(stop_ids)] = float("-inf")
            if torch.isfinite(blocked).any():
                masked = blocked
        masked = filter_logits(masked, params.top_k, params.top_p)
        tok = int(torch.multinomial(torch.softmax(masked, dim=-1), 1, generator=gen))
        out_ids.append(tok)
        logprobs.append(float(logp[tok]))
        ids = ids + [tok]
        segs = segs + [seg]
        if tok in stop_ids:
            stopped = True
            break
    text_ids = out_ids[:-1] if stopped else out_ids
    return SampleOutput(model.decode(text_ids), out_ids, logprobs, stopped)
