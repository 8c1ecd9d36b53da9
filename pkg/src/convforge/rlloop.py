"""PPO fine-tuning of the whole-conversation generator.

The reward for a rollout is ROUGE-2 F1 between the summarizer's summary of the
generated conversation and the summary the conversation was grounded on. It
is paid on the last generated token; every token additionally carries a KL
penalty towards the frozen reference policy. Advantages use GAE and the policy
update is the clipped surrogate objective with a clipped value loss.
"""

from __future__ import annotations

import csv
import logging
import random
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .errors import DataError
from .generators import GeneratedConversation, Mode, generate_sl
from .lmbridge import SEGMENT_IDS, CausalLM, SamplingParams, Seq2SeqLM
from .lmbridge.base import _Config, pad_batch
from .metrics import rouge_n_f1
from .seqformat import CONVERSATION_SEG, TAG_RE, decode_conversation, encode_sl, linearize_conversation

log = logging.getLogger(__name__)

RewardFn = Callable[[GeneratedConversation, str], float]


@dataclass
class RewardRecord:
    summary_gt: str
    generated_conversation: GeneratedConversation
    generated_summary: str
    reward: float


class IdentitySummarizer(Seq2SeqLM):
    """Stub summarizer: returns the utterances of its input with speaker tags removed."""

    backend = "identity"

    def fit(self, pairs, cfg) -> list[float]:
        return []

    def summarize(self, text: str) -> str:
        return " ".join(TAG_RE.sub(" ", text).split())

    def save(self, path) -> None:
        raise NotImplementedError("the identity summarizer has no state to save")


def compute_reward(conv: GeneratedConversation, summary_gt: str, summarizer: Seq2SeqLM) -> RewardRecord:
    """Summarize the generated conversation and score it with ROUGE-2 F1."""
    if not summary_gt.strip():
        raise DataError("ground-truth summary is empty")
    conversation = conv.conversation
    if not conv.well_formed and conv.raw_text:
        conversation, _ = decode_conversation(conv.raw_text, conversation.id)
    text = linearize_conversation(conversation) if conversation.turns else ""
    generated = summarizer.summarize(text)
    reward = min(1.0, max(0.0, rouge_n_f1(generated, summary_gt, 2)))
    return RewardRecord(summary_gt, conv, generated, reward)


# --------------------------------------------------------------------------- #
# PPO pieces
# --------------------------------------------------------------------------- #


def gae_advantages(
    rewards: torch.Tensor, values: torch.Tensor, gamma: float, lam: float, mask: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Generalized advantage estimates over the last dimension.

    Positions where ``mask`` is 0 are treated as past the end of the episode.
    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    if mask is not None:
        rewards = rewards * mask
        values = values * mask
    advantages = torch.zeros_like(rewards)
    last = torch.zeros_like(rewards[..., 0])
    steps = rewards.size(-1)
    for t in reversed(range(steps)):
        next_value = values[..., t + 1] if t + 1 < steps else torch.zeros_like(last)
        delta = rewards[..., t] + gamma * next_value - values[..., t]
        last = delta + gamma * lam * last
        advantages[..., t] = last
    return advantages, advantages + values


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, cliprange: float) -> torch.Tensor:
    """Elementwise PPO objective ``min(r*A, clip(r, 1-eps, 1+eps)*A)`` (to be maximised)."""
    return torch.minimum(ratio * advantages, torch.clamp(ratio, 1 - cliprange, 1 + cliprange) * advantages)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (x * mask).sum() / mask.sum().clamp(min=1)


def masked_whiten(x: torch.Tensor, mask: torch.Tensor, shift_mean: bool = True) -> torch.Tensor:
    mean = masked_mean(x, mask)
    var = masked_mean((x - mean) ** 2, mask)
    out = (x - mean) * torch.rsqrt(var + 1e-8)
    if not shift_mean:
        out = out + mean
    return out * mask


class AdaptiveKLController:
    """Proportional controller driving the observed KL towards ``target``.

    The error is clipped to +-20% and scaled by ``n_steps / horizon``.
    """

    def __init__(self, init_kl_coef: float, target: float, horizon: int) -> None:
        self.value = init_kl_coef
        self.target = target
        self.horizon = horizon

    def update(self, current_kl: float, n_steps: int) -> None:
        error = min(max(current_kl / self.target - 1, -0.2), 0.2)
        self.value *= 1 + error * n_steps / self.horizon


class FixedKLController:
    def __init__(self, kl_coef: float) -> None:
        self.value = kl_coef

    def update(self, current_kl: float, n_steps: int) -> None:
        pass


@dataclass(frozen=True)
class PPOConfig(_Config):
    steps: int = 10000
    batch_size: int = 16
    forward_batch_size: int = 4
    learning_rate: float = 1.41e-5
    init_kl_coef: float = 0.2
    kl_target: float = 6.0
    horizon: int = 10000
    gamma: float = 1.0
    lam: float = 0.95
    cliprange: float = 0.2
    cliprange_value: float = 0.2
    vf_coef: float = 0.1
    ppo_epochs: int = 4
    adaptive_kl: bool = True
    whiten_rewards: bool = False
    max_grad_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise DataError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 < self.lam <= 1:
            raise DataError(f"lam must lie in (0, 1], got {self.lam}")
        if self.cliprange <= 0:
            raise DataError("cliprange must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.forward_batch_size < 1 or self.ppo_epochs < 1:
            raise DataError("steps must be >= 0 and batch sizes / ppo_epochs >= 1")


@dataclass
class PPOTrace:
    mean_reward: list[float] = field(default_factory=list)
    mean_kl: list[float] = field(default_factory=list)
    policy_loss: list[float] = field(default_factory=list)
    value_loss: list[float] = field(default_factory=list)
    kl_coef: list[float] = field(default_factory=list)
    skipped_steps: int = 0

    COLUMNS = ("step", "mean_reward", "mean_kl", "policy_loss", "value_loss", "kl_coef")

    def __len__(self) -> int:
        return len(self.mean_reward)

    def append(self, reward: float, kl: float, pg: float, vf: float, coef: float) -> None:
        self.mean_reward.append(reward)
        self.mean_kl.append(kl)
        self.policy_loss.append(pg)
        self.value_loss.append(vf)
        self.kl_coef.append(coef)

    def rows(self) -> list[tuple]:
        return [
            (i, *vals)
            for i, vals in enumerate(
                zip(self.mean_reward, self.mean_kl, self.policy_loss, self.value_loss, self.kl_coef)
            )
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for row in self.rows():
                writer.writerow([row[0], *(f"{v:.8g}" for v in row[1:])])


def _response_stats(model: CausalLM, rows: Sequence[tuple[list[int], list[int], int, int]]):
    """Per-response-token logprobs and values for ``(ids, segs, n_query, n_response)`` rows."""
    ids = pad_batch([r[0] for r in rows], model.pad_id)
    segs = pad_batch([r[1] for r in rows], 0)
    attn = pad_batch([[1] * len(r[0]) for r in rows], 0)
    logits, values = model.forward(ids, segs, attn)
    token_lp = torch.log_softmax(logits[:, :-1].float(), dim=-1).gather(2, ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    width = max(r[3] for r in rows)
    index = torch.zeros(len(rows), width, dtype=torch.long)
    mask = torch.zeros(len(rows), width)
    for b, (_, _, q, n) in enumerate(rows):
        index[b, :n] = torch.arange(q - 1, q - 1 + n)
        mask[b, :n] = 1.0
    return token_lp.gather(1, index), values[:, :-1].float().gather(1, index), mask


def train_rl(
    policy: CausalLM,
    reference: CausalLM,
    summarizer: Seq2SeqLM | None,
    summaries: Sequence[str],
    cfg: PPOConfig,
    params: SamplingParams,
    reward_fn: RewardFn | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[CausalLM, PPOTrace]:
    """Run ``cfg.steps`` PPO iterations on ``policy`` (updated in place).

    Every iteration draws ``cfg.batch_size`` summaries, samples one
    conversation each, scores them with ``reward_fn`` (default: summarize and
    ROUGE-2 against the grounding summary) and performs ``cfg.ppo_epochs``
    passes of minibatch updates of size ``cfg.forward_batch_size``.
    """
    trace = PPOTrace()
    if cfg.steps == 0:
        return policy, trace
    if not summaries:
        raise DataError("train_rl needs summaries")
    if reward_fn is None:
        if summarizer is None:
            raise DataError("train_rl needs a summarizer or a reward_fn")
        reward_fn = lambda gen, gt: compute_reward(gen, gt, summarizer).reward  # noqa: E731

    reference.freeze()
    rng = random.Random(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
    kl_ctl = (
        AdaptiveKLController(cfg.init_kl_coef, cfg.kl_target, cfg.horizon)
        if cfg.adaptive_kl
        else FixedKLController(cfg.init_kl_coef)
    )
    conv_seg = SEGMENT_IDS[CONVERSATION_SEG]
    prompt_cache: dict[str, tuple[list[int], list[int]]] = {}

    for step in range(cfg.steps):
        if len(summaries) >= cfg.batch_size:
            batch = rng.sample(list(summaries), cfg.batch_size)
        else:
            batch = rng.choices(list(summaries), k=cfg.batch_size)

        rows, scores = [], []
        for j, summary in enumerate(batch):
            rollout = generate_sl(
                policy, summary, replace(params, seed=(cfg.seed * 100_003 + step) * 1_000 + j), mode=Mode.RL_POLICY
            )
            if not rollout.token_ids:
                continue
            if summary not in prompt_cache:
                prompt_cache[summary] = policy.encode(encode_sl(summary))
            q_ids, q_segs = prompt_cache[summary]
            r_ids = rollout.token_ids
            rows.append((q_ids + r_ids, q_segs + [conv_seg] * len(r_ids), len(q_ids), len(r_ids)))
            scores.append(float(reward_fn(rollout, summary)))
        if not rows:
            trace.skipped_steps += 1
            log.warning("step %d: every rollout was empty; skipping", step)
            continue

        with torch.no_grad():
            policy.train(False)
            old_lp, old_values, mask = _response_stats(policy, rows)
            ref_lp, _, _ = _response_stats(reference, rows)
            score_t = torch.tensor(scores)
            if cfg.whiten_rewards and len(scores) > 1:
                score_t = (score_t - score_t.mean()) / (score_t.std() + 1e-8)
            kl = (old_lp - ref_lp) * mask
            rewards = -kl_ctl.value * kl
            last = mask.sum(1).long() - 1
            rewards[torch.arange(len(rows)), last] += score_t
            adv, returns = gae_advantages(rewards, old_values, cfg.gamma, cfg.lam, mask)
            adv = masked_whiten(adv, mask)

        pg_losses, vf_losses = [], []
        policy.train(True)
        for _ in range(cfg.ppo_epochs):
            order = torch.randperm(len(rows), generator=gen).tolist()
            for start in range(0, len(rows), cfg.forward_batch_size):
                idx = order[start : start + cfg.forward_batch_size]
                sub = [rows[i] for i in idx]
                new_lp, vpred, m = _response_stats(policy, sub)
                w = new_lp.size(1)
                o_lp, o_v = old_lp[idx, :w], old_values[idx, :w]
                a, ret = adv[idx, :w], returns[idx, :w]
                ratio = torch.exp(new_lp - o_lp)
                pg_loss = -masked_mean(clipped_surrogate(ratio, a, cfg.cliprange), m)
                v_clip = o_v + torch.clamp(vpred - o_v, -cfg.cliprange_value, cfg.cliprange_value)
                vf_loss = 0.5 * masked_mean(torch.maximum((vpred - ret) ** 2, (v_clip - ret) ** 2), m)
                loss = pg_loss + cfg.vf_coef * vf_loss
                optimizer.zero_grad()
                loss.backward()
                if cfg.max_grad_norm > 0:
                    torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
                optimizer.step()
                pg_losses.append(pg_loss.item())
                vf_losses.append(vf_loss.item())
        policy.train(False)

        mean_kl = float(kl.sum(1).mean())
        trace.append(
            float(sum(scores) / len(scores)),
            mean_kl,
            sum(pg_losses) / len(pg_losses),
            sum(vf_losses) / len(vf_losses),
            kl_ctl.value,
        )
        kl_ctl.update(mean_kl, cfg.batch_size)
        if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            policy.save(Path(checkpoint_dir) / f"step_{step + 1:06d}")
    return policy, trace
