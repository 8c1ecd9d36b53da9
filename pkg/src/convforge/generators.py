"""Summary-grounded conversation generation.

``generate_sl`` decodes a whole conversation in one pass (also used for the
PPO-trained policy). ``generate_cn`` builds the conversation one turn at a
time, each turn conditioned on a control block (turns to go, speaker, length
bucket).
"""

from __future__ import annotations

import enum
import random
import re
from collections.abc import Sequence
from dataclasses import dataclass, replace

from .corpus import Conversation, Turn
from .errors import DataError
from .lmbridge import CausalLM, SamplingParams, sample_causal
from .seqformat import (
    EOS,
    ControlState,
    SPECIAL_RE,
    LengthBucket,
    check_countdown,
    decode_conversation,
    encode_cn,
    encode_sl,
    linearize_conversation,
)

CN_MAX_TURN_TOKENS = 64
FALLBACK_UTTERANCE = "..."
DEFAULT_TURN_RANGE = (4, 15)
_SUMMARY_SPEAKER_RE = re.compile(r"\bperson_(\d+)\b")


class Mode(str, enum.Enum):
    SL = "SL"
    RL_POLICY = "RL_policy"
    CN = "CN"


@dataclass(frozen=True)
class GenerationRequest:
    summary: str
    mode: Mode
    params: SamplingParams
    cn_controls: tuple[ControlState, ...] | None = None

    def __post_init__(self) -> None:
        if (self.cn_controls is not None) != (self.mode == Mode.CN):
            raise DataError("cn_controls must be given exactly when mode is CN")


@dataclass
class GeneratedConversation:
    conversation: Conversation
    well_formed: bool
    raw_text: str
    mode: Mode
    summary: str = ""
    controls_used: list[ControlState] | None = None
    n_fallbacks: int = 0
    # set by the SL path, consumed by PPO
    token_ids: list[int] | None = None
    logprobs: list[float] | None = None

    @property
    def id(self) -> str:
        return self.conversation.id

    def text(self) -> str:
        return linearize_conversation(self.conversation)

    def to_dict(self) -> dict:
        return {
            "id": self.conversation.id,
            "mode": self.mode.value,
            "summary": self.summary,
            "turns": self.conversation.to_dict(),
            "well_formed": self.well_formed,
            "controls": [c.to_dict() for c in self.controls_used] if self.controls_used is not None else None,
            "n_fallbacks": self.n_fallbacks,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GeneratedConversation:
        turns = tuple(Turn(t["speaker"], t["text"]) for t in d.get("turns", []))
        controls = d.get("controls")
        return cls(
            conversation=Conversation(str(d["id"]), turns),
            well_formed=bool(d.get("well_formed", bool(turns))),
            raw_text=d.get("raw_text", ""),
            mode=Mode(d.get("mode", "SL")),
            summary=d.get("summary", ""),
            controls_used=[ControlState.from_dict(c) for c in controls] if controls is not None else None,
            n_fallbacks=int(d.get("n_fallbacks", 0)),
        )


def generate_sl(
    model: CausalLM,
    summary: str,
    params: SamplingParams,
    conv_id: str = "",
    mode: Mode = Mode.SL,
) -> GeneratedConversation:
    if not summary.strip():
        raise DataError("summary is empty")
    out = sample_causal(model, encode_sl(summary), params, stop_tokens=(EOS,))
    conv, ok = decode_conversation(out.text, conv_id)
    return GeneratedConversation(
        conv, ok, out.text, mode, summary=summary, token_ids=out.token_ids, logprobs=out.logprobs
    )


def summary_speakers(summary: str, minimum: int = 2) -> list[str]:
    """Speaker tags mentioned in an anonymized summary, padded up to ``minimum``."""
    found = sorted({int(k) for k in _SUMMARY_SPEAKER_RE.findall(summary)})
    k = 0
    while len(found) < minimum:
        if k not in found:
            found.append(k)
        k += 1
    return [f"person_{k}" for k in sorted(found)]


def sample_inference_controls(
    n_range: tuple[int, int] = DEFAULT_TURN_RANGE,
    speakers: Sequence[str] = ("person_0", "person_1"),
    seed: int = 0,
) -> list[ControlState]:
    """Random controls: n uniform over ``n_range`` (inclusive), then per turn a
    uniform speaker and a uniform length bucket."""
    if not speakers:
        raise DataError("speaker list is empty")
    lo, hi = n_range
    if not 1 <= lo <= hi:
        raise DataError(f"bad turn range {n_range}")
    rng = random.Random(seed)
    n = rng.randint(lo, hi)
    buckets = list(LengthBucket)
    return [ControlState(n - i, rng.choice(list(speakers)), rng.choice(buckets)) for i in range(n)]


def generate_cn(
    model: CausalLM,
    summary: str,
    controls: Sequence[ControlState],
    params: SamplingParams,
    conv_id: str = "",
) -> GeneratedConversation:
    """Generate exactly ``len(controls)`` turns, one sampling call per turn.

    Each turn stops at ``<eos>``, at any other reserved token, or after
    ``CN_MAX_TURN_TOKENS`` tokens. Empty turns are replaced by
    ``FALLBACK_UTTERANCE`` and counted in ``n_fallbacks``.
    """
    if not controls:
        raise DataError("controls are empty")
    check_countdown(controls)
    stops = tuple(model.special_tokens)
    turns: list[Turn] = []
    raw: list[str] = []
    fallbacks = 0
    limit = min(params.max_length, model.max_length)
    for i, control in enumerate(controls):
        # drop the oldest context turns if the prompt no longer fits
        start = 0
        while True:
            prompt = encode_cn(summary, turns[start:], control)
            n_prompt = len(model.encode(prompt)[0])
            if n_prompt < limit or start >= len(turns):
                break
            start += 1
        turn_params = replace(
            params,
            seed=params.seed * 1000 + i,
            min_length=0,
            max_length=min(limit, n_prompt + CN_MAX_TURN_TOKENS),
        )
        out = sample_causal(model, prompt, turn_params, stop_tokens=stops)
        utterance = " ".join(SPECIAL_RE.sub(" ", out.text).split())
        raw.append(out.text)
        if not utterance:
            utterance = FALLBACK_UTTERANCE
            fallbacks += 1
        turns.append(Turn(control.next_speaker, utterance))
    conv = Conversation(conv_id, tuple(turns))
    return GeneratedConversation(
        conv,
        True,
        "\n".join(raw),
        Mode.CN,
        summary=summary,
        controls_used=list(controls),
        n_fallbacks=fallbacks,
    )
