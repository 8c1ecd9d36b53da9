"""Linear sequence formats for the generators.

Whole-conversation (SL) sequences::

    <bos>summary <dialog><person_0> hi\\n<person_1> hello<eos>

Controlled turn-by-turn (CN) sequences::

    <bos>summary <context>context <turns_to_go>3 <speaker><person_0> <turn_length>Short <turn>utterance<eos>

The surface strings of the special tokens are part of the saved-model
contract; do not change them.
"""

from __future__ import annotations

import enum
import re
from collections.abc import Sequence
from dataclasses import dataclass

from .corpus import Conversation, SummaryRecord, Turn, is_canonical_speaker
from .errors import DataError

BOS = "<bos>"
EOS = "<eos>"
DIALOG = "<dialog>"
CONTEXT = "<context>"
TURNS_TO_GO = "<turns_to_go>"
SPEAKER = "<speaker>"
TURN_LENGTH = "<turn_length>"
TURN = "<turn>"

STRUCTURAL_TOKENS: tuple[str, ...] = (BOS, EOS, DIALOG, CONTEXT, TURNS_TO_GO, SPEAKER, TURN_LENGTH, TURN)
MAX_TURNS_TO_GO = 30

SUMMARY_SEG = "summary"
CONVERSATION_SEG = "conversation"
CONTROL_SEG = "control"
SEGMENTS = (SUMMARY_SEG, CONVERSATION_SEG, CONTROL_SEG)

_SPECIAL_SRC = r"<(?:bos|eos|dialog|context|turns_to_go|speaker|turn_length|turn|person_\d+)>"
SPECIAL_RE = re.compile(_SPECIAL_SRC)
TAG_RE = re.compile(r"<(person_\d+)>")
TOKEN_RE = re.compile(rf"{_SPECIAL_SRC}|\n|(?:(?!{_SPECIAL_SRC})\S)+")
_CN_CONTROL_RE = re.compile(
    r"<turns_to_go>(\d+) <speaker><(person_\d+)> <turn_length>(Short|Medium|Long) <turn>"
)


def speaker_token(speaker: str) -> str:
    return f"<{speaker}>"


def is_special(token: str) -> bool:
    return SPECIAL_RE.fullmatch(token) is not None


def special_tokens(n_speakers: int = 16) -> list[str]:
    """Structural tokens followed by ``<person_0> .. <person_{n-1}>``."""
    return list(STRUCTURAL_TOKENS) + [speaker_token(f"person_{k}") for k in range(n_speakers)]


class LengthBucket(str, enum.Enum):
    SHORT = "Short"
    MEDIUM = "Medium"
    LONG = "Long"


def bucket_for_count(n_tokens: int) -> LengthBucket:
    if n_tokens <= 3:
        return LengthBucket.SHORT
    if n_tokens > 10:
        return LengthBucket.LONG
    return LengthBucket.MEDIUM


def bucket_length(utterance: str) -> LengthBucket:
    return bucket_for_count(len(utterance.split()))


@dataclass(frozen=True)
class ControlState:
    turns_to_go: int
    next_speaker: str
    next_length: LengthBucket

    def __post_init__(self) -> None:
        if self.turns_to_go < 1:
            raise DataError(f"turns_to_go must be >= 1, got {self.turns_to_go}")
        if not is_canonical_speaker(self.next_speaker):
            raise DataError(f"bad speaker tag {self.next_speaker!r}")
        object.__setattr__(self, "next_length", LengthBucket(self.next_length))

    def to_dict(self) -> dict:
        return {"turns_to_go": self.turns_to_go, "speaker": self.next_speaker, "length": self.next_length.value}

    @classmethod
    def from_dict(cls, d: dict) -> ControlState:
        return cls(int(d["turns_to_go"]), d["speaker"], LengthBucket(d["length"]))


def check_countdown(controls: Sequence[ControlState]) -> None:
    n = len(controls)
    for i, c in enumerate(controls):
        if c.turns_to_go != n - i:
            raise DataError(f"control {i} has turns_to_go={c.turns_to_go}, expected {n - i}")


@dataclass(frozen=True)
class SequenceEncoding:
    """A linearized sequence plus per-token segment labels.

    ``tokens`` follow :data:`TOKEN_RE`; ``offsets`` are their character spans in
    ``text`` so backends with their own sub-word tokenizers can carry the
    segment labels over. ``boundaries`` lists ``(token_index, token)`` for
    every special token.
    """

    text: str
    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...]
    segment_labels: tuple[str, ...]
    boundaries: tuple[tuple[int, str], ...]

    def label_at(self, char_pos: int) -> str:
        for (start, end), label in zip(self.offsets, self.segment_labels):
            if start <= char_pos < end:
                return label
        # whitespace between tokens takes the label of the next token
        for (start, _), label in zip(self.offsets, self.segment_labels):
            if start > char_pos:
                return label
        return self.segment_labels[-1] if self.segment_labels else SUMMARY_SEG

    def prefix_until(self, token: str) -> str:
        """Text up to and including the first occurrence of ``token``."""
        idx = self.text.index(token)
        return self.text[: idx + len(token)]


class _Builder:
    def __init__(self) -> None:
        self.parts: list[tuple[str, str]] = []

    def add(self, text: str, label: str) -> None:
        if text:
            self.parts.append((text, label))

    def build(self) -> SequenceEncoding:
        text = "".join(p for p, _ in self.parts)
        tokens, offsets, labels, bounds = [], [], [], []
        pos = 0
        for part, label in self.parts:
            for m in TOKEN_RE.finditer(part):
                if is_special(m.group(0)):
                    bounds.append((len(tokens), m.group(0)))
                tokens.append(m.group(0))
                offsets.append((pos + m.start(), pos + m.end()))
                labels.append(label)
            pos += len(part)
        return SequenceEncoding(text, tuple(tokens), tuple(offsets), tuple(labels), tuple(bounds))


def _check_turns(turns: Sequence[Turn]) -> None:
    for i, t in enumerate(turns):
        if not is_canonical_speaker(t.speaker):
            raise DataError(f"turn {i}: speaker {t.speaker!r} is not a person_<k> tag; anonymize first")
        if SPECIAL_RE.search(t.text):
            raise DataError(f"turn {i}: utterance contains a reserved token")


def linearize_turns(turns: Sequence[Turn]) -> str:
    _check_turns(turns)
    return "\n".join(f"{speaker_token(t.speaker)} {t.text}" for t in turns)


def linearize_conversation(conv: Conversation) -> str:
    return linearize_turns(conv.turns)


def _check_summary(summary: str) -> str:
    summary = summary.strip()
    if not summary:
        raise DataError("summary is empty")
    if SPECIAL_RE.search(summary):
        raise DataError("summary contains a reserved token")
    return summary


def encode_sl(summary: str, conversation: Conversation | None = None) -> SequenceEncoding:
    """Whole-conversation format; without a conversation this is the generation prompt."""
    summary = _check_summary(summary)
    b = _Builder()
    b.add(BOS, SUMMARY_SEG)
    b.add(summary + " ", SUMMARY_SEG)
    b.add(DIALOG, CONVERSATION_SEG)
    if conversation is not None:
        b.add(linearize_conversation(conversation), CONVERSATION_SEG)
        b.add(EOS, CONVERSATION_SEG)
    return b.build()


def encode_cn(
    summary: str,
    context: Sequence[Turn],
    control: ControlState,
    utterance: str | None = None,
) -> SequenceEncoding:
    """Controlled per-turn format; without an utterance this is the prompt ending at ``<turn>``."""
    summary = _check_summary(summary)
    b = _Builder()
    b.add(BOS, SUMMARY_SEG)
    b.add(summary + " ", SUMMARY_SEG)
    b.add(CONTEXT, CONVERSATION_SEG)
    b.add(linearize_turns(context), CONVERSATION_SEG)
    b.add(" ", CONVERSATION_SEG)
    b.add(f"{TURNS_TO_GO}{min(control.turns_to_go, MAX_TURNS_TO_GO)} ", CONTROL_SEG)
    b.add(f"{SPEAKER}{speaker_token(control.next_speaker)} ", CONTROL_SEG)
    b.add(f"{TURN_LENGTH}{control.next_length.value} ", CONTROL_SEG)
    b.add(TURN, CONTROL_SEG)
    if utterance is not None:
        utterance = utterance.strip()
        if SPECIAL_RE.search(utterance):
            raise DataError("utterance contains a reserved token")
        b.add(utterance, CONVERSATION_SEG)
        b.add(EOS, CONVERSATION_SEG)
    return b.build()


def parse_cn_controls(text: str) -> ControlState:
    """Recover the control fields from an encoded CN sequence."""
    m = _CN_CONTROL_RE.search(text)
    if m is None:
        raise DataError("no control block found")
    return ControlState(int(m.group(1)), m.group(2), LengthBucket(m.group(3)))


def training_sequences_cn(record: SummaryRecord) -> list[SequenceEncoding]:
    conv = record.conversation
    if conv is None or not conv.turns:
        raise DataError(f"record {record.id!r} has no conversation")
    turns = conv.turns
    n = len(turns)
    out = []
    for i, turn in enumerate(turns):
        control = ControlState(n - i, turn.speaker, bucket_length(turn.text))
        out.append(encode_cn(record.summary, turns[:i], control, turn.text))
    return out


def decode_conversation(text: str, conv_id: str = "") -> tuple[Conversation, bool]:
    """Parse flat generated text back into turns.

    Never raises. Text after the first ``<eos>`` and before the first speaker
    tag is ignored, other reserved tokens are stripped from utterances, and
    empty utterances are dropped. The flag is True when at least one turn
    survived.
    """
    eos = text.find(EOS)
    if eos >= 0:
        text = text[:eos]
    pieces = TAG_RE.split(text)
    turns = []
    # pieces = [lead, spk0, utt0, spk1, utt1, ...]
    for speaker, chunk in zip(pieces[1::2], pieces[2::2]):
        utterance = SPECIAL_RE.sub(" ", chunk).strip()
        if utterance:
            turns.append(Turn(speaker, utterance))
    return Conversation(conv_id, tuple(turns)), bool(turns)
