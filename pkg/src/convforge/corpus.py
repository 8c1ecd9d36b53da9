"""Data model and dataset handling for (summary, conversation) corpora.

Records are stored as JSONL, one object per line::

    {"id": "13818513", "summary": "...", "turns": [{"speaker": "Amanda", "text": "..."}]}

Raw Samsum lines carrying a ``dialogue`` string (``Name: utterance`` per line)
are accepted on ingestion as well.
"""

from __future__ import annotations

import json
import math
import random
import re
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError

SPLITS = ("train", "validation", "test")
SPEAKER_RE = re.compile(r"person_\d+")

# Ordered name -> canonical tag mapping (dicts keep insertion order).
NameMap = dict


def is_canonical_speaker(speaker: str) -> bool:
    return SPEAKER_RE.fullmatch(speaker) is not None


def speaker_tag(k: int) -> str:
    if k < 0:
        raise ValueError(f"speaker index must be non-negative, got {k}")
    return f"person_{k}"


@dataclass(frozen=True)
class Turn:
    """One utterance. ``text`` is stripped on construction and must not be empty.

    ``speaker`` is only required to be canonical (``person_<k>``) once a record
    has been anonymized; raw corpora carry personal names here.
    """

    speaker: str
    text: str

    def __post_init__(self) -> None:
        text = self.text.strip()
        if not text:
            raise DataError("turn text is empty")
        if not self.speaker.strip():
            raise DataError("turn speaker is empty")
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "speaker", self.speaker.strip())


@dataclass(frozen=True)
class Conversation:
    id: str
    turns: tuple[Turn, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))

    @property
    def speakers(self) -> frozenset[str]:
        return frozenset(t.speaker for t in self.turns)

    def speaker_order(self) -> list[str]:
        """Speakers in order of first appearance."""
        return list(dict.fromkeys(t.speaker for t in self.turns))

    def is_canonical(self) -> bool:
        return all(is_canonical_speaker(t.speaker) for t in self.turns)

    def to_dict(self) -> list[dict]:
        return [{"speaker": t.speaker, "text": t.text} for t in self.turns]


@dataclass(frozen=True)
class SummaryRecord:
    id: str
    summary: str
    conversation: Conversation | None = None
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.summary.strip():
            raise DataError(f"record {self.id!r}: summary is empty")
        if self.split not in SPLITS:
            raise DataError(f"record {self.id!r}: unknown split {self.split!r}")

    def to_dict(self) -> dict:
        out = {"id": self.id, "summary": self.summary}
        if self.conversation is not None:
            out["turns"] = self.conversation.to_dict()
        return out


@dataclass(frozen=True)
class CorpusStats:
    avg_turns: float
    std_turns: float
    avg_tokens_per_turn: float
    std_tokens_per_turn: float
    n_conversations: int

    def to_dict(self) -> dict:
        return {
            "avg_turns": self.avg_turns,
            "std_turns": self.std_turns,
            "avg_tokens_per_turn": self.avg_tokens_per_turn,
            "std_tokens_per_turn": self.std_tokens_per_turn,
            "n_conversations": self.n_conversations,
        }


# --------------------------------------------------------------------------- #
# Ingestion
# --------------------------------------------------------------------------- #


def parse_dialogue(dialogue: str) -> list[Turn]:
    """Split a raw ``Name: utterance`` dialogue string into turns.

    Lines without a colon continue the previous turn; leading orphan lines
    and empty utterances are dropped.
    """
    turns: list[Turn] = []
    for line in dialogue.splitlines():
        line = line.strip()
        if not line:
            continue
        if ":" in line:
            name, utterance = line.split(":", 1)
            if name.strip() and utterance.strip():
                turns.append(Turn(name, utterance))
                continue
            if name.strip():
                continue
        if turns:
            prev = turns[-1]
            turns[-1] = Turn(prev.speaker, f"{prev.text} {line}")
    return turns


def _parse_turns(raw: object, lineno: int) -> list[Turn]:
    if not isinstance(raw, list):
        raise DataError(f"field turns must be a list at line {lineno}")
    turns = []
    for j, item in enumerate(raw):
        if not isinstance(item, dict) or "speaker" not in item or "text" not in item:
            raise DataError(f"turn {j} needs speaker and text at line {lineno}")
        if str(item["text"]).strip():
            turns.append(Turn(str(item["speaker"]), str(item["text"])))
    return turns


def record_from_dict(obj: dict, split: str, lineno: int = 0, require_conversation: bool = True) -> SummaryRecord:
    for name in ("id", "summary"):
        if name not in obj:
            raise DataError(f"missing field: {name} at line {lineno}")
    if "turns" in obj:
        turns = _parse_turns(obj["turns"], lineno)
    elif "dialogue" in obj:
        turns = parse_dialogue(str(obj["dialogue"]))
    elif require_conversation:
        raise DataError(f"missing field: turns at line {lineno}")
    else:
        turns = []
    rid = str(obj["id"])
    conv = Conversation(rid, tuple(turns)) if turns else None
    try:
        return SummaryRecord(rid, str(obj["summary"]), conv, split)
    except DataError as exc:
        raise DataError(f"{exc} at line {lineno}") from None


def load_dataset(path: str | Path, split: str = "train", require_conversation: bool = True) -> list[SummaryRecord]:
    """Read a JSONL corpus, preserving file order."""
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    records: list[SummaryRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed JSON at line {lineno}: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise DataError(f"expected a JSON object at line {lineno}")
            rec = record_from_dict(obj, split, lineno, require_conversation)
            if rec.id in seen:
                raise DataError(f"duplicate id {rec.id!r} at line {lineno}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def save_dataset(records: Iterable[SummaryRecord], path: str | Path) -> None:
    write_jsonl((r.to_dict() for r in records), path)


# --------------------------------------------------------------------------- #
# Anonymization
# --------------------------------------------------------------------------- #


def _name_pattern(names: Sequence[str]) -> re.Pattern:
    # Longest first so "Mary Ann" wins over "Mary".
    alternation = "|".join(re.escape(n) for n in sorted(names, key=len, reverse=True))
    return re.compile(rf"(?<!\w)(?:{alternation})(?!\w)")


def anonymize(record: SummaryRecord) -> tuple[SummaryRecord, NameMap]:
    """Replace speaker names with ``person_<k>`` tags everywhere in the record.

    The name inventory is the conversation's speaker labels. Tags are assigned
    in order of first appearance among the speakers, skipping indices that are
    already taken by canonical tags. Returns the rewritten record and the
    mapping that was applied (empty when there was nothing to rewrite).
    """
    conv = record.conversation
    if conv is None:
        return record, {}
    names = [s for s in conv.speaker_order() if not is_canonical_speaker(s)]
    if not names:
        return record, {}

    texts = [record.summary] + [t.text for t in conv.turns]
    taken = {t.speaker for t in conv.turns if is_canonical_speaker(t.speaker)}
    for text in texts:
        taken.update(SPEAKER_RE.findall(text))

    mapping: NameMap = {}
    k = 0
    for name in names:
        while speaker_tag(k) in taken:
            k += 1
        mapping[name] = speaker_tag(k)
        taken.add(mapping[name])

    pattern = _name_pattern(names)

    def sub(text: str) -> str:
        return pattern.sub(lambda m: mapping[m.group(0)], text)

    turns = tuple(Turn(mapping.get(t.speaker, t.speaker), sub(t.text)) for t in conv.turns)
    new = SummaryRecord(record.id, sub(record.summary), Conversation(conv.id, turns), record.split)
    return new, mapping


# --------------------------------------------------------------------------- #
# Splits and statistics
# --------------------------------------------------------------------------- #


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_for_augmentation(
    records: Sequence[SummaryRecord], x_percent: float, seed: int
) -> tuple[list[SummaryRecord], list[SummaryRecord]]:
    """Randomly pick ``x_percent`` of the records for generator training.

    Both returned lists keep the input order. The rest is the holdout on which
    conversations get generated.
    """
    if not records:
        raise DataError("cannot split an empty record list")
    if not 0 < x_percent < 100:
        raise DataError(f"x_percent must lie in (0, 100), got {x_percent}")
    n = len(records)
    k = round_half_up(x_percent * n / 100)
    if k < 1 or k > n - 1:
        raise DataError(f"x_percent={x_percent} on {n} records leaves one side empty")
    chosen = set(random.Random(seed).sample(range(n), k))
    gen_train = [r for i, r in enumerate(records) if i in chosen]
    holdout = [r for i, r in enumerate(records) if i not in chosen]
    return gen_train, holdout


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def compute_stats(
    conversations: Sequence[Conversation], tokenizer: Callable[[str], list[str]] = str.split
) -> CorpusStats:
    """Turn-count and tokens-per-turn mean/std (population std)."""
    if not conversations:
        raise DataError("compute_stats needs at least one conversation")
    turn_counts = [len(c.turns) for c in conversations]
    token_counts = [len(tokenizer(t.text)) for c in conversations for t in c.turns]
    avg_t, std_t = _mean_std(turn_counts)
    avg_k, std_k = _mean_std(token_counts) if token_counts else (0.0, 0.0)
    return CorpusStats(avg_t, std_t, avg_k, std_k, len(conversations))
