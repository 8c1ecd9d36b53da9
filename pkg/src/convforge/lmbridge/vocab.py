from __future__ import annotations

import json
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from pathlib import Path

from ..seqformat import _SPECIAL_SRC, LengthBucket, MAX_TURNS_TO_GO, SequenceEncoding, is_special, special_tokens

PAD = "<pad>"
UNK = "<unk>"
NEWLINE = "\n"
WORD_RE = re.compile(rf"{_SPECIAL_SRC}|\n|\w+|[^\w\s]")


def word_tokenize(text: str) -> list[str]:
    """Specials stay atomic, words and punctuation are split apart."""
    return WORD_RE.findall(text)


class WordVocab:
    """Word-level vocabulary for the tiny backend.

    Reserved entries come first, in a fixed order: pad, unk, the structural
    and speaker tokens, newline, the turns-to-go numerals and the length
    bucket names.
    """

    def __init__(self, tokens: Sequence[str], n_speakers: int) -> None:
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.n_speakers = n_speakers
        self.special = special_tokens(n_speakers)

    @classmethod
    def reserved(cls, n_speakers: int) -> list[str]:
        numerals = [str(i) for i in range(1, MAX_TURNS_TO_GO + 1)]
        buckets = [b.value for b in LengthBucket]
        return [PAD, UNK, *special_tokens(n_speakers), NEWLINE, *numerals, *buckets]

    @classmethod
    def build(cls, texts: Iterable[str], n_speakers: int = 16, min_freq: int = 1) -> WordVocab:
        counts = Counter(t for text in texts for t in word_tokenize(text))
        reserved = cls.reserved(n_speakers)
        taken = set(reserved)
        words = sorted((w for w, c in counts.items() if c >= min_freq and w not in taken and not is_special(w)),
                       key=lambda w: (-counts[w], w))
        return cls(reserved + words, n_speakers)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def encode_text(self, text: str) -> list[int]:
        return [self.id(t) for t in word_tokenize(text)]

    def encode(self, enc: SequenceEncoding, segment_ids: dict[str, int]) -> tuple[list[int], list[int]]:
        ids, segs = [], []
        for token, label in zip(enc.tokens, enc.segment_labels):
            for piece in word_tokenize(token):
                ids.append(self.id(piece))
                segs.append(segment_ids[label])
        return ids, segs

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        prev = None
        for i in ids:
            tok = self.itos[i]
            if tok == PAD:
                continue
            if tok != NEWLINE and prev is not None and prev != NEWLINE:
                out.append(" ")
            out.append(tok)
            prev = tok
        return "".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"n_speakers": self.n_speakers, "tokens": self.itos}, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> WordVocab:
        data = json.loads(Path(path).read_text())
        return cls(data["tokens"], data["n_speakers"])
