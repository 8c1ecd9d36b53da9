"""Text-overlap metrics: ROUGE-1/2/L F1, BLEU-4 and an exact+stem METEOR.

All metrics share one tokenizer: lowercase, split on whitespace and detach
punctuation (``\\w+`` runs and single punctuation characters). Scores are in
[0, 1]; tables render them x100.

METEOR here has no synonym or paraphrase matching, so its values sit below
those of the reference toolkit.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache

from nltk.stem.porter import PorterStemmer

from .corpus import Conversation, CorpusStats, compute_stats
from .errors import DataError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
BLEU_EPSILON = 0.1
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

_stemmer = PorterStemmer()


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n_tokens(cand: Sequence[str], ref: Sequence[str], n: int) -> float:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(cand) < n or len(ref) < n:
        return 0.0
    c, r = ngrams(cand, n), ngrams(ref, n)
    overlap = sum((c & r).values())
    return _f1(overlap, sum(c.values()), sum(r.values()))


def rouge_n_f1(candidate: str, reference: str, n: int = 2) -> float:
    return rouge_n_tokens(tokenize(candidate), tokenize(reference), n)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_tokens(cand: Sequence[str], ref: Sequence[str]) -> float:
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


def rouge_l_f1(candidate: str, reference: str) -> float:
    return rouge_l_tokens(tokenize(candidate), tokenize(reference))


# --------------------------------------------------------------------------- #
# BLEU
# --------------------------------------------------------------------------- #


def _bleu_stats(cand: Sequence[str], refs: Sequence[Sequence[str]], max_n: int) -> tuple[list[int], list[int], int]:
    matches, totals = [], []
    for n in range(1, max_n + 1):
        c = ngrams(cand, n)
        best: Counter = Counter()
        for ref in refs:
            best |= ngrams(ref, n)
        matches.append(sum((c & best).values()))
        # a zero-length n-gram set still counts one slot so smoothing applies
        totals.append(max(len(cand) - n + 1, 1))
    # closest reference length, ties to the shorter one
    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    return matches, totals, ref_len


def _combine_bleu(matches: Sequence[int], totals: Sequence[int], cand_len: int, ref_len: int) -> float:
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        log_p += math.log((m if m > 0 else BLEU_EPSILON) / t)
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p / len(matches))


def bleu4(candidate: str, references: Sequence[str]) -> float:
    """Sentence BLEU-4, uniform weights, brevity penalty against the closest
    reference; zero n-gram matches are smoothed to ``BLEU_EPSILON / total``."""
    if not references:
        raise DataError("bleu4 needs at least one reference")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    matches, totals, ref_len = _bleu_stats(cand, refs, 4)
    return _combine_bleu(matches, totals, len(cand), ref_len)


def corpus_bleu4(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU-4: n-gram counts and lengths summed before combining."""
    if len(candidates) != len(references):
        raise DataError("candidates and references differ in length")
    if not candidates:
        return 0.0
    matches, totals = [0] * 4, [0] * 4
    cand_len = ref_len = 0
    for cand_text, ref_texts in zip(candidates, references):
        if not ref_texts:
            raise DataError("bleu4 needs at least one reference")
        cand = tokenize(cand_text)
        m, t, r = _bleu_stats(cand, [tokenize(x) for x in ref_texts], 4)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        cand_len += len(cand)
        ref_len += r
    return _combine_bleu(matches, totals, cand_len, ref_len)


# --------------------------------------------------------------------------- #
# METEOR
# --------------------------------------------------------------------------- #


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer.stem(word)


def _align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Greedy unigram alignment: exact matches first, then stem matches."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for key in (lambda w: w, stem):
        ref_keys = [key(w) for w in ref]
        for i, w in enumerate(cand):
            if i in used_c:
                continue
            k = key(w)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == k:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def _chunks(pairs: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_tokens(cand: Sequence[str], ref: Sequence[str]) -> float:
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (_chunks(pairs) / m) ** METEOR_BETA
    return fmean * (1 - penalty)


def meteor(candidate: str, reference: str) -> float:
    return meteor_tokens(tokenize(candidate), tokenize(reference))


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #

METEOR_NOTE = "METEOR uses exact and Porter-stem matching only (no synonym tables)"


@dataclass
class MetricReport:
    bleu4: float | None = None
    meteor: float | None = None
    rouge1_f1: float | None = None
    rouge2_f1: float | None = None
    rougeL_f1: float | None = None
    n_pairs: int = 0
    corpus_bleu4: float | None = None
    stats: CorpusStats | None = None
    notes: list[str] = field(default_factory=list)

    METRICS = ("bleu4", "meteor", "rouge1_f1", "rouge2_f1", "rougeL_f1", "corpus_bleu4")

    def to_dict(self) -> dict:
        out: dict = {k: getattr(self, k) for k in self.METRICS if getattr(self, k) is not None}
        out["n_pairs"] = self.n_pairs
        out["notes"] = list(self.notes)
        if self.stats is not None:
            out["stats"] = self.stats.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        stats = CorpusStats(**d["stats"]) if d.get("stats") else None
        return cls(
            **{k: d.get(k) for k in cls.METRICS},
            n_pairs=d.get("n_pairs", 0),
            stats=stats,
            notes=list(d.get("notes", [])),
        )

    def render(self) -> str:
        """Two-line table with scores x100, in the column order of the result tables."""
        cols = [
            ("BLEU-4", self.bleu4),
            ("METEOR", self.meteor),
            ("ROUGE_1", self.rouge1_f1),
            ("ROUGE_2", self.rouge2_f1),
            ("ROUGE_L", self.rougeL_f1),
        ]
        cols = [(name, v) for name, v in cols if v is not None]
        head = " | ".join(f"{name:>8}" for name, _ in cols)
        row = " | ".join(f"{100 * v:8.2f}" for _, v in cols)
        return f"{head}\n{row}"


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def evaluate_conversations(generated: Sequence, refs: Sequence[Conversation]) -> MetricReport:
    """Compare generated conversations with references matched by id.

    ``generated`` holds :class:`~convforge.generators.GeneratedConversation`
    objects (anything with a ``.conversation``). Both sides are linearized with
    speaker tags before scoring.
    """
    from .seqformat import linearize_conversation

    gen_ids = [g.conversation.id for g in generated]
    ref_by_id = {c.id: c for c in refs}
    missing = [i for i in gen_ids if i not in ref_by_id]
    unmatched = sorted(set(ref_by_id) - set(gen_ids))
    if missing or unmatched or len(generated) != len(refs):
        raise DataError(
            f"generated/reference ids do not match; missing in refs: {missing}, missing in generated: {unmatched}"
        )
    cands, gold = [], []
    for g in generated:
        cands.append(linearize_conversation(g.conversation))
        gold.append(linearize_conversation(ref_by_id[g.conversation.id]))
    report = MetricReport(
        bleu4=_mean([bleu4(c, [r]) for c, r in zip(cands, gold)]),
        meteor=_mean([meteor(c, r) for c, r in zip(cands, gold)]),
        rouge1_f1=_mean([rouge_n_f1(c, r, 1) for c, r in zip(cands, gold)]),
        rouge2_f1=_mean([rouge_n_f1(c, r, 2) for c, r in zip(cands, gold)]),
        rougeL_f1=_mean([rouge_l_f1(c, r) for c, r in zip(cands, gold)]),
        n_pairs=len(cands),
        corpus_bleu4=corpus_bleu4(cands, [[r] for r in gold]),
        notes=[METEOR_NOTE],
    )
    non_empty = [g.conversation for g in generated if g.conversation.turns]
    if non_empty:
        report.stats = compute_stats(non_empty)
    return report


def evaluate_summaries(generated: Sequence[str], refs: Sequence[str]) -> MetricReport:
    if len(generated) != len(refs):
        raise DataError(f"{len(generated)} generated summaries vs {len(refs)} references")
    return MetricReport(
        rouge1_f1=_mean([rouge_n_f1(g, r, 1) for g, r in zip(generated, refs)]),
        rouge2_f1=_mean([rouge_n_f1(g, r, 2) for g, r in zip(generated, refs)]),
        rougeL_f1=_mean([rouge_l_f1(g, r) for g, r in zip(generated, refs)]),
        n_pairs=len(generated),
    )
