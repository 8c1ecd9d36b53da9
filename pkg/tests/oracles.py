"""Deliberately naive reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math
from functools import lru_cache


def brute_ngram_overlap(cand: list[str], ref: list[str], n: int) -> tuple[int, int, int]:
    """Clipped overlap by scanning lists (no Counter), plus the n-gram totals."""
    cand_grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
    ref_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
    remaining = list(ref_grams)
    overlap = 0
    for g in cand_grams:
        if g in remaining:
            remaining.remove(g)
            overlap += 1
    return overlap, len(cand_grams), len(ref_grams)


def brute_rouge_n(cand: list[str], ref: list[str], n: int) -> float:
    overlap, nc, nr = brute_ngram_overlap(cand, ref, n)
    if nc == 0 or nr == 0 or overlap == 0:
        return 0.0
    p, r = overlap / nc, overlap / nr
    return 2 * p * r / (p + r)


def recursive_lcs(a: list[str], b: list[str]) -> int:
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def enumerate_lcs(a: list[str], b: list[str]) -> int:
    """Exhaustive: longest subsequence of ``a`` that is also a subsequence of ``b`` (short inputs only)."""

    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            if is_subseq([a[i] for i in idx], b):
                return k
    return 0


def brute_rouge_l(cand: list[str], ref: list[str]) -> float:
    if not cand or not ref:
        return 0.0
    lcs = recursive_lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def direct_gae(rewards: list[float], values: list[float], gamma: float, lam: float) -> list[float]:
    """A_t = sum_l (gamma*lam)^l * delta_{t+l}, with V after the last step = 0."""
    T = len(rewards)
    v = list(values) + [0.0]
    deltas = [rewards[t] + gamma * v[t + 1] - v[t] for t in range(T)]
    return [math.fsum((gamma * lam) ** (l - t) * deltas[l] for l in range(t, T)) for t in range(T)]


def surrogate(ratio: float, adv: float, eps: float) -> float:
    clipped = min(max(ratio, 1 - eps), 1 + eps)
    return min(ratio * adv, clipped * adv)


def naive_mean_std(xs: list[float]) -> tuple[float, float]:
    total = 0.0
    for x in xs:
        total += x
    mean = total / len(xs)
    sq = 0.0
    for x in xs:
        sq += (x - mean) ** 2
    return mean, math.sqrt(sq / len(xs))
