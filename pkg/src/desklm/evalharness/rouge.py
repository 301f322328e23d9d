"""ROUGE-N and ROUGE-L over a fixed, stemming-free token stream.

Tokens: lowercase the text, delete every Unicode punctuation character,
split on whitespace.
"""

from __future__ import annotations

import unicodedata
from collections import Counter

from ..errors import ContractError


def tokenize(text: str) -> list[str]:
    kept = "".join(ch for ch in text.lower() if not unicodedata.category(ch).startswith("P"))
    return kept.split()


def ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _prf(overlap: int, cand_total: int, ref_total: int) -> dict[str, float]:
    p = overlap / cand_total if cand_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f1}


def rouge_n(candidate: str, reference: str, n: int = 1) -> dict[str, float]:
    if n < 1:
        raise ContractError("n must be at least 1")
    cand = ngrams(tokenize(candidate), n)
    ref = ngrams(tokenize(reference), n)
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: list[str], b: list[str]) -> int:
    if len(b) > len(a):
        a, b = b, a
    row = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = row[j]
            row[j] = prev + 1 if x == y else max(row[j], row[j - 1])
            prev = cur
    return row[-1]


def rouge_l(candidate: str, reference: str) -> dict[str, float]:
    cand = tokenize(candidate)
    ref = tokenize(reference)
    return _prf(lcs_length(cand, ref), len(cand), len(ref))
