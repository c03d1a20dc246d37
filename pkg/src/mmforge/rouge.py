"""ROUGE-L (longest common subsequence) precision/recall/F-measure.

Character tokenization is the default because the target language does not
use spaces between words; whitespace mode exists for space-delimited text.
The LCS dynamic program is vectorized one row at a time with numpy so long
inputs stay fast; inputs beyond 10,000 tokens are rejected to bound memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_TOKENS = 10_000


@dataclass(frozen=True)
class RougeResult:
    precision: float
    recall: float
    f: float


def tokenize(text: str, mode: str = "character") -> list[str]:
    """Split text into tokens: per code point (whitespace dropped) or on runs of whitespace."""
    if mode == "character":
        return [ch for ch in text if not ch.isspace()]
    if mode == "whitespace":
        return text.split()
    raise ValueError(f"unknown tokenization mode {mode!r}")


def lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    vocab: dict[str, int] = {}
    xs = np.array([vocab.setdefault(t, len(vocab)) for t in a], dtype=np.int32)
    ys = np.array([vocab.setdefault(t, len(vocab)) for t in b], dtype=np.int32)
    prev = np.zeros(len(ys) + 1, dtype=np.int32)
    cur = np.zeros(len(ys) + 1, dtype=np.int32)
    for x in xs:
        # dp[j] = max(dp_prev[j], dp[j-1], dp_prev[j-1] + 1 if match)
        np.maximum(prev[1:], np.where(ys == x, prev[:-1] + 1, 0), out=cur[1:])
        cur[0] = 0
        np.maximum.accumulate(cur, out=cur)
        prev, cur = cur, prev
    return int(prev[-1])


def rouge_l(candidate: str, reference: str, mode: str = "character", beta: float = 1.0) -> RougeResult:
    """Score a candidate against a non-empty reference.

    P = LCS/|candidate|, R = LCS/|reference|,
    F = (1 + beta^2) P R / (R + beta^2 P), 0 when P + R is 0.
    """
    cand = tokenize(candidate, mode)
    ref = tokenize(reference, mode)
    if not ref:
        raise ValueError("reference is empty after tokenization")
    if len(cand) > MAX_TOKENS or len(ref) > MAX_TOKENS:
        raise ValueError(f"inputs longer than {MAX_TOKENS} tokens are not supported")
    if not cand:
        return RougeResult(precision=0.0, recall=0.0, f=0.0)
    lcs = lcs_length(cand, ref)
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    if precision + recall == 0:
        return RougeResult(precision=0.0, recall=0.0, f=0.0)
    b2 = beta * beta
    f = (1 + b2) * precision * recall / (recall + b2 * precision)
    return RougeResult(precision=precision, recall=recall, f=f)
