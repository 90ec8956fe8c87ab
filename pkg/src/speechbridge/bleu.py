"""Corpus BLEU with a fixed tokenizer.

Word mode splits on whitespace and separates punctuation into its own
tokens; matching is case-sensitive. Character mode deletes all whitespace
and scores individual characters. No smoothing: any zero n-gram precision
gives a score of 0.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

MAX_ORDER = 4
CHAR_LEVEL_LANGUAGES = frozenset({"ja", "zh"})

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str, char_level: bool = False) -> list[str]:
    if char_level:
        return [ch for ch in text if not ch.isspace()]
    return _WORD_RE.findall(text)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def __iadd__(self, other: "BleuStats") -> "BleuStats":
        for i in range(MAX_ORDER):
            self.matches[i] += other.matches[i]
            self.totals[i] += other.totals[i]
        self.hyp_len += other.hyp_len
        self.ref_len += other.ref_len
        return self

    def precisions(self) -> list[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    def brevity_penalty(self) -> float:
        if self.hyp_len == 0:
            return 0.0
        return math.exp(min(0.0, 1.0 - self.ref_len / self.hyp_len))

    def score(self) -> float:
        if min(self.matches) == 0:
            return 0.0
        log_p = sum(math.log(m / t) for m, t in zip(self.matches, self.totals)) / MAX_ORDER
        return 100.0 * self.brevity_penalty() * math.exp(log_p)


def sentence_stats(hypothesis: str, reference: str, char_level: bool = False) -> BleuStats:
    hyp = tokenize(hypothesis, char_level)
    ref = tokenize(reference, char_level)
    st = BleuStats(hyp_len=len(hyp), ref_len=len(ref))
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        st.matches[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        st.totals[n - 1] = max(0, len(hyp) - n + 1)
    return st


def corpus_stats(hypotheses: Sequence[str], references: Sequence[str], char_level: bool = False) -> BleuStats:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    total = BleuStats()
    for h, r in zip(hypotheses, references):
        total += sentence_stats(h, r, char_level)
    return total


def bleu(hypotheses: Sequence[str], references: Sequence[str], char_level: bool = False) -> float:
    """Corpus BLEU in [0, 100] from pooled n-gram statistics."""
    return corpus_stats(hypotheses, references, char_level).score()
