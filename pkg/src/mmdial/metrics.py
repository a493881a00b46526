"""Corpus-level BLEU and NIST scorers.

Both operate on token id sequences after stripping the PAD/BOS/EOS
sentinels, so generated output (which carries a terminal end token) can
be scored directly against gold responses.

BLEU follows the classic corpus definition: modified n-gram precisions
pooled over the corpus, geometric mean over orders, multiplicative
brevity penalty exp(1 - r/c) for short output, no smoothing.  A zero
precision at any order therefore zeroes the score at that order.

NIST weights each matched n-gram by its information content estimated
from the reference side of the corpus, info(w1..wn) =
log2(count(w1..wn-1) / count(w1..wn)), sums the per-order weighted
precisions over orders 1..max_n, and applies the NIST brevity penalty
exp(beta * ln(min(c/r, 1))^2) with beta set so the penalty is 0.5 at
c/r = 2/3.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence

from .data import BOS, EOS, PAD
from .errors import ContractError

_SENTINELS = frozenset((PAD, BOS, EOS))

# solves exp(beta * ln(2/3)^2) == 0.5
_NIST_BETA = math.log(0.5) / math.log(2.0 / 3.0) ** 2


def _strip(seq: Sequence[int]) -> list[int]:
    return [t for t in seq if t not in _SENTINELS]


def _ngrams(seq: list[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _checked_pairs(candidates, references) -> tuple[list[list[int]], list[list[int]]]:
    if len(candidates) == 0:
        raise ContractError("no candidates to score")
    if len(candidates) != len(references):
        raise ContractError(
            f"{len(candidates)} candidates vs {len(references)} references")
    cands = [_strip(c) for c in candidates]
    refs = [_strip(r) for r in references]
    if sum(map(len, refs)) == 0:
        raise ContractError("references contain no scorable tokens")
    return cands, refs


def bleu(candidates: Sequence[Sequence[int]],
         references: Sequence[Sequence[int]],
         max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n, one score per order, on a 0..100 scale."""
    cands, refs = _checked_pairs(candidates, references)
    c_len = sum(map(len, cands))
    r_len = sum(map(len, refs))
    if c_len == 0:
        return [0.0] * max_n

    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    for cand, ref in zip(cands, refs):
        for n in range(1, max_n + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            totals[n] += sum(cand_counts.values())
            matches[n] += sum(min(k, ref_counts[g]) for g, k in cand_counts.items())

    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    for n in range(1, max_n + 1):
        precisions = [matches[k] / totals[k] if totals[k] else 0.0
                      for k in range(1, n + 1)]
        if any(p == 0.0 for p in precisions):
            scores.append(0.0)
        else:
            mean_log = sum(math.log(p) for p in precisions) / n
            scores.append(100.0 * bp * math.exp(mean_log))
    return scores


def nist(candidates: Sequence[Sequence[int]],
         references: Sequence[Sequence[int]],
         max_n: int = 5) -> float:
    """Corpus NIST score over orders 1..max_n."""
    cands, refs = _checked_pairs(candidates, references)

    # information weights come from the pooled reference corpus
    corpus = [Counter() for _ in range(max_n + 1)]
    for ref in refs:
        for n in range(1, max_n + 1):
            corpus[n].update(_ngrams(ref, n))
    total_unigrams = sum(corpus[1].values())

    def info(gram: tuple[int, ...]) -> float:
        prefix = total_unigrams if len(gram) == 1 else corpus[len(gram) - 1][gram[:-1]]
        return math.log2(prefix / corpus[len(gram)][gram])

    weighted = [0.0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    for cand, ref in zip(cands, refs):
        for n in range(1, max_n + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            totals[n] += sum(cand_counts.values())
            weighted[n] += sum(min(k, ref_counts[g]) * info(g)
                               for g, k in cand_counts.items() if g in ref_counts)

    score = sum(weighted[n] / totals[n] for n in range(1, max_n + 1) if totals[n])
    c_len = sum(map(len, cands))
    r_len = sum(map(len, refs))
    if c_len == 0:
        return 0.0
    bp = math.exp(_NIST_BETA * math.log(min(c_len / r_len, 1.0)) ** 2)
    return score * bp
