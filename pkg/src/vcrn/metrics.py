"""Corpus BLEU-4 and CIDEr over tokenized captions.

Inputs are parallel lists: ``hypotheses[i]`` is a token list and
``references[i]`` a list of token lists for the same video.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from collections.abc import Sequence

from .errors import ContractError

BLEU_EPSILON = 1e-9

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check(hypotheses, references) -> None:
    if not hypotheses:
        raise ContractError("need at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if not refs:
            raise ContractError(f"hypothesis {i} has no references")


def bleu4(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> float:
    """Corpus BLEU with clipped counts, closest-reference brevity penalty and
    zero precisions replaced by 1e-9."""
    _check(hypotheses, references)
    matched = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(hyp, n)
            ceiling: Counter = Counter()
            for r in refs:
                ceiling |= ngrams(r, n)
            matched[n - 1] += sum(min(c, ceiling[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for m, t in zip(matched, totals):
        p = m / t if m > 0 else BLEU_EPSILON
        log_precision += math.log(p) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_precision)


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict[tuple, float]:
    total = sum(counts.values())
    if total == 0:
        return {}
    # unseen n-grams get document frequency 1
    return {g: (c / total) * (log_n - math.log(max(df[g], 1))) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider_scores(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4,
                 scale: float = 10.0) -> list[float]:
    """Per-video CIDEr: mean over n of the mean TF-IDF cosine against each
    reference, times ``scale``.  Document frequencies come from the
    reference sets (one document per video)."""
    _check(hypotheses, references)
    num_docs = len(references)
    if num_docs == 1:
        warnings.warn("CIDEr over a single video: every IDF weight is zero", RuntimeWarning, stacklevel=2)
    log_n = math.log(num_docs)
    scores = [0.0] * len(hypotheses)
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in references:
            df.update(set().union(*(ngrams(r, n).keys() for r in refs)))
        for i, (hyp, refs) in enumerate(zip(hypotheses, references)):
            vh = _tfidf(ngrams(hyp, n), df, log_n)
            sims = [_cosine(vh, _tfidf(ngrams(r, n), df, log_n)) for r in refs]
            scores[i] += scale * (sum(sims) / len(sims)) / max_n
    return scores


def cider(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4,
          scale: float = 10.0) -> float:
    scores = cider_scores(hypotheses, references, max_n, scale)
    return sum(scores) / len(scores)


def evaluate(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> dict:
    return {
        "bleu4": bleu4(hypotheses, references),
        "cider": cider(hypotheses, references),
        "num_videos": len(hypotheses),
        "num_refs_total": sum(len(r) for r in references),
    }
