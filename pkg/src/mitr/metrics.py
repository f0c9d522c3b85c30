"""Self-contained caption metrics: BLEU-n, ROUGE-L, and CIDEr.

All functions take pre-tokenized captions (lists of lowercase tokens; see
data.tokenize). BLEU uses no smoothing: a zero clipped precision at any
order makes the sentence score 0, which corpus-level aggregation mitigates.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict

ROUGE_BETA = 1.2
CIDER_MAX_N = 4


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(references, c: int) -> int:
    # ties broken toward the shorter reference
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def _brevity_penalty(c: int, r: int) -> float:
    if c > r:
        return 1.0
    return math.exp(1.0 - r / c)


def _clipped_counts(candidate, references, n: int) -> tuple[int, int]:
    cand = _ngrams(candidate, n)
    total = sum(cand.values())
    if total == 0:
        return 0, 0
    max_ref: Counter = Counter()
    for ref in references:
        for gram, count in _ngrams(ref, n).items():
            max_ref[gram] = max(max_ref[gram], count)
    clipped = sum(min(count, max_ref[gram]) for gram, count in cand.items())
    return clipped, total


def bleu_n(candidate, references, n: int) -> float:
    """Sentence BLEU: geometric mean of clipped 1..n-gram precisions times
    the brevity penalty. Empty candidate scores 0."""
    if n not in (1, 2, 3, 4):
        raise ValueError(f"bleu_n: order must be in 1..4, got {n}")
    if not references:
        raise ValueError("bleu_n: at least one reference required")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        clipped, total = _clipped_counts(candidate, references, k)
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    bp = _brevity_penalty(len(candidate), _closest_ref_length(references, len(candidate)))
    return bp * math.exp(log_sum / n)


def corpus_bleu_n(candidates, references_list, n: int) -> float:
    """Corpus BLEU: precisions pooled over all sentences before the
    geometric mean; lengths pooled for the brevity penalty."""
    if len(candidates) != len(references_list):
        raise ValueError("corpus_bleu_n: candidate/reference count mismatch")
    clipped = [0] * n
    totals = [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references_list):
        if not refs:
            raise ValueError("corpus_bleu_n: candidate without references")
        if not cand:
            continue
        c_len += len(cand)
        r_len += _closest_ref_length(refs, len(cand))
        for k in range(1, n + 1):
            c, t = _clipped_counts(cand, refs, k)
            clipped[k - 1] += c
            totals[k - 1] += t
    if c_len == 0 or any(c == 0 for c in clipped):
        return 0.0
    log_sum = sum(math.log(c / t) for c, t in zip(clipped, totals))
    return _brevity_penalty(c_len, r_len) * math.exp(log_sum / n)


def _lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        row = [0]
        for j, y in enumerate(b, start=1):
            row.append(prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1]))
        prev = row
    return prev[-1]


def rouge_l(candidate, references) -> float:
    """LCS-based F-measure (beta = 1.2), maximized over references."""
    if not references:
        raise ValueError("rouge_l: at least one reference required")
    if not candidate:
        return 0.0
    beta_sq = ROUGE_BETA ** 2
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = _lcs_length(candidate, ref)
        if lcs == 0:
            continue
        prec = lcs / len(candidate)
        rec = lcs / len(ref)
        best = max(best, (1 + beta_sq) * prec * rec / (rec + beta_sq * prec))
    return best


def cider(candidates, references_list) -> list[float]:
    """Per-candidate CIDEr: mean over n = 1..4 of the cosine similarity of
    TF-IDF n-gram vectors against each reference, averaged over references
    and scaled by 10. IDF comes from the reference corpus, so this is a
    corpus-level call."""
    if len(candidates) != len(references_list):
        raise ValueError("cider: candidate/reference count mismatch")
    n_docs = len(references_list)
    if n_docs == 0:
        return []
    if n_docs == 1:
        warnings.warn("cider: single-document corpus, IDF is degenerate", stacklevel=2)

    doc_freq = [defaultdict(int) for _ in range(CIDER_MAX_N)]
    for refs in references_list:
        for n in range(1, CIDER_MAX_N + 1):
            seen = set()
            for ref in refs:
                seen.update(_ngrams(ref, n))
            for gram in seen:
                doc_freq[n - 1][gram] += 1

    def tfidf(tokens, n):
        vec = {gram: count * math.log(n_docs / max(1, doc_freq[n - 1][gram]))
               for gram, count in _ngrams(tokens, n).items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        return vec, norm

    def cosine(u, nu, v, nv):
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return sum(w * v.get(g, 0.0) for g, w in u.items()) / (nu * nv)

    scores = []
    for cand, refs in zip(candidates, references_list):
        if not refs:
            raise ValueError("cider: candidate without references")
        cand_vecs = [tfidf(cand, n) for n in range(1, CIDER_MAX_N + 1)]
        total = 0.0
        for ref in refs:
            for n in range(1, CIDER_MAX_N + 1):
                u, nu = cand_vecs[n - 1]
                v, nv = tfidf(ref, n)
                total += cosine(u, nu, v, nv) / CIDER_MAX_N
        scores.append(10.0 * total / len(refs))
    return scores
