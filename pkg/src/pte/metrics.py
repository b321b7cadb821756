"""Corpus BLEU, additive-smoothing n-gram LMs and Moore-Lewis scoring."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import ConfigError, UsageError

BLEU_SMOOTH_EPS = 1e-9
LM_BOS = "<s>"
LM_UNK = "<unk>"


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyps: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4):
    """Clipped matches and totals per order, plus hypothesis and reference lengths."""
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4,
         eps: float = BLEU_SMOOTH_EPS) -> float:
    """Corpus BLEU in [0, 100] with brevity penalty.

    Zero match counts get precision ``eps``. Orders with no hypothesis n-grams
    at all (every sentence shorter than n) are left out of the geometric mean.
    """
    if len(hyps) != len(refs):
        raise UsageError("hypothesis and reference counts differ")
    if not hyps:
        raise UsageError("BLEU of an empty corpus")
    matches, totals, c, r = bleu_stats(hyps, refs, max_n)
    if c == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        logs.append(math.log(m / t) if m > 0 else math.log(eps))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


# -- n-gram language model ---------------------------------------------------------

@dataclass
class NGramLM:
    order: int
    smoothing: float
    vocab: frozenset
    counts: dict[tuple, Counter] = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1      # + unk

    def _norm(self, tok: Hashable) -> Hashable:
        return tok if tok in self.vocab else LM_UNK

    def prob(self, token: Hashable, context: Sequence[Hashable]) -> float:
        """p(token | last order-1 context tokens); backs off when a context was never seen and k = 0."""
        token = self._norm(token)
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        ctx = tuple(c if c == LM_BOS else self._norm(c) for c in ctx)
        while True:
            table = self.counts.get(ctx)
            total = sum(table.values()) if table else 0
            denom = total + self.smoothing * self.vocab_size
            if denom > 0:
                return ((table[token] if table else 0) + self.smoothing) / denom
            if not ctx:
                return 1.0 / self.vocab_size
            ctx = ctx[1:]

    def distribution(self, context: Sequence[Hashable]) -> dict:
        return {t: self.prob(t, context) for t in [*sorted(self.vocab, key=repr), LM_UNK]}


def train_ngram_lm(sentences: Sequence[Sequence[Hashable]], order: int = 3, smoothing: float = 0.1) -> NGramLM:
    """Counts every order-n context and its lower orders (used for back-off)."""
    if order < 1:
        raise ConfigError("LM order must be >= 1")
    if smoothing < 0:
        raise ConfigError("smoothing must be non-negative")
    vocab = frozenset(t for s in sentences for t in s)
    lm = NGramLM(order, smoothing, vocab)
    for s in sentences:
        padded = [LM_BOS] * (order - 1) + list(s)
        for i in range(order - 1, len(padded)):
            for k in range(order):
                ctx = tuple(padded[i - k:i])
                lm.counts.setdefault(ctx, Counter())[padded[i]] += 1
    return lm


def per_word_xent(lm: NGramLM, sentence: Sequence[Hashable]) -> float:
    """Nats per word: ``-(1/|s|) sum_i log p(s_i | s_<i)``."""
    if len(sentence) == 0:
        raise UsageError("cross-entropy of an empty sentence")
    ctx = [LM_BOS] * (lm.order - 1)
    total = 0.0
    for tok in sentence:
        total -= math.log(lm.prob(tok, ctx))
        ctx = (ctx + [tok])[1:] if lm.order > 1 else ctx
    return total / len(sentence)


def moore_lewis_score(pair, g_src: NGramLM, g_tgt: NGramLM, i_src: NGramLM, i_tgt: NGramLM) -> float:
    """``(H_G(s) - H_I(s)) + (H_G(t) - H_I(t))``; larger means more in-domain-like."""
    s, t = pair
    return (per_word_xent(g_src, s) - per_word_xent(i_src, s)) + (per_word_xent(g_tgt, t) - per_word_xent(i_tgt, t))


def quartile_split(items: Sequence, scores: Sequence[float], parts: int = 4) -> list[list]:
    """Rank by descending score (ties: lower index first) and cut into ``parts`` near-equal chunks."""
    if len(items) != len(scores):
        raise UsageError("items and scores differ in length")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [[items[i] for i in chunk] for chunk in np.array_split(order, parts)]
