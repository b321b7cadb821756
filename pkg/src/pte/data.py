"""Corpora, vocabularies and the synthetic domain generators.

A synthetic domain draws source sentences from a skewed distribution over
its own slice of the token-id space and maps them to targets with a fixed
rule. Domains on disjoint slices play the role of divergent domains; the
general domain never emits the in-domain ids, so those rows stay rare
tokens for the general model, much like unseen subwords.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .transformer import BOS, EOS, PAD, UNK, Batch, make_batch

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
MAX_SENTENCE_LEN = 128

Pair = tuple[tuple[int, ...], tuple[int, ...]]


class Vocab:
    """Token strings <-> ids; ids 0-3 are the specials."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        return cls([f"w{i}" for i in range(len(SPECIALS), size)])

    @classmethod
    def build(cls, sentences: Sequence[Sequence[str]], min_count: int = 1) -> "Vocab":
        counts: dict[str, int] = {}
        for s in sentences:
            for t in s:
                counts[t] = counts.get(t, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        return cls([t for t in ranked if counts[t] >= min_count])

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.stoi.get(t, UNK) for t in tokens)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos[len(SPECIALS):]) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


@dataclass
class Corpus:
    pairs: list[Pair]
    domain: str = "general"
    vocab_size: Optional[int] = None
    max_len: int = MAX_SENTENCE_LEN

    def __post_init__(self):
        self.pairs = [(tuple(int(i) for i in s), tuple(int(i) for i in t)) for s, t in self.pairs]
        for s, t in self.pairs:
            if not s or not t:
                raise DataError("empty sentence in corpus")
            if len(s) > self.max_len or len(t) > self.max_len:
                raise DataError(f"sentence longer than {self.max_len}")
            if self.vocab_size is not None and max(max(s), max(t)) >= self.vocab_size:
                raise DataError("token id outside vocabulary")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self) -> list[tuple[int, ...]]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[tuple[int, ...]]:
        return [t for _, t in self.pairs]

    def subset(self, idx: Sequence[int]) -> "Corpus":
        return Corpus([self.pairs[i] for i in idx], self.domain, self.vocab_size, self.max_len)

    def split(self, sizes: Sequence[int]) -> list["Corpus"]:
        """Consecutive slices of the given sizes."""
        if sum(sizes) > len(self):
            raise ConfigError("split sizes exceed corpus size")
        out, start = [], 0
        for n in sizes:
            out.append(self.subset(range(start, start + n)))
            start += n
        return out


@dataclass(frozen=True)
class DomainSpec:
    """How to synthesise one domain.

    kind: ``copy`` (target = source), ``reverse`` (target = reversed source),
    ``remap`` (target = fixed permutation of each source token) or ``bigram``
    (remap, with sources from a skewed bigram grammar instead of unigrams).
    ``skew`` is the Zipf exponent of token (or transition) frequencies.
    ``noise`` is the chance that each target token is replaced by a uniform
    draw from the slice, which gives the task an irreducible loss.
    """

    name: str
    kind: str = "copy"
    vocab: tuple[int, int] = (4, 36)
    length: tuple[int, int] = (4, 10)
    skew: float = 1.0
    seed: int = 0
    noise: float = 0.0

    KINDS = ("copy", "reverse", "remap", "bigram")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        lo, hi = self.vocab
        if hi <= lo:
            raise ConfigError("vocab slice is empty")
        if lo < len(SPECIALS):
            raise ConfigError("vocab slice overlaps the special ids")
        if not 1 <= self.length[0] <= self.length[1]:
            raise ConfigError("bad length range")
        if self.skew < 0:
            raise ConfigError("skew must be non-negative")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError("noise must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"], d["length"] = list(self.vocab), list(self.length)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["vocab"], d["length"] = tuple(d["vocab"]), tuple(d["length"])
        return cls(**d)


def _zipf(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def generate_domain(spec: DomainSpec, n_sentences: int) -> Corpus:
    """Deterministic parallel corpus for ``spec``; same seed, same bytes."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.vocab
    ids = np.arange(lo, hi)
    n = len(ids)
    order = rng.permutation(ids)          # frequency rank -> token id
    mapping = dict(zip(ids.tolist(), rng.permutation(ids).tolist()))
    unigram = _zipf(n, spec.skew)
    trans = None
    if spec.kind == "bigram":
        trans = np.stack([_zipf(n, spec.skew)[rng.permutation(n)] for _ in range(n)])
    noise_rng = np.random.default_rng([spec.seed, 1])
    pairs = []
    for _ in range(n_sentences):
        k = int(rng.integers(spec.length[0], spec.length[1] + 1))
        if trans is None:
            src = order[rng.choice(n, size=k, p=unigram)].tolist()
        else:
            state = int(rng.choice(n, p=unigram))
            seq = [state]
            for _ in range(k - 1):
                state = int(rng.choice(n, p=trans[state]))
                seq.append(state)
            src = order[seq].tolist()
        if spec.kind == "copy":
            tgt = list(src)
        elif spec.kind == "reverse":
            tgt = src[::-1]
        else:
            tgt = [mapping[t] for t in src]
        if spec.noise > 0:
            flip = noise_rng.random(len(tgt)) < spec.noise
            draws = noise_rng.integers(lo, hi, size=len(tgt))
            tgt = [int(d) if f else t for t, f, d in zip(tgt, flip, draws)]
        pairs.append((tuple(src), tuple(tgt)))
    return Corpus(pairs, spec.name)


# -- files ---------------------------------------------------------------------

def write_corpus(prefix: str, corpus: Corpus, vocab: Vocab) -> None:
    """``prefix.src`` / ``prefix.tgt``: one sentence per line, space-separated tokens."""
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    with open(prefix + ".src", "w", encoding="utf-8") as fs, open(prefix + ".tgt", "w", encoding="utf-8") as ft:
        for s, t in corpus.pairs:
            fs.write(" ".join(vocab.decode(s)) + "\n")
            ft.write(" ".join(vocab.decode(t)) + "\n")


def read_corpus(prefix: str, vocab: Vocab, domain: str = "general", max_len: int = MAX_SENTENCE_LEN) -> Corpus:
    """Reads parallel files; unknown tokens map to ``<unk>``, over-long pairs are dropped."""
    with open(prefix + ".src", encoding="utf-8") as fs, open(prefix + ".tgt", encoding="utf-8") as ft:
        src_lines, tgt_lines = fs.read().splitlines(), ft.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise DataError(f"{prefix}: source and target line counts differ")
    pairs = []
    for s, t in zip(src_lines, tgt_lines):
        s_ids, t_ids = vocab.encode(s.split()), vocab.encode(t.split())
        if not s_ids or not t_ids or len(s_ids) > max_len or len(t_ids) > max_len:
            continue
        pairs.append((s_ids, t_ids))
    return Corpus(pairs, domain, len(vocab), max_len)


# -- batching ------------------------------------------------------------------

def batches(corpus: Corpus, batch_size: int) -> list[Batch]:
    """Fixed-order batches (evaluation, scoring)."""
    return [make_batch(corpus.pairs[i:i + batch_size]) for i in range(0, len(corpus), batch_size)]


def shuffled_batches(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Endless stream of batches, reshuffled every epoch."""
    while True:
        order = rng.permutation(len(corpus))
        for i in range(0, len(order) - batch_size + 1 if len(order) >= batch_size else 1, batch_size):
            yield make_batch([corpus.pairs[j] for j in order[i:i + batch_size]])
