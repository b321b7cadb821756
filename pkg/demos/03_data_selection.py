"""Ranking a mixed general pool by how in-domain each sentence looks, then scoring with BLEU."""

import numpy as np

from pte.data import DomainSpec, generate_domain
from pte.metrics import bleu, moore_lewis_score, quartile_split, train_ngram_lm

# The pool is 75% general text plus 25% hidden in-domain-like text; a separate sample trains the in-domain LMs.
general = generate_domain(DomainSpec("general", "bigram", (4, 40), (4, 10), 1.1, 1), 1500)
hidden = generate_domain(DomainSpec("in1", "bigram", (25, 60), (4, 10), 1.1, 2), 500)
in_train = generate_domain(DomainSpec("in1", "bigram", (25, 60), (4, 10), 1.1, 3), 1000)
pool = general.pairs + hidden.pairs
is_hidden = np.array([False] * len(general) + [True] * len(hidden))

g_src, g_tgt = train_ngram_lm(general.sources), train_ngram_lm(general.targets)
i_src, i_tgt = train_ngram_lm(in_train.sources), train_ngram_lm(in_train.targets)

# Higher score: lower cross-entropy under the in-domain LMs than under the general ones.
scores = [moore_lewis_score(p, g_src, g_tgt, i_src, i_tgt) for p in pool]
quarters = quartile_split(list(range(len(pool))), scores)
for q, idx in enumerate(quarters, 1):
    print(f"quarter {q}: {len(idx)} sentences, {100 * is_hidden[idx].mean():.1f}% from the hidden in-domain part")

# Corpus BLEU: identical output scores 100; dropping a token costs both precision and length.
refs = general.targets[:100]
print("BLEU(refs, refs):", bleu(refs, refs))
print("BLEU, last token dropped:", round(bleu([r[:-1] for r in refs], refs), 2))
