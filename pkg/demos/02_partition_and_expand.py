"""Pruning into GENERAL and FREE, freezing the general block, and growing a domain."""

import numpy as np

from pte.importance import magnitude_importance, random_importance
from pte.partition import (AllocationPolicy, Granularity, build_partition, expand, general_digest, shrink,
                           trainable_masks)
from pte.data import DomainSpec, generate_domain
from pte.training import TrainConfig, train, translate
from pte.transformer import ModelConfig, TransformerModel

cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64, src_vocab=40, tgt_vocab=40, max_len=12)
model = TransformerModel(cfg, seed=0)

# Weight mode: the 30% smallest-magnitude entries of each matrix become FREE.
part = build_partition(model, magnitude_importance(model), 0.3)
print("weight mode:", part.counts(include_excluded=True))

# The general view zeroes every FREE entry; its digest identifies the frozen block.
digest = general_digest(model, part)

# Expanding zero-initialises the FREE entries and hands them to domain 1.
part = expand(part, 1, AllocationPolicy(), model=model)
print("after expand:", part.counts(include_excluded=True))

# Fine-tune only the domain-1 entries on a new vocabulary slice.
general = generate_domain(DomainSpec("general", "remap", (4, 22), (3, 7), 1.0, 1), 50)
in_domain = generate_domain(DomainSpec("in1", "remap", (22, 40), (3, 7), 1.0, 2), 400)
before = translate(model, general, part.general_view(), beam_size=2)
train(model, in_domain, TrainConfig(steps=100, batch_size=32, lr=3e-3), masks=trainable_masks(part, {1}),
      view=part.domain_view(1))
after = translate(model, general, part.general_view(), beam_size=2)
print("general digest unchanged:", general_digest(model, part) == digest)
print("general-view decodes unchanged:", before == after)

# Neuron mode drops whole hidden units; the masked model equals a physically smaller one.
npart = build_partition(model, random_importance(model, Granularity.NEURON, seed=0), 0.25, Granularity.NEURON)
view = npart.general_view()
small = shrink(model, view)
src, tgt = np.array([[5, 6, 7, 2]]), np.array([[1, 8, 9]])
diff = np.abs(model.forward(src, tgt, view=view).data - small.forward(src, tgt).data).max()
print(f"shrunk model: {small.n_params} of {model.n_params} params, max logit diff {diff:.1e}")
