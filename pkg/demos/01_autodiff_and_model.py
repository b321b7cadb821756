"""Reverse-mode tensors, a gradient check, and a small encoder-decoder learning to copy."""

import numpy as np

from pte import tensor as T
from pte.data import DomainSpec, generate_domain
from pte.training import TrainConfig, corpus_bleu, train
from pte.transformer import ModelConfig, TransformerModel, beam_search, greedy_decode, param_count

# A gradient through matmul and softmax, compared against central differences.
rng = np.random.default_rng(0)
a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
with T.Tape() as tape:
    loss = T.tsum(T.square(T.softmax(T.matmul(a, b), -1)))
tape.backward(loss)


def f():
    return float(T.tsum(T.square(T.softmax(T.matmul(T.Tensor(a.data), T.Tensor(b.data)), -1))).data)


h, i = 1e-6, (1, 2)
old = a.data[i]
a.data[i] = old + h; fp = f()
a.data[i] = old - h; fm = f()
a.data[i] = old
print("tape grad", a.grad[i], "finite difference", (fp - fm) / (2 * h))

# A two-layer model on a copy task.
cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64, src_vocab=24, tgt_vocab=24, max_len=12)
print("parameters:", param_count(cfg))
data = generate_domain(DomainSpec("copy", "copy", (4, 24), (3, 7), 1.0, seed=1), 900)
train_c, test_c = data.split([800, 100])
model = TransformerModel(cfg, seed=0)
log = train(model, train_c, TrainConfig(steps=400, batch_size=32, lr=3e-3, warmup=50))
print("loss: first", round(log.losses[0], 3), "last", round(log.losses[-1], 3))

# Greedy and beam decoding of held-out sentences.
src = [list(s) for s in test_c.sources[:3]]
print("sources:", src)
print("greedy :", [h.tokens for h in greedy_decode(model, src)])
print("beam 4 :", [h.tokens for h in beam_search(model, src, beam_size=4)])
print("test BLEU, beam 4:", round(corpus_bleu(model, test_c, beam_size=4), 2))
