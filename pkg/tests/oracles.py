"""Independent reference computations used across the test suite."""

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error, with an absolute floor for near-zero entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def loop_cross_entropy(logits: np.ndarray, targets, ignore_index: int) -> float:
    """Per-element summation of -log softmax, no vectorisation."""
    total, n = 0.0, 0
    for row, t in zip(logits.tolist(), list(targets)):
        if t == ignore_index:
            continue
        m = max(row)
        z = sum(np.exp(v - m) for v in row)
        total += -(row[t] - m - np.log(z))
        n += 1
    return total / n


def loop_kd(teacher: np.ndarray, student: np.ndarray, pad, temperature: float = 1.0) -> float:
    """Double loop over positions and vocabulary of -sum_v q_v log p_v."""
    total, n = 0.0, 0
    for tr, sr, is_pad in zip(teacher.tolist(), student.tolist(), list(pad)):
        if is_pad:
            continue
        tr = [v / temperature for v in tr]
        sr = [v / temperature for v in sr]
        tm, sm = max(tr), max(sr)
        tz = sum(np.exp(v - tm) for v in tr)
        sz = sum(np.exp(v - sm) for v in sr)
        acc = 0.0
        for tv, sv in zip(tr, sr):
            q = np.exp(tv - tm) / tz
            logp = sv - sm - np.log(sz)
            acc -= q * logp
        total += acc
        n += 1
    return total / n


def loop_taylor(model, pairs, site_names):
    """Per-sentence tape passes; ``sum_positions |g * h|`` summed over sentences, divided by their count."""
    from pte import tensor as T
    from pte.transformer import make_batch, nll_loss

    work = model.astype(np.float64)
    sums = {}
    for pair in pairs:
        probes = {}
        with T.Tape() as tape:
            loss = nll_loss(work, make_batch([pair]), probes=probes)
        tape.backward(loss)
        for name in site_names:
            h = probes[name]
            contrib = np.zeros(h.shape[-1])
            flat_h, flat_g = h.data.reshape(-1, h.shape[-1]), h.grad.reshape(-1, h.shape[-1])
            for t in range(flat_h.shape[0]):
                for i in range(flat_h.shape[1]):
                    contrib[i] += abs(flat_g[t, i] * flat_h[t, i])
            sums[name] = sums.get(name, 0) + contrib
        work.zero_grad()
    return {k: v / len(pairs) for k, v in sums.items()}


def loop_bleu(hyps, refs, max_n=4, eps=1e-9):
    """Corpus BLEU by explicit n-gram enumeration and clipping."""
    import math

    m, t = [0] * max_n, [0] * max_n
    c = r = 0
    for h, ref in zip(hyps, refs):
        h, ref = list(h), list(ref)
        c += len(h)
        r += len(ref)
        for n in range(1, max_n + 1):
            hg = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            used = [False] * len(rg)
            for g in hg:
                t[n - 1] += 1
                for j, x in enumerate(rg):
                    if not used[j] and x == g:
                        used[j] = True
                        m[n - 1] += 1
                        break
    if c == 0:
        return 0.0
    logs = [math.log(mi / ti) if mi else math.log(eps) for mi, ti in zip(m, t) if ti]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * bp * math.exp(sum(logs) / len(logs))


def loop_lm_xent(train_sents, sentence, order, k):
    """Additive-smoothing n-gram cross-entropy from raw counts, one token at a time (k > 0)."""
    import math

    vocab = sorted({w for s in train_sents for w in s}, key=repr)
    V = len(vocab) + 1
    bos = "<s>"

    def norm(w):
        return w if w in vocab else "<unk>"

    total = 0.0
    ctx = [bos] * (order - 1)
    for w in sentence:
        w = norm(w)
        c_ctx = c_full = 0
        for s in train_sents:
            padded = [bos] * (order - 1) + list(s)
            for i in range(order - 1, len(padded)):
                if padded[i - order + 1:i] == ctx:
                    c_ctx += 1
                    if padded[i] == w:
                        c_full += 1
        total -= math.log((c_full + k) / (c_ctx + k * V))
        if order > 1:
            ctx = ctx[1:] + [w]
    return total / len(sentence)


def loop_fisher(model, pairs):
    """Per-sample tape gradients of the summed token cross-entropy, squared and averaged with Python sums."""
    from pte import tensor as T
    from pte.transformer import BOS, EOS

    sums = {k: np.zeros(p.shape) for k, p in model.params.items()}
    for src, tgt in pairs:
        model.zero_grad()
        with T.Tape() as tape:
            logits = model.forward(np.array(src), np.array([BOS, *tgt]))
            loss = T.scale(T.cross_entropy(logits, np.array([*tgt, EOS])), len(tgt) + 1)
        tape.backward(loss)
        for k, p in model.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            flat = sums[k].reshape(-1)
            for i, v in enumerate(g.reshape(-1).tolist()):
                flat[i] += v * v
    model.zero_grad()
    return {k: v / len(pairs) for k, v in sums.items()}


def loop_moore_lewis(pair, general_src, general_tgt, in_src, in_tgt, order, k):
    """Moore-Lewis score from four raw-count LM cross-entropies."""
    s, t = pair
    return (loop_lm_xent(general_src, s, order, k) - loop_lm_xent(in_src, s, order, k)) + \
        (loop_lm_xent(general_tgt, t, order, k) - loop_lm_xent(in_tgt, t, order, k))
