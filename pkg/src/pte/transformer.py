"""Small post-LN encoder-decoder transformer on top of :mod:`pte.tensor`.

Weights follow the ``x @ W`` convention, so every projection matrix is stored
``[d_in, d_out]`` (the output projection is ``[d_model, tgt_vocab]``).
Parameter names are stable and double as checkpoint keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, UsageError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NEG_INF = -1e9
EMBED_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    src_vocab: int = 72
    tgt_vocab: int = 72
    max_len: int = 32
    dropout_rate: float = 0.0
    share_embeddings: bool = False
    length_normalize: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "src_vocab", "tgt_vocab", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.share_embeddings and self.src_vocab != self.tgt_vocab:
            raise ConfigError("shared embeddings need src_vocab == tgt_vocab")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def attention_prefixes(config: ModelConfig) -> list[str]:
    out = []
    for l in range(config.n_layers):
        out.append(f"enc.{l}.self_attn")
    for l in range(config.n_layers):
        out += [f"dec.{l}.self_attn", f"dec.{l}.cross_attn"]
    return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical (checkpoint) order."""
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {}
    if config.share_embeddings:
        shapes["embed"] = (config.src_vocab, d)
    else:
        shapes["src_embed"] = (config.src_vocab, d)
        shapes["tgt_embed"] = (config.tgt_vocab, d)

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.{p}.weight"] = (d, d)
            shapes[f"{prefix}.{p}.bias"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.fc1.weight"] = (d, f)
        shapes[f"{prefix}.fc1.bias"] = (f,)
        shapes[f"{prefix}.fc2.weight"] = (f, d)
        shapes[f"{prefix}.fc2.bias"] = (d,)

    for l in range(config.n_layers):
        attn(f"enc.{l}.self_attn")
        ln(f"enc.{l}.ln1")
        ffn(f"enc.{l}.ffn")
        ln(f"enc.{l}.ln2")
    for l in range(config.n_layers):
        attn(f"dec.{l}.self_attn")
        ln(f"dec.{l}.ln1")
        attn(f"dec.{l}.cross_attn")
        ln(f"dec.{l}.ln2")
        ffn(f"dec.{l}.ffn")
        ln(f"dec.{l}.ln3")
    shapes["out_proj.weight"] = (d, config.tgt_vocab)
    shapes["out_proj.bias"] = (config.tgt_vocab,)
    return shapes


def param_count(config: ModelConfig) -> int:
    d, f, n = config.d_model, config.d_ff, config.n_layers
    attn = 4 * (d * d + d)
    ffn = 2 * d * f + f + d
    ln = 2 * d
    emb = config.src_vocab * d if config.share_embeddings else (config.src_vocab + config.tgt_vocab) * d
    return emb + n * (attn + ffn + 2 * ln) + n * (2 * attn + ffn + 3 * ln) + d * config.tgt_vocab + config.tgt_vocab


def is_layer_norm(name: str) -> bool:
    return ".ln" in name


def sinusoid_table(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def xavier_bound(shape: tuple[int, ...]) -> float:
    return math.sqrt(6.0 / (shape[0] + shape[1]))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("embed"):
            arr = rng.normal(0.0, EMBED_INIT_STD, size=shape)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        elif len(shape) == 2:
            b = xavier_bound(shape)
            arr = rng.uniform(-b, b, size=shape)
        else:
            arr = np.zeros(shape)
        out[name] = arr.astype(dtype)
    return out


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool = True


class TransformerModel:
    """Named parameters plus the architecture that consumes them.

    ``value_splits`` maps an attention prefix to per-head value widths; it is
    only set on physically shrunk models (see :func:`pte.partition.shrink`).
    """

    def __init__(self, config: ModelConfig, params: Optional[dict[str, np.ndarray]] = None,
                 seed: int = 0, dtype=np.float32, value_splits: Optional[dict[str, tuple[int, ...]]] = None):
        self.config = config
        arrays = init_params(config, seed, dtype) if params is None else params
        self.params: dict[str, T.Tensor] = {
            k: T.Tensor(np.array(v, dtype=dtype if params is None else np.asarray(v).dtype), requires_grad=True)
            for k, v in arrays.items()
        }
        self.value_splits = dict(value_splits or {})
        self._pe = sinusoid_table(config.max_len, config.d_model)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype)

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, self.state(), value_splits=self.value_splits)

    def astype(self, dtype) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.astype(dtype) for k, v in self.state().items()},
                                value_splits=self.value_splits)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}

    # -- forward -------------------------------------------------------------

    def _effective(self, view) -> dict[str, T.Tensor]:
        return self.params if view is None else view.effective(self.params)

    def _embed(self, P, table, ids, train, rng):
        n = ids.shape[1]
        if n > self.config.max_len:
            raise DataError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = T.embed_lookup(P[table], ids)
        x = T.add(T.scale(x, math.sqrt(self.config.d_model)), T.Tensor(self._pe[:n].astype(x.dtype)))
        return self._dropout(x, train, rng)

    def _dropout(self, x, train, rng):
        if train and self.config.dropout_rate > 0:
            return T.dropout(x, self.config.dropout_rate, rng)
        return x

    def _attention(self, P, prefix, xq, xkv, bias, probes, train, rng):
        H = self.config.n_heads
        q = T.linear(xq, P[f"{prefix}.q.weight"], P[f"{prefix}.q.bias"])
        k = T.linear(xkv, P[f"{prefix}.k.weight"], P[f"{prefix}.k.bias"])
        v = T.linear(xkv, P[f"{prefix}.v.weight"], P[f"{prefix}.v.bias"])
        qh, kh = T.split_heads(q, H), T.split_heads(k, H)
        scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(self.config.d_head))
        attn = T.softmax(T.add(scores, bias), axis=-1)
        attn = self._dropout(attn, train, rng)
        splits = self.value_splits.get(prefix)
        if splits is None:
            ctx = T.concat_heads(T.matmul(attn, T.split_heads(v, H)))
        else:
            pieces, start = [], 0
            for h, width in enumerate(splits):
                pieces.append(T.matmul(attn[:, h], v[:, :, start:start + width]))
                start += width
            ctx = T.concat(pieces, axis=-1)
        if probes is not None:
            ctx.retain = True
            probes[prefix] = ctx
        return T.linear(ctx, P[f"{prefix}.o.weight"], P[f"{prefix}.o.bias"])

    def _ffn(self, P, prefix, x, probes, train, rng):
        h = T.relu(T.linear(x, P[f"{prefix}.fc1.weight"], P[f"{prefix}.fc1.bias"]))
        if probes is not None:
            h.retain = True
            probes[prefix] = h
        h = self._dropout(h, train, rng)
        return T.linear(h, P[f"{prefix}.fc2.weight"], P[f"{prefix}.fc2.bias"])

    def _sublayer(self, P, ln, x, y, train, rng):
        return T.layer_norm(T.add(x, self._dropout(y, train, rng)), P[f"{ln}.gain"], P[f"{ln}.bias"],
                            self.config.ln_eps)

    def encode(self, src, view=None, probes=None, train=False, rng=None):
        """Returns ``(memory, src_pad)`` for a ``[B, S]`` id batch."""
        src = np.asarray(src)
        P = self._effective(view)
        table = "embed" if self.config.share_embeddings else "src_embed"
        src_pad = src == PAD
        bias = T.Tensor(np.where(src_pad, NEG_INF, 0.0)[:, None, None, :].astype(self.dtype))
        x = self._embed(P, table, src, train, rng)
        for l in range(self.config.n_layers):
            pre = f"enc.{l}"
            x = self._sublayer(P, f"{pre}.ln1", x,
                               self._attention(P, f"{pre}.self_attn", x, x, bias, probes, train, rng), train, rng)
            x = self._sublayer(P, f"{pre}.ln2", x, self._ffn(P, f"{pre}.ffn", x, probes, train, rng), train, rng)
        return x, src_pad

    def decode_logits(self, memory, src_pad, tgt_in, view=None, probes=None, train=False, rng=None):
        tgt_in = np.asarray(tgt_in)
        P = self._effective(view)
        table = "embed" if self.config.share_embeddings else "tgt_embed"
        n = tgt_in.shape[1]
        causal = T.Tensor(np.triu(np.full((n, n), NEG_INF), k=1)[None, None].astype(self.dtype))
        cross = T.Tensor(np.where(src_pad, NEG_INF, 0.0)[:, None, None, :].astype(self.dtype))
        y = self._embed(P, table, tgt_in, train, rng)
        for l in range(self.config.n_layers):
            pre = f"dec.{l}"
            y = self._sublayer(P, f"{pre}.ln1", y,
                               self._attention(P, f"{pre}.self_attn", y, y, causal, probes, train, rng), train, rng)
            y = self._sublayer(P, f"{pre}.ln2", y,
                               self._attention(P, f"{pre}.cross_attn", y, memory, cross, probes, train, rng),
                               train, rng)
            y = self._sublayer(P, f"{pre}.ln3", y, self._ffn(P, f"{pre}.ffn", y, probes, train, rng), train, rng)
        return T.linear(y, P["out_proj.weight"], P["out_proj.bias"])

    def forward(self, src, tgt_in, view=None, probes=None, train=False, rng=None) -> T.Tensor:
        """Logits ``[B, T, V]`` (or ``[T, V]`` for unbatched 1-D inputs)."""
        src, tgt_in = np.asarray(src), np.asarray(tgt_in)
        single = src.ndim == 1
        if single:
            src, tgt_in = src[None], tgt_in[None]
        if train and rng is None:
            rng = np.random.default_rng(0)
        memory, src_pad = self.encode(src, view, probes, train, rng)
        logits = self.decode_logits(memory, src_pad, tgt_in, view, probes, train, rng)
        return T.reshape(logits, logits.shape[1:]) if single else logits


# -- batches and losses ---------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def pad_batch(seqs: Sequence[Sequence[int]], width: Optional[int] = None) -> np.ndarray:
    width = width or max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    if not pairs:
        raise UsageError("empty batch")
    src = pad_batch([s for s, _ in pairs])
    tgt_in = pad_batch([[BOS, *t] for _, t in pairs])
    tgt_out = pad_batch([[*t, EOS] for _, t in pairs])
    return Batch(src, tgt_in, tgt_out)


def sentence_weights(tgt_out: np.ndarray) -> np.ndarray:
    """Per-position weights turning summed token NLL into a mean of per-sentence means."""
    live = tgt_out != PAD
    k = live.sum(axis=1, keepdims=True)
    return live / (k * tgt_out.shape[0])


def nll_loss(model: TransformerModel, batch: Batch, view=None, train=False, rng=None,
             probes=None, reduction: str = "mean") -> T.Tensor:
    """Teacher-forced target NLL.

    ``mean``: per-sentence token mean, averaged over sentences; ``sum``: those
    sentence means summed; ``token_sum``: every token's NLL summed (the
    negative sentence log-likelihood for a single sentence).
    """
    if len(batch) == 0:
        raise UsageError("empty batch")
    if reduction not in ("mean", "sum", "token_sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    logits = model.forward(batch.src, batch.tgt_in, view=view, probes=probes, train=train, rng=rng)
    if reduction == "token_sum":
        w = (batch.tgt_out != PAD).astype(np.float64)
    else:
        w = sentence_weights(batch.tgt_out)
    if reduction == "sum":
        w = w * len(batch)
    return T.weighted_nll(logits, batch.tgt_out, w)


# -- decoding ------------------------------------------------------------------

def _log_probs_last(model, memory, src_pad, prefix, view) -> np.ndarray:
    logits = model.decode_logits(memory, src_pad, prefix, view).data[:, -1, :].astype(np.float64)
    return T._log_softmax_np(logits, -1)


def greedy_decode(model: TransformerModel, srcs: Sequence[Sequence[int]], max_len: Optional[int] = None,
                  view=None) -> list[Hypothesis]:
    """Argmax rollout (lowest id on ties), batched over sentences."""
    max_len = max_len or model.config.max_len - 1
    src = pad_batch(srcs)
    memory, src_pad = model.encode(src, view)
    n = len(srcs)
    prefix = np.full((n, 1), BOS, dtype=np.int64)
    score = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    length = np.zeros(n, dtype=np.int64)
    for _ in range(max_len):
        lp = _log_probs_last(model, memory, src_pad, prefix, view)
        tok = lp.argmax(axis=-1)
        tok = np.where(done, PAD, tok)
        score += np.where(done, 0.0, lp[np.arange(n), tok])
        length += ~done
        done |= tok == EOS
        prefix = np.concatenate([prefix, tok[:, None]], axis=1)
        if done.all():
            break
    out = []
    for i in range(n):
        toks = prefix[i, 1:1 + length[i]].tolist()
        finished = bool(done[i])
        if finished:
            toks = toks[:-1]
        denom = length[i] if model.config.length_normalize else 1
        out.append(Hypothesis(toks, float(score[i] / denom), finished))
    return out


def beam_search(model: TransformerModel, srcs: Sequence[Sequence[int]], beam_size: int = 4,
                max_len: Optional[int] = None, view=None, chunk: int = 64) -> list[Hypothesis]:
    """Length-normalised beam search, batched over sentences.

    A hypothesis ends when EOS ranks inside the top ``beam_size`` candidates.
    The best ``beam_size`` ended hypotheses are kept, and a sentence stops once
    the worst of them scores at least the best live prefix's current
    normalised score. Ties go to the lower (beam, token id) pair.
    """
    if beam_size < 1:
        raise UsageError("beam_size must be >= 1")
    max_len = max_len or model.config.max_len - 1
    if max_len + 1 > model.config.max_len:
        raise DataError("decode max_len exceeds model max_len")
    out: list[Hypothesis] = []
    for i in range(0, len(srcs), chunk):
        out += _beam_chunk(model, srcs[i:i + chunk], beam_size, max_len, view)
    return out


def _beam_chunk(model, srcs, beam, max_len, view):
    n = len(srcs)
    norm = model.config.length_normalize
    memory, src_pad = model.encode(pad_batch(srcs), view)
    seqs = [[[BOS]] for _ in range(n)]
    scores = [np.zeros(1) for _ in range(n)]
    finished: list[list[tuple[float, list[int], float]]] = [[] for _ in range(n)]
    active = list(range(n))
    for step in range(max_len):
        rows = np.concatenate([np.full(len(seqs[i]), i) for i in active])
        prefix = np.array([s for i in active for s in seqs[i]], dtype=np.int64)
        lp = _log_probs_last(model, T.Tensor(memory.data[rows]), src_pad[rows], prefix, view)
        v = lp.shape[1]
        offset = 0
        still = []
        for i in active:
            k = len(seqs[i])
            cand = (scores[i][:, None] + lp[offset:offset + k]).reshape(-1)
            offset += k
            order = np.argsort(-cand, kind="stable")
            new_seqs, new_scores = [], []
            for rank, idx in enumerate(order):
                b, tok = divmod(int(idx), v)
                s = float(cand[idx])
                if tok == EOS:
                    if rank < beam:
                        finished[i].append((s / (step + 1) if norm else s, seqs[i][b][1:], s))
                    continue
                new_seqs.append(seqs[i][b] + [tok])
                new_scores.append(s)
                if len(new_seqs) == beam:
                    break
            seqs[i], scores[i] = new_seqs, np.array(new_scores)
            finished[i] = sorted(finished[i], key=lambda h: -h[0])[:beam]
            best_live = max(new_scores) / (step + 1) if norm else max(new_scores)
            if len(finished[i]) < beam or finished[i][-1][0] < best_live:
                still.append(i)
        active = still
        if not active:
            break
    out = []
    for i in range(n):
        if finished[i]:
            best = max(finished[i], key=lambda h: h[0])
            out.append(Hypothesis(list(best[1]), best[0], True))
        else:
            length = len(seqs[i][0]) - 1
            normed = scores[i] / length if norm else scores[i]
            b = int(np.argmax(normed))
            out.append(Hypothesis(seqs[i][b][1:], float(normed[b]), False))
    return out


def decode(model: TransformerModel, src: Sequence[int], beam_size: int = 4, max_len: Optional[int] = None,
           view=None) -> Hypothesis:
    """Decode one sentence; ``beam_size=1`` is greedy."""
    return beam_search(model, [list(src)], beam_size, max_len, view)[0]
