"""Generic training loop and evaluation helpers."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import Corpus, batches, shuffled_batches
from .errors import ConfigError
from .metrics import bleu
from .optim import Adam
from .transformer import PAD, TransformerModel, beam_search, nll_loss

log = logging.getLogger(__name__)

LossFn = Callable[..., T.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 0
    decay: str = "none"            # "none" or "linear" (to 10% of lr at the last step)
    clip: Optional[float] = 1.0
    eval_every: int = 100
    patience: Optional[int] = None  # evals without improvement before stopping; None = run all steps
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and lr > 0 required")
        if self.decay not in ("none", "linear"):
            raise ConfigError(f"unknown decay {self.decay!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_eval: Optional[float] = None
    stopped_early: bool = False


def train(model: TransformerModel, corpus: Corpus, cfg: TrainConfig, masks=None, view=None,
          loss_fn: Optional[LossFn] = None, eval_fn: Optional[Callable[[], float]] = None) -> TrainLog:
    """Adam on ``loss_fn(model, batch, view=..., train=True, rng=...)``.

    ``masks`` restricts which entries move (see :class:`pte.optim.Adam`).
    With ``eval_fn`` (lower is better) the best evaluated state is restored at the
    end; evaluation also runs before the first step, so training can never end
    worse than it started by that measure.
    """
    loss_fn = loss_fn or nll_loss
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, lr=cfg.lr, masks=masks, warmup=cfg.warmup, clip=cfg.clip)
    stream = shuffled_batches(corpus, cfg.batch_size, rng)
    out = TrainLog()
    best_state = None
    bad = 0
    if eval_fn is not None:
        out.best_eval = eval_fn()
        out.evals.append((0, out.best_eval))
        best_state = model.state()
    for step in range(1, cfg.steps + 1):
        if cfg.decay == "linear":
            opt.lr = cfg.lr * (1.0 - 0.9 * (step - 1) / max(cfg.steps - 1, 1))
        batch = next(stream)
        model.zero_grad()
        with T.Tape() as tape:
            loss = loss_fn(model, batch, view=view, train=True, rng=drop_rng)
        tape.backward(loss)
        opt.step()
        out.losses.append(loss.item())
        if eval_fn is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            score = eval_fn()
            out.evals.append((step, score))
            log.debug("step %d loss %.4f eval %.5f", step, out.losses[-1], score)
            if score < out.best_eval:
                out.best_eval, out.best_step, best_state, bad = score, step, model.state(), 0
            else:
                bad += 1
                if cfg.patience is not None and bad >= cfg.patience:
                    out.stopped_early = True
                    break
    model.zero_grad()
    if best_state is not None:
        model.load_state(best_state)
    return out


# -- evaluation ------------------------------------------------------------------

def validation_loss(model: TransformerModel, corpus: Corpus, view=None, batch_size: int = 100) -> float:
    """Mean over sentences of the per-sentence token-mean NLL."""
    total = 0.0
    for b in batches(corpus, batch_size):
        total += nll_loss(model, b, view=view, reduction="sum").item()
    return total / len(corpus)


def token_accuracy(model: TransformerModel, corpus: Corpus, view=None, batch_size: int = 100) -> float:
    """Teacher-forced argmax accuracy over every target token (EOS included)."""
    hit = n = 0
    for b in batches(corpus, batch_size):
        pred = model.forward(b.src, b.tgt_in, view=view).data.argmax(-1)
        live = b.tgt_out != PAD
        hit += int(((pred == b.tgt_out) & live).sum())
        n += int(live.sum())
    return hit / n


def translate(model: TransformerModel, corpus: Corpus, view=None, beam_size: int = 4) -> list[list[int]]:
    return [h.tokens for h in beam_search(model, corpus.sources, beam_size=beam_size, view=view)]


def corpus_bleu(model: TransformerModel, corpus: Corpus, view=None, beam_size: int = 4) -> float:
    return bleu(translate(model, corpus, view, beam_size), corpus.targets)
