"""Comparison systems: plain fine-tuning, MOL, EWC and the two ablations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Corpus, Pair
from .distill import kd_batch_loss
from .errors import ConfigError, ConsistencyError, UsageError
from .importance import ImportanceReport, random_importance
from .partition import FREE, Granularity, ParamPartition, build_partition, trainable_masks
from .training import TrainConfig, TrainLog, train
from .transformer import Batch, TransformerModel, make_batch, nll_loss

FINETUNE_LR = 7.5e-5


def finetune(model: TransformerModel, corpus: Corpus, cfg: TrainConfig = TrainConfig(lr=FINETUNE_LR),
             loss_fn=None, masks=None, eval_fn=None) -> tuple[TransformerModel, TrainLog]:
    """Continue training a copy of ``model`` on ``corpus``; every parameter trainable unless ``masks``."""
    adapted = model.copy()
    log = train(adapted, corpus, cfg, masks=masks, loss_fn=loss_fn,
                eval_fn=None if eval_fn is None else (lambda: eval_fn(adapted)))
    return adapted, log


# -- MOL -------------------------------------------------------------------------

def mol_loss(model: TransformerModel, batch: Batch, teacher: TransformerModel, alpha: float = 1.0,
             view=None, train=False, rng=None) -> T.Tensor:
    """``NLL + alpha * KD(teacher)`` on the same batch; ``alpha = 0`` is the plain NLL."""
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    nll = nll_loss(model, batch, view=view, train=train, rng=rng)
    if alpha == 0:
        return nll
    return T.add(nll, T.scale(kd_batch_loss(model, teacher, batch, view, train, rng), alpha))


def mol_finetune(model: TransformerModel, corpus: Corpus, alpha: float = 1.0,
                 cfg: TrainConfig = TrainConfig(lr=FINETUNE_LR), eval_fn=None) -> tuple[TransformerModel, TrainLog]:
    teacher = model.copy()

    def loss_fn(m, batch, view=None, train=False, rng=None):
        return mol_loss(m, batch, teacher, alpha, view, train, rng)

    return finetune(model, corpus, cfg, loss_fn=loss_fn, eval_fn=eval_fn)


# -- EWC -------------------------------------------------------------------------

@dataclass
class FisherDiag:
    values: dict[str, np.ndarray]
    n_samples: int

    def __post_init__(self):
        for k, v in self.values.items():
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ConsistencyError(f"Fisher values for {k} must be finite and non-negative")


def estimate_fisher(model: TransformerModel, pairs: Sequence[Pair], max_samples: Optional[int] = 1000) -> FisherDiag:
    """Empirical diagonal Fisher of the sentence likelihood.

    Mean over sentences of the squared gradient of ``-log p(y | x)``, the
    sentence's summed token NLL.
    """
    pairs = list(pairs)[:max_samples] if max_samples is not None else list(pairs)
    if not pairs:
        raise UsageError("Fisher estimate needs at least one sample")
    sums = {k: np.zeros(p.shape, dtype=np.float64) for k, p in model.params.items()}
    for pair in pairs:
        model.zero_grad()
        with T.Tape() as tape:
            loss = nll_loss(model, make_batch([pair]), reduction="token_sum")
        tape.backward(loss)
        for k, g in model.grads().items():
            g = g.astype(np.float64)
            sums[k] += g * g
    model.zero_grad()
    return FisherDiag({k: v / len(pairs) for k, v in sums.items()}, len(pairs))


def ewc_penalty(model: TransformerModel, fisher: FisherDiag, anchor: dict[str, np.ndarray], alpha: float = 1.0,
                view=None) -> T.Tensor:
    """``alpha * sum_i F_i (theta_i - anchor_i)^2``."""
    P = model.params if view is None else view.effective(model.params)
    total = None
    for k, p in P.items():
        if anchor[k].shape != p.shape:
            raise ConsistencyError(f"anchor shape mismatch for {k}")
        f = T.Tensor(fisher.values[k].astype(p.dtype))
        term = T.tsum(T.mul(T.square(T.add(p, T.Tensor(-anchor[k].astype(p.dtype)))), f))
        total = term if total is None else T.add(total, term)
    return T.scale(total, alpha)


def ewc_loss(model: TransformerModel, batch: Batch, fisher: FisherDiag, anchor: dict[str, np.ndarray],
             alpha: float = 1.0, view=None, train=False, rng=None) -> T.Tensor:
    nll = nll_loss(model, batch, view=view, train=train, rng=rng)
    if alpha == 0:
        return nll
    return T.add(nll, ewc_penalty(model, fisher, anchor, alpha, view))


def ewc_finetune(model: TransformerModel, corpus: Corpus, fisher: FisherDiag, alpha: float = 1.0,
                 cfg: TrainConfig = TrainConfig(lr=FINETUNE_LR), eval_fn=None) -> tuple[TransformerModel, TrainLog]:
    anchor = model.state()

    def loss_fn(m, batch, view=None, train=False, rng=None):
        return ewc_loss(m, batch, fisher, anchor, alpha, view, train, rng)

    return finetune(model, corpus, cfg, loss_fn=loss_fn, eval_fn=eval_fn)


# -- ablations -------------------------------------------------------------------

def ablation_random_partition(model: TransformerModel, ratio: float, seed: int = 0,
                              granularity=Granularity.WEIGHT) -> ParamPartition:
    """Partition from uniform random scores instead of importance."""
    return build_partition(model, random_importance(model, granularity, seed), ratio, granularity)


def ablation_selective_ft(model: TransformerModel, report: ImportanceReport, ratio: float, corpus: Corpus,
                          cfg: TrainConfig = TrainConfig(lr=FINETUNE_LR), eval_fn=None
                          ) -> tuple[TransformerModel, ParamPartition, TrainLog]:
    """Fine-tune only the unimportant (FREE) entries; the whole model then serves both domains."""
    part = build_partition(model, report, ratio, report.granularity)
    adapted, log = finetune(model, corpus, cfg, masks=trainable_masks(part, {FREE}), eval_fn=eval_fn)
    return adapted, part, log
