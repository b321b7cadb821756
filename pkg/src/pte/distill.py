"""Word-level distillation of a pruned student towards its unpruned teacher."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Corpus
from .errors import ConfigError, ConsistencyError, InvariantViolation, UsageError
from .partition import GENERAL, MaskView, ParamPartition, trainable_masks
from .training import TrainConfig, TrainLog, train, validation_loss
from .transformer import PAD, Batch, TransformerModel


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 1.0
    source: str = "in_domain"          # which corpus feeds the student: "in_domain" or "general"
    steps: int = 600
    lr: float = 1e-4
    batch_size: int = 32
    eval_every: int = 50
    patience: int = 5
    train_excluded: bool = False       # also update never-pruned tensors (layer norms)
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.source not in ("in_domain", "general"):
            raise ConfigError(f"unknown KD source {self.source!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KDConfig":
        return cls(**d)


def kd_loss(teacher_logits, student_logits: T.Tensor, pad_mask, temperature: float = 1.0) -> T.Tensor:
    """Mean over non-pad positions of ``-sum_v q_v log p_v``, ``q``/``p`` the tempered softmaxes."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    t = teacher_logits.data if isinstance(teacher_logits, T.Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ConsistencyError(f"teacher logits {t.shape} vs student logits {student_logits.shape}")
    live = ~np.asarray(pad_mask, dtype=bool).reshape(-1)
    if live.size != int(np.prod(t.shape[:-1])):
        raise ConsistencyError("pad mask does not match logits positions")
    n = int(live.sum())
    if n == 0:
        raise UsageError("kd_loss over zero positions")
    q = np.exp(T._log_softmax_np(t.astype(np.float64) / temperature, -1))
    s = student_logits if temperature == 1.0 else T.scale(student_logits, 1.0 / temperature)
    return T.soft_cross_entropy(s, q, live / n)


def teacher_logits(teacher: TransformerModel, batch: Batch) -> np.ndarray:
    with T.no_grad():
        return teacher.forward(batch.src, batch.tgt_in).data


def kd_batch_loss(student: TransformerModel, teacher: TransformerModel, batch: Batch, view=None, train=False,
                  rng=None, temperature: float = 1.0) -> T.Tensor:
    q = teacher_logits(teacher, batch)
    s = student.forward(batch.src, batch.tgt_in, view=view, train=train, rng=rng)
    return kd_loss(q, s, batch.tgt_out == PAD, temperature)


def _digest(model: TransformerModel) -> bytes:
    return b"".join(p.data.tobytes() for p in model.params.values())


def run_kd_phase(teacher: TransformerModel, student: TransformerModel, partition: ParamPartition, corpus: Corpus,
                 cfg: KDConfig, general_val: Optional[Corpus] = None) -> TrainLog:
    """Distil ``teacher`` into ``student`` seen through the GENERAL view, in place.

    Only GENERAL entries of prunable tensors move (plus never-pruned tensors
    if ``cfg.train_excluded``). With ``general_val`` the student is evaluated
    every ``eval_every`` steps and the best state by general validation loss
    is kept, stopping after ``patience`` evaluations without improvement.
    """
    if teacher.config != student.config:
        raise ConsistencyError("teacher and student configs differ")
    if set(teacher.params) != set(student.params):
        raise ConsistencyError("teacher and student parameter names differ")
    view: MaskView = partition.general_view()
    masks = trainable_masks(partition, {GENERAL})
    if not cfg.train_excluded:
        masks = {k: m for k, m in masks.items() if k not in partition.exclusions}
    before = _digest(teacher)

    def loss_fn(model, batch, view=None, train=False, rng=None):
        return kd_batch_loss(model, teacher, batch, view, train, rng, cfg.temperature)

    eval_fn = None if general_val is None else (lambda: validation_loss(student, general_val, view))
    tcfg = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, eval_every=cfg.eval_every,
                       patience=cfg.patience if general_val is not None else None, seed=cfg.seed)
    log = train(student, corpus, tcfg, masks=masks, view=view, loss_fn=loss_fn, eval_fn=eval_fn)
    if _digest(teacher) != before:
        raise InvariantViolation("teacher parameters changed during distillation")
    return log
