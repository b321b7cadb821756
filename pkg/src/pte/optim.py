"""Optimisers that honour per-entry trainable masks.

Entries outside the mask are never written, so frozen values stay
bit-identical no matter how many steps run.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9,
                 masks: Optional[dict[str, np.ndarray]] = None, warmup: int = 0, clip: Optional[float] = 1.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup = warmup
        self.clip = clip
        # None = all trainable; a missing key = fully frozen
        self.masks = masks
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def trainable(self, name: str):
        """Boolean mask, ``True`` for a fully trainable tensor, or None when frozen."""
        if self.masks is None:
            return True
        m = self.masks.get(name)
        if m is not None and m.all():
            return True
        return m

    def current_lr(self) -> float:
        if self.warmup and self.t < self.warmup:
            return self.lr * (self.t + 1) / self.warmup
        return self.lr

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        grads = {}
        for k, p in self.params.items():
            mask = self.trainable(k)
            if p.grad is None or mask is None or (mask is not True and not mask.any()):
                continue
            grads[k] = p.grad if mask is True else np.where(mask, p.grad, 0)
        if self.clip is not None and grads:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            p, mask = self.params[k], self.trainable(k)
            m = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = ((lr / c1) * m / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            if mask is True:
                self.m[k], self.v[k] = m, v
                p.data = p.data - upd
            else:
                self.m[k] = np.where(mask, m, self.m[k])
                self.v[k] = np.where(mask, v, self.v[k])
                p.data = np.where(mask, p.data - upd, p.data)


def sgd_step(params: dict[str, Tensor], lr: float, masks: Optional[dict[str, np.ndarray]] = None) -> None:
    """``w <- w - lr * grad`` on masked entries only."""
    for k, p in params.items():
        if p.grad is None:
            continue
        mask = None if masks is None else masks.get(k)
        if masks is not None and mask is None:
            continue
        new = p.data - p.dtype.type(lr) * p.grad
        p.data = new if mask is None else np.where(mask, new, p.data)
