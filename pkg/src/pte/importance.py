"""Importance scores: first-order Taylor for neurons, magnitude for weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import ConsistencyError, UsageError
from .partition import Granularity, NeuronSite, default_exclusions, sites_for
from .transformer import Batch, ModelConfig, TransformerModel, nll_loss


@dataclass
class ImportanceReport:
    """Scores keyed by tensor name (weight granularity) or neuron-site name (neuron granularity)."""

    criterion: str
    granularity: Granularity
    scores: dict[str, np.ndarray]
    n_examples: int = 0

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        for name, s in self.scores.items():
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise ConsistencyError(f"scores for {name} must be finite and non-negative")
        if self.criterion == "taylor" and self.n_examples <= 0:
            raise ConsistencyError("a Taylor report needs n_examples > 0")

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "granularity": self.granularity.value,
            "n_examples": self.n_examples,
            "scores": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in self.scores.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceReport":
        scores = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["scores"].items()}
        return cls(d["criterion"], d["granularity"], scores, d["n_examples"])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "ImportanceReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def tracked_neurons(config: ModelConfig, exclusions: Optional[Iterable[str]] = None) -> list[NeuronSite]:
    """Neuron sites scored in neuron mode, in forward order."""
    excl = default_exclusions(config, Granularity.NEURON) if exclusions is None else exclusions
    return sites_for(config, excl)


class TaylorAccumulator:
    """Running ``sum |dL/dh * h|`` per unit, over every token position, in float64."""

    def __init__(self, sites: Iterable[NeuronSite]):
        self.sums = {s.name: np.zeros(s.size) for s in sites}
        self.n_examples = 0

    def add(self, site: str, act: np.ndarray, grad: np.ndarray) -> None:
        prod = np.abs(np.asarray(grad, dtype=np.float64) * np.asarray(act, dtype=np.float64))
        self.sums[site] += prod.reshape(-1, prod.shape[-1]).sum(axis=0)

    def count(self, n: int) -> None:
        self.n_examples += n

    def report(self) -> ImportanceReport:
        if self.n_examples == 0:
            raise UsageError("Taylor importance over zero examples")
        return ImportanceReport("taylor", Granularity.NEURON,
                                {k: v / self.n_examples for k, v in self.sums.items()}, self.n_examples)


def taylor_importance(model: TransformerModel, batches: Iterable[Batch], loss_scale: float = 1.0,
                      exclusions: Optional[Iterable[str]] = None) -> ImportanceReport:
    """Mean over sentences of ``sum_positions |dL/dh * h|`` for every tracked unit.

    L is each sentence's own token-mean NLL (dropout off). Sentences in a batch
    do not interact, so summing sentence losses gives every activation its own
    sentence's gradient. Runs in float64 on a copy of the model.
    """
    sites = tracked_neurons(model.config, exclusions)
    work = model.astype(np.float64)
    acc = TaylorAccumulator(sites)
    for batch in batches:
        probes: dict[str, T.Tensor] = {}
        with T.Tape() as tape:
            loss = nll_loss(work, batch, probes=probes, reduction="sum")
            if loss_scale != 1.0:
                loss = T.scale(loss, loss_scale)
        tape.backward(loss)
        for s in sites:
            h = probes[s.name]
            acc.add(s.name, h.data, h.grad if h.grad is not None else np.zeros_like(h.data))
        acc.count(len(batch))
        work.zero_grad()
    return acc.report()


def magnitude_importance(model: TransformerModel, exclusions: Optional[Iterable[str]] = None) -> ImportanceReport:
    """``|w|`` for every entry of every non-excluded tensor; data-free."""
    excl = set(default_exclusions(model.config, Granularity.WEIGHT) if exclusions is None else exclusions)
    scores = {k: np.abs(p.data).astype(np.float64) for k, p in model.params.items() if k not in excl}
    return ImportanceReport("magnitude", Granularity.WEIGHT, scores)


def random_importance(model: TransformerModel, granularity=Granularity.WEIGHT, seed: int = 0,
                      exclusions: Optional[Iterable[str]] = None) -> ImportanceReport:
    """Uniform random scores, for the random-pruning ablation."""
    gran = Granularity(granularity)
    rng = np.random.default_rng(seed)
    excl = set(default_exclusions(model.config, gran) if exclusions is None else exclusions)
    if gran is Granularity.WEIGHT:
        scores = {k: rng.random(p.shape) for k, p in model.params.items() if k not in excl}
    else:
        scores = {s.name: rng.random(s.size) for s in sites_for(model.config, excl)}
    return ImportanceReport("random", gran, scores)
