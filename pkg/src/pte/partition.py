"""Splitting parameters into a frozen general block and per-domain blocks.

Every parameter tensor carries an int16 label array of the same shape:
``GENERAL`` (0), ``FREE`` (-1, pruned and not yet reused) or a domain id
``k >= 1``. A :class:`MaskView` activates a set of labels; inactive entries
read as exactly zero in the forward pass.

In neuron mode the labels are kept per hidden unit and broadcast onto the
tensors that touch the unit: the incoming column, its bias entry and the
outgoing row. Units are FFN hidden units and attention value units (the
concatenated head outputs feeding the output projection).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ConsistencyError, UsageError
from .transformer import ModelConfig, TransformerModel, beam_search, is_layer_norm, param_shapes, xavier_bound

GENERAL = 0
FREE = -1


class Granularity(str, Enum):
    WEIGHT = "weight"
    NEURON = "neuron"


def label_name(label: int) -> str:
    if label == GENERAL:
        return "GENERAL"
    if label == FREE:
        return "FREE"
    return f"DOMAIN({label})"


# -- neuron sites ----------------------------------------------------------------

@dataclass(frozen=True)
class NeuronSite:
    name: str
    size: int
    tensors: tuple[tuple[str, int], ...]   # (parameter name, axis indexed by unit)


def all_neuron_sites(config: ModelConfig) -> list[NeuronSite]:
    """Every prunable activation site in forward order."""
    d, f = config.d_model, config.d_ff

    def attn(prefix):
        return NeuronSite(prefix, d, ((f"{prefix}.v.weight", 1), (f"{prefix}.v.bias", 0), (f"{prefix}.o.weight", 0)))

    def ffn(prefix):
        return NeuronSite(prefix, f, ((f"{prefix}.fc1.weight", 1), (f"{prefix}.fc1.bias", 0),
                                      (f"{prefix}.fc2.weight", 0)))

    sites = []
    for l in range(config.n_layers):
        sites += [attn(f"enc.{l}.self_attn"), ffn(f"enc.{l}.ffn")]
    for l in range(config.n_layers):
        sites += [attn(f"dec.{l}.self_attn"), attn(f"dec.{l}.cross_attn"), ffn(f"dec.{l}.ffn")]
    return sites


def default_exclusions(config: ModelConfig, granularity: Granularity) -> tuple[str, ...]:
    """Layer norms always; in neuron mode also the first encoder and last decoder layer."""
    names = list(param_shapes(config))
    out = [n for n in names if is_layer_norm(n)]
    if Granularity(granularity) is Granularity.NEURON:
        last = f"dec.{config.n_layers - 1}."
        out += [n for n in names if (n.startswith("enc.0.") or n.startswith(last)) and n not in out]
    return tuple(out)


def sites_for(config: ModelConfig, exclusions: Iterable[str]) -> list[NeuronSite]:
    excl = set(exclusions)
    return [s for s in all_neuron_sites(config) if not any(t in excl for t, _ in s.tensors)]


def _broadcast_units(units: np.ndarray, shape: tuple[int, ...], axis: int) -> np.ndarray:
    if len(shape) == 1:
        return units.copy()
    if axis == 0:
        return np.repeat(units[:, None], shape[1], axis=1)
    return np.repeat(units[None, :], shape[0], axis=0)


def _rle(a: np.ndarray) -> list[list[int]]:
    flat = a.reshape(-1)
    if flat.size == 0:
        return []
    cut = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], cut])
    ends = np.concatenate([cut, [flat.size]])
    return [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]


def _unrle(runs: list[list[int]], shape) -> np.ndarray:
    flat = np.concatenate([np.full(n, v, dtype=np.int16) for v, n in runs]) if runs else np.zeros(0, np.int16)
    return flat.reshape(shape)


# -- partition -----------------------------------------------------------------

@dataclass
class ParamPartition:
    granularity: Granularity
    labels: dict[str, np.ndarray]
    exclusions: tuple[str, ...] = ()
    units: dict[str, np.ndarray] = field(default_factory=dict)
    sites: dict[str, NeuronSite] = field(default_factory=dict)
    free_order: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ParamPartition":
        return ParamPartition(self.granularity, {k: v.copy() for k, v in self.labels.items()}, self.exclusions,
                              {k: v.copy() for k, v in self.units.items()}, dict(self.sites),
                              {k: v.copy() for k, v in self.free_order.items()})

    def refresh_labels(self) -> None:
        """Re-derive tensor labels from unit labels (neuron mode)."""
        for site in self.sites.values():
            for name, axis in site.tensors:
                self.labels[name] = _broadcast_units(self.units[site.name], self.labels[name].shape, axis)

    def domains(self) -> list[int]:
        found = set()
        for a in self.labels.values():
            found.update(int(v) for v in np.unique(a) if v > 0)
        return sorted(found)

    def counts(self, include_excluded: bool = False) -> dict[str, int]:
        """Parameter counts per label name over non-excluded tensors."""
        excl = set(self.exclusions)
        out: dict[str, int] = {}
        for name, a in self.labels.items():
            if name in excl and not include_excluded:
                continue
            vals, n = np.unique(a, return_counts=True)
            for v, c in zip(vals, n):
                out[label_name(int(v))] = out.get(label_name(int(v)), 0) + int(c)
        return out

    def view(self, active: Iterable[int]) -> "MaskView":
        return MaskView(self, frozenset(int(a) for a in active))

    def general_view(self) -> "MaskView":
        return self.view({GENERAL})

    def domain_view(self, k: int) -> "MaskView":
        return self.view({GENERAL, k})

    def to_header(self) -> dict:
        return {
            "granularity": self.granularity.value,
            "exclusions": list(self.exclusions),
            "labels": {k: _rle(v) for k, v in self.labels.items()},
            "units": {k: _rle(v) for k, v in self.units.items()},
            "free_order": {k: v.tolist() for k, v in self.free_order.items()},
        }

    @classmethod
    def from_header(cls, header: dict, config: ModelConfig) -> "ParamPartition":
        shapes = param_shapes(config)
        gran = Granularity(header["granularity"])
        labels = {k: _unrle(v, shapes[k]) for k, v in header["labels"].items()}
        site_map = {s.name: s for s in all_neuron_sites(config)}
        units = {k: _unrle(v, (site_map[k].size,)) for k, v in header["units"].items()}
        sites = {k: site_map[k] for k in units}
        order = {k: np.asarray(v, dtype=np.int64) for k, v in header["free_order"].items()}
        return cls(gran, labels, tuple(header["exclusions"]), units, sites, order)


class MaskView:
    """Read-only activation of a label set over a partition."""

    def __init__(self, partition: ParamPartition, active: frozenset[int]):
        if FREE in active:
            raise UsageError("a view may not activate FREE parameters")
        self.partition = partition
        self.active = active
        self._masks: dict[str, Optional[np.ndarray]] = {}

    def mask(self, name: str) -> Optional[np.ndarray]:
        """Boolean mask, or None if every entry is active."""
        if name not in self._masks:
            m = np.isin(self.partition.labels[name], list(self.active))
            self._masks[name] = None if m.all() else m
        return self._masks[name]

    def effective(self, params: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
        out = {}
        for name, p in params.items():
            m = self.mask(name)
            out[name] = p if m is None else T.masked(p, m)
        return out

    def union(self, other: "MaskView") -> "MaskView":
        return MaskView(self.partition, self.active | other.active)


# -- building ------------------------------------------------------------------

def _n_prune(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 1e-9))


def build_partition(model: TransformerModel, report, ratio: float, granularity=Granularity.WEIGHT,
                    exclusions: Optional[Iterable[str]] = None) -> ParamPartition:
    """Label the ``floor(ratio * n)`` least important items of each target matrix / layer FREE.

    ``report.scores`` maps tensor names (weight mode) or site names (neuron
    mode) to non-negative scores. Ties go to the lower flat index.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError("prune ratio must be in (0, 1)")
    gran = Granularity(granularity)
    cfg = model.config
    excl = tuple(default_exclusions(cfg, gran) if exclusions is None else exclusions)
    labels = {k: np.zeros(p.shape, dtype=np.int16) for k, p in model.params.items()}
    order: dict[str, np.ndarray] = {}
    units: dict[str, np.ndarray] = {}
    sites: dict[str, NeuronSite] = {}
    if gran is Granularity.WEIGHT:
        for name, p in model.params.items():
            if name in excl:
                continue
            if name not in report.scores:
                raise ConsistencyError(f"importance report does not cover {name}")
            s = np.asarray(report.scores[name])
            if s.shape != p.shape:
                raise ConsistencyError(f"score shape {s.shape} != tensor shape {p.shape} for {name}")
            ranked = np.argsort(s.reshape(-1), kind="stable")[:_n_prune(ratio, s.size)]
            labels[name].reshape(-1)[ranked] = FREE
            order[name] = ranked
    else:
        for site in sites_for(cfg, excl):
            if site.name not in report.scores:
                raise ConsistencyError(f"importance report does not cover site {site.name}")
            s = np.asarray(report.scores[site.name])
            if s.shape != (site.size,):
                raise ConsistencyError(f"site {site.name}: expected {site.size} scores, got {s.shape}")
            ranked = np.argsort(s, kind="stable")[:_n_prune(ratio, site.size)]
            u = np.zeros(site.size, dtype=np.int16)
            u[ranked] = FREE
            units[site.name] = u
            sites[site.name] = site
            order[site.name] = ranked
    part = ParamPartition(gran, labels, excl, units, sites, order)
    part.refresh_labels()
    return part


def trainable_masks(partition: ParamPartition, trainable: Iterable[int]) -> dict[str, np.ndarray]:
    """Per-tensor boolean masks of entries whose label is in ``trainable`` (empty masks omitted)."""
    keep = list(trainable)
    out = {}
    for name, a in partition.labels.items():
        m = np.isin(a, keep)
        if m.any():
            out[name] = m
    return out


def masked_sgd_step(model: TransformerModel, grads: Optional[dict[str, np.ndarray]], view: Optional[MaskView],
                    lr: float, trainable: Iterable[int], partition: Optional[ParamPartition] = None,
                    allow_general: bool = False) -> None:
    """One SGD step on entries labelled in ``trainable``; every other entry is left bit-identical."""
    trainable = set(trainable)
    if GENERAL in trainable and not allow_general:
        raise UsageError("GENERAL parameters are frozen during fine-tuning")
    part = partition if partition is not None else (view.partition if view is not None else None)
    if part is None:
        raise UsageError("masked_sgd_step needs a partition or a view")
    if view is not None and not trainable <= set(view.active) | {FREE}:
        raise UsageError("trainable labels must be active in the view")
    masks = trainable_masks(part, trainable)
    for name, mask in masks.items():
        p = model.params[name]
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        p.data = np.where(mask, p.data - p.dtype.type(lr) * g, p.data)


# -- expansion -------------------------------------------------------------------

@dataclass(frozen=True)
class AllocationPolicy:
    """``n_domains`` equal shares of the FREE pool; ``init`` one of auto/zero/uniform/zero_outgoing."""

    n_domains: int = 1
    init: str = "auto"
    scale: float = 0.01
    seed: int = 0

    def resolved_init(self, granularity: Granularity) -> str:
        if self.init != "auto":
            return self.init
        return "zero" if granularity is Granularity.WEIGHT else "zero_outgoing"


def expand(partition: ParamPartition, domain: int, policy: AllocationPolicy = AllocationPolicy(),
           model: Optional[TransformerModel] = None) -> ParamPartition:
    """Relabel domain ``domain``'s share of FREE items and (if given) re-initialise them in ``model``."""
    if domain < 1 or domain > policy.n_domains:
        raise ConfigError(f"domain {domain} outside planned 1..{policy.n_domains}")
    if policy.init not in ("auto", "zero", "uniform", "zero_outgoing"):
        raise ConfigError(f"unknown init policy {policy.init!r}")
    new = partition.copy()
    neuron = new.granularity is Granularity.NEURON
    claimed: dict[str, np.ndarray] = {}
    for group, ranked in new.free_order.items():
        share = np.array_split(ranked, policy.n_domains)[domain - 1]
        target = new.units[group] if neuron else new.labels[group].reshape(-1)
        share = share[target[share] == FREE]
        if share.size:
            target[share] = domain
            claimed[group] = share
    if not claimed:
        raise CapacityError(f"no FREE capacity left for domain {domain}")
    if neuron:
        new.refresh_labels()
    if model is not None:
        _reinit(model, new, claimed, policy)
    return new


def _reinit(model: TransformerModel, part: ParamPartition, claimed: dict[str, np.ndarray],
            policy: AllocationPolicy) -> None:
    rng = np.random.default_rng(policy.seed)
    init = policy.resolved_init(part.granularity)
    for group in sorted(claimed):
        idx = claimed[group]
        if part.granularity is Granularity.WEIGHT:
            p = model.params[group]
            flat = p.data.reshape(-1).copy()
            flat[idx] = 0.0 if init == "zero" else rng.uniform(-policy.scale, policy.scale, idx.size)
            p.data = flat.reshape(p.shape)
            continue
        for name, axis in part.sites[group].tensors:
            p = model.params[name]
            data = p.data.copy()
            sl = (idx,) if p.ndim == 1 else ((idx, slice(None)) if axis == 0 else (slice(None), idx))
            shape = data[sl].shape
            incoming = p.ndim == 2 and axis == 1
            if init == "uniform" or (init == "zero_outgoing" and incoming):
                bound = policy.scale if init == "uniform" else xavier_bound(p.shape)
                data[sl] = rng.uniform(-bound, bound, size=shape)
            else:
                data[sl] = 0.0
            p.data = data.astype(p.dtype)


# -- views on models -------------------------------------------------------------

def materialize(model: TransformerModel, view: MaskView) -> TransformerModel:
    """Copy of ``model`` with inactive entries physically set to zero."""
    out = model.copy()
    for name, p in out.params.items():
        m = view.mask(name)
        if m is not None:
            p.data = np.where(m, p.data, p.dtype.type(0))
    return out


def shrink(model: TransformerModel, view: MaskView) -> TransformerModel:
    """Physically smaller model with inactive neurons deleted (neuron mode)."""
    part = view.partition
    if part.granularity is not Granularity.NEURON:
        raise UsageError("shrink needs a neuron-mode partition")
    state = model.state()
    splits = dict(model.value_splits)
    dh = model.config.d_head
    for site in part.sites.values():
        keep = np.isin(part.units[site.name], list(view.active))
        for name, axis in site.tensors:
            state[name] = np.compress(keep, state[name], axis=axis)
        if site.name.endswith("attn"):
            splits[site.name] = tuple(int(keep[h * dh:(h + 1) * dh].sum()) for h in range(model.config.n_heads))
    return TransformerModel(model.config, state, value_splits=splits)


@dataclass
class AdoptedModel:
    """A model seen through a view: forward, loss and decoding use the view."""

    model: TransformerModel
    view: Optional[MaskView]

    def forward(self, src, tgt_in):
        return self.model.forward(src, tgt_in, view=self.view)

    def decode(self, srcs, beam_size: int = 4, max_len: Optional[int] = None):
        return beam_search(self.model, srcs, beam_size, max_len, self.view)

    def materialize(self) -> TransformerModel:
        return self.model.copy() if self.view is None else materialize(self.model, self.view)


def adopt_view(model: TransformerModel, view: Optional[MaskView]) -> AdoptedModel:
    return AdoptedModel(model, view)


def general_digest(model: TransformerModel, partition: ParamPartition) -> str:
    """SHA-256 over the names, positions and values of every GENERAL-labelled entry."""
    h = hashlib.sha256()
    for name, p in model.params.items():
        sel = partition.labels[name] == GENERAL
        h.update(name.encode())
        h.update(np.packbits(sel).tobytes())
        h.update(np.ascontiguousarray(p.data[sel]).tobytes())
    return h.hexdigest()
