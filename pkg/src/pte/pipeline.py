"""Resumable prune / distil / expand / fine-tune pipeline with baselines and sweeps.

Every stage reads its inputs from ``out_dir``, writes a checkpoint and a JSON
report, and records a manifest keyed on the config and input digests. A rerun
skips stages whose manifest still matches, so a killed run resumes where it
stopped and produces the same bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import baselines as B
from . import checkpoint as ckpt
from .data import Corpus, DomainSpec, Vocab, batches, generate_domain, read_corpus, write_corpus
from .distill import KDConfig, run_kd_phase
from .errors import ConfigError, InvariantViolation, PipelineError
from .importance import ImportanceReport, magnitude_importance, taylor_importance
from .metrics import bleu
from .partition import (FREE, GENERAL, AllocationPolicy, Granularity, ParamPartition, build_partition, expand,
                        general_digest, trainable_masks)
from .training import TrainConfig, token_accuracy, train, translate, validation_loss
from .transformer import ModelConfig, TransformerModel

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-general", "score", "prune", "distill", "expand", "finetune", "evaluate")
BASELINES = ("ft", "mol", "ewc", "random", "selective")
DEFAULT_RATIO = {Granularity.WEIGHT: 0.30, Granularity.NEURON: 0.10}


def _train_cfg(d: dict) -> TrainConfig:
    return TrainConfig(**d)


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    general: DomainSpec = DomainSpec("general", "remap", (4, 38), (4, 10), 1.0, 1, noise=0.1)
    domains: list[DomainSpec] = field(
        default_factory=lambda: [DomainSpec("in1", "remap", (38, 72), (4, 10), 1.0, 2, noise=0.1)])
    general_sizes: tuple[int, int, int] = (2500, 500, 500)     # train / valid / test
    domain_sizes: tuple[int, int, int] = (1000, 250, 500)
    prune_mode: str = "weight"
    prune_ratio: Optional[float] = None                        # None: 0.30 weight, 0.10 neuron
    expand_init: str = "auto"
    general_train: TrainConfig = TrainConfig(steps=1500, batch_size=32, lr=1e-3, warmup=200, decay="linear",
                                             eval_every=250)
    kd: KDConfig = KDConfig()
    finetune: TrainConfig = TrainConfig(steps=1200, batch_size=32, lr=B.FINETUNE_LR, eval_every=200)
    beam_size: int = 4
    score_sentences: int = 50000
    fisher_samples: int = 1000
    mol_alpha: float = 1.0
    ewc_alpha: float = 1.0
    eval_sentences: Optional[int] = None                       # cap on test sentences decoded per domain
    seed: int = 0

    def __post_init__(self):
        if self.prune_mode not in ("weight", "neuron"):
            raise ConfigError(f"prune_mode must be weight or neuron, not {self.prune_mode!r}")
        r = self.ratio
        if not 0.0 < r < 1.0:
            raise ConfigError("prune ratio must be in (0, 1)")
        if not self.domains:
            raise ConfigError("at least one in-domain spec is required")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        names = [self.general.name] + [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError("domain names must be unique")
        for spec in [self.general, *self.domains]:
            if spec.vocab[1] > min(self.model.src_vocab, self.model.tgt_vocab):
                raise ConfigError(f"domain {spec.name} uses ids beyond the model vocabulary")
            if spec.length[1] + 1 > self.model.max_len:
                raise ConfigError(f"domain {spec.name} sentences exceed model max_len")

    @property
    def granularity(self) -> Granularity:
        return Granularity(self.prune_mode)

    @property
    def ratio(self) -> float:
        return DEFAULT_RATIO[self.granularity] if self.prune_ratio is None else self.prune_ratio

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "general": self.general.to_dict(),
            "domains": [d.to_dict() for d in self.domains],
            "general_sizes": list(self.general_sizes),
            "domain_sizes": list(self.domain_sizes),
            "prune_mode": self.prune_mode,
            "prune_ratio": self.ratio,
            "expand_init": self.expand_init,
            "general_train": self.general_train.to_dict(),
            "kd": self.kd.to_dict(),
            "finetune": self.finetune.to_dict(),
            "beam_size": self.beam_size,
            "score_sentences": self.score_sentences,
            "fisher_samples": self.fisher_samples,
            "mol_alpha": self.mol_alpha,
            "ewc_alpha": self.ewc_alpha,
            "eval_sentences": self.eval_sentences,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        base = cls().to_dict()
        merged = {**base, **d}
        try:
            return cls(
                model=ModelConfig.from_dict({**base["model"], **merged["model"]}),
                general=DomainSpec.from_dict(merged["general"]),
                domains=[DomainSpec.from_dict(x) for x in merged["domains"]],
                general_sizes=tuple(merged["general_sizes"]),
                domain_sizes=tuple(merged["domain_sizes"]),
                prune_mode=merged["prune_mode"],
                prune_ratio=d.get("prune_ratio"),
                expand_init=merged["expand_init"],
                general_train=_train_cfg({**base["general_train"], **merged["general_train"]}),
                kd=KDConfig.from_dict({**base["kd"], **merged["kd"]}),
                finetune=_train_cfg({**base["finetune"], **merged["finetune"]}),
                beam_size=merged["beam_size"],
                score_sentences=merged["score_sentences"],
                fisher_samples=merged["fisher_samples"],
                mol_alpha=merged["mol_alpha"],
                ewc_alpha=merged["ewc_alpha"],
                eval_sentences=merged["eval_sentences"],
                seed=merged["seed"],
            )
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config: {exc}") from exc

    def save(self, path: str) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def toy_config(**overrides) -> PipelineConfig:
    """Desk-scale settings: the toy model adapts with a larger fine-tuning rate than the default."""
    base = dict(
        finetune=TrainConfig(steps=1200, batch_size=32, lr=1e-3, eval_every=200),
        kd=KDConfig(steps=600, lr=1e-4, eval_every=50, patience=5),
    )
    base.update(overrides)
    return PipelineConfig(**base)


# -- file helpers ----------------------------------------------------------------

def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class Workspace:
    """Paths inside ``out_dir`` and cached corpus loading."""

    def __init__(self, out_dir: str, cfg: PipelineConfig):
        self.root = out_dir
        self.cfg = cfg
        self._corpora: dict[tuple[str, str], Corpus] = {}

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def ckpt(self, name: str) -> str:
        return self.path("checkpoints", f"{name}.pte")

    def report(self, name: str) -> str:
        return self.path("reports", f"{name}.json")

    def corpus_prefix(self, domain: str, split: str) -> str:
        return self.path("data", f"{domain}.{split}")

    def vocab(self) -> Vocab:
        return Vocab.load(self.path("data", "vocab.txt"))

    def corpus(self, domain: str, split: str) -> Corpus:
        key = (domain, split)
        if key not in self._corpora:
            prefix = self.corpus_prefix(domain, split)
            if not os.path.exists(prefix + ".src"):
                raise PipelineError(f"missing corpus {prefix}.src; run gen-data first")
            self._corpora[key] = read_corpus(prefix, self.vocab(), domain, self.cfg.model.max_len)
        return self._corpora[key]

    def test_corpus(self, domain: str) -> Corpus:
        c = self.corpus(domain, "test")
        n = self.cfg.eval_sentences
        return c if n is None or n >= len(c) else c.subset(range(n))

    def load(self, name: str) -> ckpt.Checkpoint:
        path = self.ckpt(name)
        if not os.path.exists(path):
            raise PipelineError(f"missing input checkpoint {name}; run the stage that produces it")
        return ckpt.load(path)


# -- manifest / resume -----------------------------------------------------------

def _inputs_digest(ws: Workspace, inputs: Sequence[str]) -> dict:
    out = {}
    for rel in inputs:
        p = ws.path(rel)
        if not os.path.exists(p):
            raise PipelineError(f"missing stage input {rel}")
        out[rel] = ckpt.file_digest(p)
    return out


def _run_cached(ws: Workspace, stage: str, inputs: Sequence[str], outputs: Sequence[str],
                fn: Callable[[], dict], force: bool = False) -> dict:
    key = _sha({"stage": stage, "config": ws.cfg.to_dict(), "inputs": _inputs_digest(ws, inputs)})
    manifest = ws.path("manifest", f"{stage}.json")
    if not force and os.path.exists(manifest):
        m = _read_json(manifest)
        if m["key"] == key and all(os.path.exists(ws.path(o)) and ckpt.file_digest(ws.path(o)) == d
                                   for o, d in m["outputs"].items()):
            log.info("stage %s up to date", stage)
            return _read_json(ws.report(stage))
    log.info("running stage %s", stage)
    report = fn()
    _write_json(ws.report(stage), report)
    outs = {o: ckpt.file_digest(ws.path(o)) for o in [*outputs, os.path.relpath(ws.report(stage), ws.root)]}
    _write_json(manifest, {"key": key, "outputs": outs})
    return report


# -- evaluation helpers ------------------------------------------------------------

def _eval(ws: Workspace, model: TransformerModel, domain: str, view=None, with_bleu: bool = True) -> dict:
    test = ws.test_corpus(domain)
    out = {
        "acc": round(token_accuracy(model, test, view), 6),
        "loss": round(validation_loss(model, test, view), 6),
    }
    if with_bleu:
        out["bleu"] = round(bleu(translate(model, test, view, ws.cfg.beam_size), test.targets), 4)
    return out


def _seed(cfg: PipelineConfig, offset: int) -> int:
    return cfg.seed * 1000 + offset


def _domain_ids(cfg: PipelineConfig) -> list[tuple[int, DomainSpec]]:
    return list(enumerate(cfg.domains, start=1))


def _policy(cfg: PipelineConfig) -> AllocationPolicy:
    return AllocationPolicy(n_domains=len(cfg.domains), init=cfg.expand_init, seed=_seed(cfg, 7))


# -- stages --------------------------------------------------------------------------

def stage_gen_data(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    files = ["data/vocab.txt"]
    for spec in [cfg.general, *cfg.domains]:
        files += [f"data/{spec.name}.{s}.{ext}" for s in ("train", "valid", "test") for ext in ("src", "tgt")]

    def run():
        vocab = Vocab.synthetic(min(cfg.model.src_vocab, cfg.model.tgt_vocab))
        os.makedirs(ws.path("data"), exist_ok=True)
        vocab.save(ws.path("data", "vocab.txt"))
        sizes = {}
        for spec, split in [(cfg.general, cfg.general_sizes)] + [(d, cfg.domain_sizes) for d in cfg.domains]:
            spec = dataclasses.replace(spec, seed=spec.seed + 7919 * cfg.seed)
            corpus = generate_domain(spec, sum(split))
            for name, part in zip(("train", "valid", "test"), corpus.split(list(split))):
                write_corpus(ws.corpus_prefix(spec.name, name), part, vocab)
            sizes[spec.name] = list(split)
        return {"stage": "gen-data", "sizes": sizes, "vocab_size": len(vocab)}

    return _run_cached(ws, "gen-data", [], files, run, force)


def stage_train_general(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    g = cfg.general.name
    inputs = [f"data/{g}.train.src", f"data/{g}.train.tgt", f"data/{g}.valid.src", f"data/{g}.valid.tgt"]

    def run():
        model = TransformerModel(cfg.model, seed=_seed(cfg, 1))
        valid = ws.corpus(g, "valid")
        tcfg = dataclasses.replace(cfg.general_train, seed=_seed(cfg, 2))
        tlog = train(model, ws.corpus(g, "train"), tcfg, eval_fn=lambda: validation_loss(model, valid))
        ckpt.save(ws.ckpt("general"), model, meta={"stage": "train-general"})
        return {"stage": "train-general", "n_params": model.n_params, "best_step": tlog.best_step,
                "valid_loss": round(tlog.best_eval, 6), "evals": [[s, round(v, 6)] for s, v in tlog.evals],
                "general": _eval(ws, model, g, with_bleu=False)}

    return _run_cached(ws, "train-general", inputs, ["checkpoints/general.pte"], run, force)


def stage_score(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    g = cfg.general.name

    def run():
        model = ws.load("general").model
        if cfg.granularity is Granularity.NEURON:
            train_c = ws.corpus(g, "train")
            sample = train_c.subset(range(min(len(train_c), cfg.score_sentences)))
            report = taylor_importance(model, batches(sample, 32))
        else:
            report = magnitude_importance(model)
        report.save(ws.path("importance.json"))
        return {"stage": "score", "criterion": report.criterion, "n_examples": report.n_examples,
                "n_scored": int(sum(s.size for s in report.scores.values()))}

    return _run_cached(ws, "score", ["checkpoints/general.pte"], ["importance.json"], run, force)


def _count_report(model: TransformerModel, part: ParamPartition) -> dict:
    counts = part.counts(include_excluded=True)
    return {"total": model.n_params, **counts}


def stage_prune(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    g = cfg.general.name

    def run():
        model = ws.load("general").model
        report = ImportanceReport.load(ws.path("importance.json"))
        part = build_partition(model, report, cfg.ratio, cfg.granularity)
        ckpt.save(ws.ckpt("pruned"), model, part, {"stage": "prune"})
        valid = ws.corpus(g, "valid")
        return {"stage": "prune", "ratio": cfg.ratio, "granularity": cfg.granularity.value,
                "counts": _count_report(model, part),
                "valid_loss_general_model": round(validation_loss(model, valid), 6),
                "valid_loss_pruned": round(validation_loss(model, valid, part.general_view()), 6)}

    return _run_cached(ws, "prune", ["checkpoints/general.pte", "importance.json"], ["checkpoints/pruned.pte"],
                       run, force)


def _kd_corpus(ws: Workspace) -> Corpus:
    cfg = ws.cfg
    if cfg.kd.source == "general":
        return ws.corpus(cfg.general.name, "train")
    pairs = []
    for _, spec in _domain_ids(cfg):
        pairs += ws.corpus(spec.name, "train").pairs
    return Corpus(pairs, "in_domain", cfg.model.src_vocab, cfg.model.max_len)


def distil(teacher: TransformerModel, pruned: TransformerModel, part: ParamPartition, kd_data: Corpus,
           valid: Corpus, kd: KDConfig) -> tuple[TransformerModel, dict]:
    student = pruned.copy()
    before = validation_loss(student, valid, part.general_view())
    klog = run_kd_phase(teacher, student, part, kd_data, kd, valid)
    after = validation_loss(student, valid, part.general_view())
    return student, {"valid_loss_before": round(before, 6), "valid_loss_after": round(after, 6),
                     "best_step": klog.best_step, "evals": [[s, round(v, 6)] for s, v in klog.evals]}


def stage_distill(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg

    def run():
        teacher = ws.load("general").model
        c = ws.load("pruned")
        kd = dataclasses.replace(cfg.kd, seed=_seed(cfg, 3))
        student, info = distil(teacher, c.model, c.partition, _kd_corpus(ws), ws.corpus(cfg.general.name, "valid"),
                               kd)
        digest = general_digest(student, c.partition)
        ckpt.save(ws.ckpt("distilled"), student, c.partition, {"stage": "distill", "general_digest": digest})
        return {"stage": "distill", "kd": cfg.kd.to_dict(), "general_digest": digest, **info}

    return _run_cached(ws, "distill", ["checkpoints/general.pte", "checkpoints/pruned.pte"] +
                       [f"data/{s.name}.train.src" for s in cfg.domains], ["checkpoints/distilled.pte"], run, force)


def _prev_for_expand(k: int) -> str:
    return "distilled" if k == 1 else f"finetuned-{k - 1}"


def stage_expand(ws: Workspace, k: int = 1, force: bool = False) -> dict:
    cfg = ws.cfg
    src = _prev_for_expand(k)

    def run():
        c = ws.load(src)
        part = expand(c.partition, k, _policy(cfg), model=c.model)
        digest = general_digest(c.model, part)
        if digest != c.meta.get("general_digest"):
            raise InvariantViolation(f"GENERAL block changed while expanding domain {k}")
        ckpt.save(ws.ckpt(f"expanded-{k}"), c.model, part, {"stage": "expand", "domain": k, "general_digest": digest})
        return {"stage": "expand", "domain": k, "init": _policy(cfg).resolved_init(part.granularity),
                "counts": _count_report(c.model, part), "general_digest": digest}

    return _run_cached(ws, f"expand-{k}", [f"checkpoints/{src}.pte"], [f"checkpoints/expanded-{k}.pte"], run, force)


def stage_finetune(ws: Workspace, k: int = 1, force: bool = False) -> dict:
    cfg = ws.cfg
    spec = cfg.domains[k - 1]

    def run():
        c = ws.load(f"expanded-{k}")
        model, part = c.model, c.partition
        view = part.domain_view(k)
        valid = ws.corpus(spec.name, "valid")
        tcfg = dataclasses.replace(cfg.finetune, seed=_seed(cfg, 10 + k))
        tlog = train(model, ws.corpus(spec.name, "train"), tcfg, masks=trainable_masks(part, {k}), view=view,
                     eval_fn=lambda: validation_loss(model, valid, view))
        digest = general_digest(model, part)
        if digest != c.meta["general_digest"]:
            raise InvariantViolation(f"GENERAL block changed while fine-tuning domain {k}")
        ckpt.save(ws.ckpt(f"finetuned-{k}"), model, part, {"stage": "finetune", "domain": k, "general_digest": digest})
        return {"stage": "finetune", "domain": k, "best_step": tlog.best_step, "general_digest": digest,
                "valid_loss": round(tlog.best_eval, 6)}

    return _run_cached(ws, f"finetune-{k}", [f"checkpoints/expanded-{k}.pte"], [f"checkpoints/finetuned-{k}.pte"],
                       run, force)


# -- baselines ---------------------------------------------------------------------

def _ft_cfg(cfg: PipelineConfig, offset: int) -> TrainConfig:
    return dataclasses.replace(cfg.finetune, seed=_seed(cfg, offset))


def _valid_loss_fn(ws: Workspace, k: int, view=None) -> Callable[[TransformerModel], float]:
    """Early-stopping criterion for adapting to domain ``k``: its validation loss."""
    valid = ws.corpus(ws.cfg.domains[k - 1].name, "valid")
    return lambda m: validation_loss(m, valid, view)


def _adapt_all(ws: Workspace, model: TransformerModel, adapt: Callable) -> TransformerModel:
    """Apply ``adapt(model, corpus, k)`` for each in-domain corpus in turn."""
    for k, spec in _domain_ids(ws.cfg):
        model = adapt(model, ws.corpus(spec.name, "train"), k)
    return model


def stage_baseline(ws: Workspace, name: str, force: bool = False) -> dict:
    cfg = ws.cfg
    if name not in BASELINES:
        raise ConfigError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
    inputs = ["checkpoints/general.pte"] + (["importance.json"] if name in ("selective",) else [])

    def run():
        general = ws.load("general").model
        gname = cfg.general.name
        extra: dict = {}
        part = None
        if name == "ft":
            model = _adapt_all(ws, general, lambda m, c, k: B.finetune(m, c, _ft_cfg(cfg, 20 + k), eval_fn=_valid_loss_fn(ws, k))[0])
        elif name == "mol":
            model = _adapt_all(ws, general, lambda m, c, k: B.mol_finetune(m, c, cfg.mol_alpha, _ft_cfg(cfg, 30 + k),
                                                                            _valid_loss_fn(ws, k))[0])
        elif name == "ewc":
            fisher = B.estimate_fisher(general, ws.corpus(gname, "train").pairs, cfg.fisher_samples)
            model = _adapt_all(ws, general, lambda m, c, k: B.ewc_finetune(m, c, fisher, cfg.ewc_alpha,
                                                                            _ft_cfg(cfg, 40 + k),
                                                                            _valid_loss_fn(ws, k))[0])
        elif name == "selective":
            report = ImportanceReport.load(ws.path("importance.json"))
            model, part, _ = B.ablation_selective_ft(general, report, cfg.ratio,
                                                     ws.corpus(cfg.domains[0].name, "train"), _ft_cfg(cfg, 50),
                                                     _valid_loss_fn(ws, 1))
        else:
            model, part, extra = random_pte(ws, general)
        ckpt.save(ws.ckpt(f"baseline-{name}"), model, part, {"stage": f"baseline-{name}"})
        return {"stage": f"baseline-{name}", **extra}

    return _run_cached(ws, f"baseline-{name}", inputs, [f"checkpoints/baseline-{name}.pte"], run, force)


def random_pte(ws: Workspace, general: TransformerModel) -> tuple[TransformerModel, ParamPartition, dict]:
    """The full prune / distil / expand / fine-tune chain with a random partition (single in-domain)."""
    cfg = ws.cfg
    valid = ws.corpus(cfg.general.name, "valid")
    part = B.ablation_random_partition(general, cfg.ratio, seed=_seed(cfg, 60), granularity=cfg.granularity)
    kd = dataclasses.replace(cfg.kd, seed=_seed(cfg, 61))
    student, info = distil(general, general, part, _kd_corpus(ws), valid, kd)
    model, part = adapt_domain(ws, student, part, 1, _ft_cfg(cfg, 62))
    return model, part, {"valid_loss_pruned": info["valid_loss_before"], "valid_loss_distilled": info["valid_loss_after"]}


def adapt_domain(ws: Workspace, model: TransformerModel, part: ParamPartition, k: int,
                 tcfg: TrainConfig) -> tuple[TransformerModel, ParamPartition]:
    """Expand for domain ``k`` and fine-tune only its entries (in-memory, no checkpoints)."""
    model = model.copy()
    part = expand(part, k, _policy(ws.cfg), model=model)
    view = part.domain_view(k)
    spec = ws.cfg.domains[k - 1]
    eval_fn = _valid_loss_fn(ws, k, view)
    train(model, ws.corpus(spec.name, "train"), tcfg, masks=trainable_masks(part, {k}), view=view,
          eval_fn=lambda: eval_fn(model))
    return model, part


# -- evaluation / reports ---------------------------------------------------------------

def _row(system: str, n_params: int, gen: dict, ins: dict) -> dict:
    return {"system": system, "params": n_params, "gen": gen, "in": ins,
            "avg_bleu": round((gen["bleu"] + ins["bleu"]) / 2, 4)}


def stage_evaluate(ws: Workspace, force: bool = False) -> dict:
    cfg = ws.cfg
    m = len(cfg.domains)
    baseline_ckpts = [b for b in BASELINES if os.path.exists(ws.ckpt(f"baseline-{b}"))]
    inputs = ["checkpoints/general.pte", "checkpoints/distilled.pte", f"checkpoints/finetuned-{m}.pte"] + \
        [f"checkpoints/baseline-{b}.pte" for b in baseline_ckpts]

    def run():
        g = cfg.general.name
        first = cfg.domains[0].name
        general = ws.load("general").model
        distilled = ws.load("distilled")
        final = ws.load(f"finetuned-{m}")
        digests = {"distill": general_digest(distilled.model, distilled.partition)}
        for k in range(1, m + 1):
            for stage, name in ((f"expand-{k}", f"expanded-{k}"), (f"finetune-{k}", f"finetuned-{k}")):
                c = final if name == f"finetuned-{m}" else ws.load(name)
                digests[stage] = general_digest(c.model, c.partition)
        if len(set(digests.values()) | {distilled.meta["general_digest"]}) != 1:
            raise InvariantViolation("GENERAL digest differs between checkpoints")
        kd_hyps = translate(distilled.model, ws.test_corpus(g), distilled.partition.general_view(), cfg.beam_size)
        final_hyps = translate(final.model, ws.test_corpus(g), final.partition.general_view(), cfg.beam_size)
        identical = sum(a == b for a, b in zip(kd_hyps, final_hyps)) / len(kd_hyps)
        if identical != 1.0:
            raise InvariantViolation("general-view decodes changed after fine-tuning")

        total = general.n_params
        counts = final.partition.counts(include_excluded=True)
        general_size = counts["GENERAL"]
        rows = [_row("General model", total, _eval(ws, general, g), _eval(ws, general, first))]
        gview = distilled.partition.general_view()
        rows.append(_row("Pruned + KD", general_size, _eval(ws, distilled.model, g, gview),
                         _eval(ws, distilled.model, first, gview)))
        names = {"ft": "Fine-tuning", "mol": "MOL", "ewc": "EWC", "random": "Random pruning",
                 "selective": "Selective FT"}
        for b in baseline_ckpts:
            c = ws.load(f"baseline-{b}")
            if b == "random":
                rows.append(_row(names[b], total, _eval(ws, c.model, g, c.partition.general_view()),
                                 _eval(ws, c.model, first, c.partition.domain_view(1))))
            else:
                rows.append(_row(names[b], total, _eval(ws, c.model, g), _eval(ws, c.model, first)))
        rows.append(_row("PTE", total, _eval(ws, final.model, g, final.partition.general_view()),
                         _eval(ws, final.model, first, final.partition.domain_view(1))))
        domains = {}
        for k, spec in _domain_ids(cfg):
            domains[spec.name] = {
                "general_model": _eval(ws, general, spec.name),
                "pte": _eval(ws, final.model, spec.name, final.partition.domain_view(k)),
                "params": counts.get(f"DOMAIN({k})", 0),
            }
        report = {"stage": "evaluate", "config": cfg.to_dict(), "rows": rows, "domains": domains,
                  "counts": _count_report(final.model, final.partition), "general_digests": digests,
                  "general_view_identical": identical,
                  "bleu_smoothing": "zero n-gram precisions replaced by 1e-9"}
        with open(ws.path("table.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_table(rows))
        return report

    return _run_cached(ws, "evaluate", inputs, ["table.txt"], run, force)


def format_table(rows: Sequence[dict]) -> str:
    """Aligned columns: system, #Para., Gen., In., Avg. (BLEU) plus per-token accuracies."""
    head = ["System", "#Para.", "Gen.", "In.", "Avg.", "Gen.acc", "In.acc"]
    body = [[r["system"], f"{r['params'] / 1e3:.1f}K", f"{r['gen']['bleu']:.2f}", f"{r['in']['bleu']:.2f}",
             f"{r['avg_bleu']:.2f}", f"{100 * r['gen']['acc']:.2f}", f"{100 * r['in']['acc']:.2f}"] for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
             for line in [head] + body]
    return "\n".join(lines) + "\n"


# -- drivers ---------------------------------------------------------------------------

def run_stage(name: str, ws: Workspace, force: bool = False) -> dict:
    m = len(ws.cfg.domains)
    if name == "gen-data":
        return stage_gen_data(ws, force)
    if name == "train-general":
        return stage_train_general(ws, force)
    if name == "score":
        return stage_score(ws, force)
    if name == "prune":
        return stage_prune(ws, force)
    if name == "distill":
        return stage_distill(ws, force)
    if name == "expand":
        return {f"domain-{k}": stage_expand(ws, k, force) for k in range(1, m + 1)
                if k == 1 or os.path.exists(ws.ckpt(f"finetuned-{k - 1}"))}
    if name == "finetune":
        out = {}
        for k in range(1, m + 1):
            if k > 1:
                stage_expand(ws, k, force)
            out[f"domain-{k}"] = stage_finetune(ws, k, force)
        return out
    if name == "evaluate":
        return stage_evaluate(ws, force)
    raise ConfigError(f"unknown stage {name!r}")


def run_pipeline(cfg: PipelineConfig, out_dir: str, baselines: Sequence[str] = (), force: bool = False) -> dict:
    """All stages in order (each skipped if up to date), optional baselines, then the evaluation report."""
    ws = Workspace(out_dir, cfg)
    cfg.save(ws.path("config.json"))
    for stage in STAGES[:-1]:
        run_stage(stage, ws, force)
    for b in baselines:
        stage_baseline(ws, b, force)
    return stage_evaluate(ws, force)


def multi_domain_run(cfg: PipelineConfig, out_dir: str) -> dict:
    """PTE over every configured domain in sequence; per-domain BLEU and general-view stability."""
    report = run_pipeline(cfg, out_dir)
    ws = Workspace(out_dir, cfg)
    g = ws.test_corpus(cfg.general.name)
    ref = translate(ws.load("distilled").model, g, ws.load("distilled").partition.general_view(), cfg.beam_size)
    stable = {}
    for k, spec in _domain_ids(cfg):
        c = ws.load(f"finetuned-{k}")
        stable[spec.name] = translate(c.model, g, c.partition.general_view(), cfg.beam_size) == ref
    out = {"domains": report["domains"], "general_view_unchanged": stable, "counts": report["counts"]}
    _write_json(ws.path("reports", "multi-domain.json"), out)
    return out


# -- trade-off sweeps -----------------------------------------------------------------------

SWEEP_KNOBS = ("prune_ratio", "ewc_alpha", "mol_alpha")
TREND_TOLERANCE = 1.0    # BLEU


def curve_trend(values: Sequence[float], tol: float = TREND_TOLERANCE) -> str:
    """Classify a curve as ``flat``, ``up``, ``down`` or ``none``.

    ``flat``: the whole range is within ``tol``. Otherwise the direction is the
    sign of last minus first, and it counts as a trend only if no single step
    moves against that direction by more than ``tol``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2 or v.max() - v.min() <= tol:
        return "flat"
    sign = 1.0 if v[-1] >= v[0] else -1.0
    if np.all(sign * np.diff(v) >= -tol):
        return "up" if sign > 0 else "down"
    return "none"


def tradeoff_sweep(cfg: PipelineConfig, out_dir: str, knob: str, values: Sequence[float]) -> dict:
    """One (general BLEU, in-domain BLEU) point per knob value on the first in-domain.

    Reuses the general model and importance scores of the main pipeline in ``out_dir``.
    """
    if knob not in SWEEP_KNOBS:
        raise ConfigError(f"unknown sweep knob {knob!r}; choose from {', '.join(SWEEP_KNOBS)}")
    ws = Workspace(out_dir, cfg)
    for stage in ("gen-data", "train-general", "score"):
        run_stage(stage, ws)
    general = ws.load("general").model
    g, first = cfg.general.name, cfg.domains[0].name
    points = []
    fisher = None
    if knob == "ewc_alpha":
        fisher = B.estimate_fisher(general, ws.corpus(g, "train").pairs, cfg.fisher_samples)
    for v in values:
        v = float(v)
        if knob == "prune_ratio":
            report = ImportanceReport.load(ws.path("importance.json"))
            part = build_partition(general, report, v, cfg.granularity)
            kd = dataclasses.replace(cfg.kd, seed=_seed(cfg, 3))
            student, _ = distil(general, general, part, _kd_corpus(ws), ws.corpus(g, "valid"), kd)
            model, part = adapt_domain(ws, student, part, 1, _ft_cfg(cfg, 11))
            gen, ins = _eval(ws, model, g, part.general_view()), _eval(ws, model, first, part.domain_view(1))
        else:
            if knob == "ewc_alpha":
                model, _ = B.ewc_finetune(general, ws.corpus(first, "train"), fisher, v, _ft_cfg(cfg, 21),
                                             _valid_loss_fn(ws, 1))
            else:
                model, _ = B.mol_finetune(general, ws.corpus(first, "train"), v, _ft_cfg(cfg, 21),
                                             _valid_loss_fn(ws, 1))
            gen, ins = _eval(ws, model, g), _eval(ws, model, first)
        points.append({knob: v, "gen_bleu": gen["bleu"], "in_bleu": ins["bleu"], "gen_acc": gen["acc"],
                       "in_acc": ins["acc"]})
    out = {"knob": knob, "points": points, "config": cfg.to_dict(),
           "trend": {"gen_bleu": curve_trend([p["gen_bleu"] for p in points]),
                     "in_bleu": curve_trend([p["in_bleu"] for p in points])}}
    _write_json(ws.path("reports", f"sweep-{knob}.json"), out)
    with open(ws.path("reports", f"sweep-{knob}.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"{knob}\tgen_bleu\tin_bleu\tgen_acc\tin_acc\n")
        for p in points:
            fh.write(f"{p[knob]:g}\t{p['gen_bleu']:.4f}\t{p['in_bleu']:.4f}\t{p['gen_acc']:.6f}\t{p['in_acc']:.6f}\n")
    return out
