"""Command-line entry point: ``python -m pte <subcommand>``.

Exit codes: 0 success, 2 invariant violation, 3 config error, 1 any other
package error. Numpy is imported only after ``--threads`` has set the BLAS
thread variables.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from .errors import ConfigError, InvariantViolation, PTEError

STAGE_COMMANDS = ("gen-data", "train-general", "score", "prune", "distill", "expand", "finetune", "evaluate")
BASELINE_NAMES = ("ft", "mol", "ewc", "random", "selective")
SWEEP_DEFAULTS = {
    "prune_ratio": "0.1,0.2,0.3,0.4,0.5",
    "ewc_alpha": "0.25,0.5,1,2.5",
    "mol_alpha": "0.25,0.5,1,2.5",
}
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _common(suppress: bool) -> argparse.ArgumentParser:
    """Global flags; accepted before or after the subcommand (``suppress`` keeps the first value)."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="JSON config file; missing keys take their defaults")
    common.add_argument("--preset", choices=("default", "toy"), default=d("default"),
                        help="base settings before --config is applied (toy: faster fine-tuning rate)")
    common.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    common.add_argument("--out-dir", default=d("runs/default"), help="workspace directory (default: runs/default)")
    common.add_argument("--threads", type=int, default=d(None), help="BLAS thread count")
    common.add_argument("--force", action="store_true", default=d(False), help="rerun stages even if up to date")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    p = argparse.ArgumentParser(prog="pte", description="Prune, distil, expand and fine-tune a toy translation model.",
                                parents=[_common(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    pl = sub.add_parser("pipeline", parents=[common], help="run every stage, optional baselines, then evaluate")
    pl.add_argument("--baselines", default="", help=f"comma-separated subset of {','.join(BASELINE_NAMES)}")
    b = sub.add_parser("baseline", parents=[common], help="train one comparison system")
    b.add_argument("name", choices=BASELINE_NAMES)
    sw = sub.add_parser("sweep", parents=[common], help="trade-off curve over one knob")
    sw.add_argument("--knob", choices=tuple(SWEEP_DEFAULTS), default="prune_ratio")
    sw.add_argument("--values", help="comma-separated knob values (default depends on the knob)")
    sub.add_parser("multi-domain", parents=[common], help="adapt to every configured domain in turn")
    sub.add_parser("show-config", parents=[common], help="print the fully resolved config")
    return p


def _load_config(args):
    from . import pipeline as P

    base = P.toy_config() if args.preset == "toy" else P.PipelineConfig()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError("config file must hold a JSON object")
        merged = base.to_dict()
        for k, v in overrides.items():
            merged[k] = {**merged[k], **v} if isinstance(v, dict) and isinstance(merged.get(k), dict) else v
        cfg = P.PipelineConfig.from_dict(merged)
    else:
        cfg = base
    return cfg if args.seed is None else cfg.with_seed(args.seed)


def _parse_values(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values {text!r}") from exc


def run(args) -> dict:
    from . import pipeline as P

    cfg = _load_config(args)
    if args.command == "show-config":
        return cfg.to_dict()
    ws = P.Workspace(args.out_dir, cfg)
    cfg.save(ws.path("config.json"))
    if args.command in STAGE_COMMANDS:
        return P.run_stage(args.command, ws, args.force)
    if args.command == "pipeline":
        names = [b for b in args.baselines.split(",") if b]
        unknown = set(names) - set(BASELINE_NAMES)
        if unknown:
            raise ConfigError(f"unknown baselines: {sorted(unknown)}")
        report = P.run_pipeline(cfg, args.out_dir, names, args.force)
        return {"table": P.format_table(report["rows"]), "counts": report["counts"]}
    if args.command == "baseline":
        return P.stage_baseline(ws, args.name, args.force)
    if args.command == "sweep":
        values = _parse_values(args.values or SWEEP_DEFAULTS[args.knob])
        return P.tradeoff_sweep(cfg, args.out_dir, args.knob, values)
    if args.command == "multi-domain":
        return P.multi_domain_run(cfg, args.out_dir)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 3
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        out = run(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except PTEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if "table" in out:
        print(out["table"], end="")
    else:
        print(json.dumps(out, indent=1, sort_keys=True))
    return 0
