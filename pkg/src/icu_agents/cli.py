"""Command-line entry point: ``icu-agents {run,ablate,report,synth,consensus}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .core import BUILTIN_TASKS, HarnessError, TaskSpec
from .ingest import generate_synthetic_cohort, load_cohort, write_cohort
from .metrics import ScoredSample, consensus_stats
from .protocols import DebateTrace
from .report import FORMATS, RENDERERS, ReportRow, emit_report
from .runner import DEFAULT_ABLATION_SETS, ExperimentConfig, load_run, run_ablation_sweep, run_experiment

# CLI flag dest -> config key
FLAG_KEYS = {
    "task": "task_id",
    "protocol": "protocol",
    "strategy": "strategy",
    "modalities": "modalities",
    "serialization": "serialization_mode",
    "backend_url": "backend_url",
    "mock_script": "mock_script",
    "model": "model_id",
    "auth_env": "auth_token_env",
    "seed": "seed",
    "workers": "worker_count",
    "cache_dir": "cache_dir",
    "out": "output_dir",
    "max_samples": "max_samples",
    "bins": "n_bins",
    "bootstrap_n": "bootstrap_n",
}


def _experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML file of config keys; flags override it")
    p.add_argument("--cohort", required=True, help="cohort JSONL file")
    p.add_argument("--task")
    p.add_argument("--protocol")
    p.add_argument("--strategy")
    p.add_argument("--modalities", help="comma list, e.g. ps,ehr,cxr,rr")
    p.add_argument("--serialization", choices=["log", "summary", "delta"])
    p.add_argument("--backend-url")
    p.add_argument("--mock-script")
    p.add_argument("--model")
    p.add_argument("--auth-env", help="environment variable holding the bearer token")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--cache-dir")
    p.add_argument("--out")
    p.add_argument("--max-samples", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--bootstrap-n", type=int)


def config_from_args(args) -> ExperimentConfig:
    overrides = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if getattr(args, dest, None) is not None}
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig.from_dict(overrides)


def _row(manifest, report) -> ReportRow:
    cfg = manifest.config
    return ReportRow(cfg["model_id"], cfg["protocol"], cfg["strategy"], tuple(cfg["modalities"]), report)


def cmd_run(args) -> int:
    config = config_from_args(args)
    result = run_experiment(config, load_cohort(args.cohort))
    for fmt in FORMATS:
        emit_report([_row(result.manifest, result.report)], fmt, result.output_dir / "report")
    m = result.manifest
    print(f"records: {len(result.records)} ({m.error_records} errors, {m.resumed_records} resumed)")
    print(f"gateway calls: {m.gateway_calls}, cache hits: {m.cache_hits}")
    print(RENDERERS["markdown"]([_row(m, result.report)]), end="")
    return 0


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    sets = [s for s in args.sets.split(";") if s.strip()] if args.sets else DEFAULT_ABLATION_SETS
    rows = run_ablation_sweep(base, sets, load_cohort(args.cohort))
    table = [ReportRow(r.backbone, f"{r.arch} {r.protocol}", r.strategy, r.modalities, r.report) for r in rows]
    for fmt in FORMATS:
        emit_report(table, fmt, Path(base.output_dir) / "ablation")
    print(RENDERERS["markdown"](table), end="")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        manifest, report, _ = load_run(run_dir)
        rows.append(_row(manifest, report))
    if args.out:
        print(emit_report(rows, args.format, args.out))
    else:
        print(RENDERERS[args.format](rows), end="")
    return 0


def cmd_synth(args) -> int:
    tasks = []
    for tid in args.tasks.split(","):
        tasks.append(BUILTIN_TASKS.get(tid) or TaskSpec(tid, tid, f"a positive {tid} outcome"))
    cohort, oracle = generate_synthetic_cohort(args.n, args.seed, tasks)
    path = write_cohort(cohort, args.out)
    oracle_path = Path(args.oracle_out) if args.oracle_out else path.with_suffix(".oracle.json")
    oracle_path.write_text(json.dumps({k: dict(v) for k, v in oracle.true_risk.items()}, sort_keys=True, indent=1),
                           encoding="utf-8")
    print(f"wrote {len(cohort)} encounters to {path} and hidden risks to {oracle_path}")
    return 0


def cmd_consensus(args) -> int:
    manifest, _, records = load_run(args.run)
    traces, samples = [], []
    cohort = load_cohort(args.cohort).by_id() if args.cohort else None
    for rec in records:
        if "debate" not in rec.extra:
            continue
        traces.append(DebateTrace.from_dict(rec.extra["debate"]))
        if cohort is not None and rec.parse_status != "error":
            samples.append(ScoredSample(rec.probability, cohort[rec.encounter_id].labels[rec.task_id]))
    if not traces:
        print(f"{args.run} holds no debate traces", file=sys.stderr)
        return 1
    stats = consensus_stats(traces, samples)
    if args.format == "structured":
        print(json.dumps(stats.to_dict(), indent=2))
        return 0
    print("| Round | Count | Percent |")
    print("|---|---|---|")
    for r, count, pct in stats.rows:
        print(f"| {r} | {count} | {pct:.1f}% |")
    if stats.auroc is not None:
        print(f"\nAUROC: {stats.auroc:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icu-agents", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment over the test split")
    _experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="modality ablation sweep, single-agent vs majority vote")
    _experiment_flags(p)
    p.add_argument("--sets", help='semicolon-separated modality sets, e.g. "ps;ps,cxr;ps,cxr,rr"')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="tabulate finished runs")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--format", choices=FORMATS, default="markdown")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic cohort with hidden risks")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", default="mortality,los")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("consensus", help="per-round consensus table from a debate run")
    p.add_argument("run", help="run output directory")
    p.add_argument("--cohort", help="cohort file, for AUROC over final probabilities")
    p.add_argument("--format", choices=["markdown", "structured"], default="markdown")
    p.set_defaults(func=cmd_consensus)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
