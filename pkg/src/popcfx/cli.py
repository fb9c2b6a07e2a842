"""Command-line entry point: one executable, one subcommand per pipeline stage.

Flags override the JSON config; logs go to stderr and data only to files.
Exit codes: 0 success, 2 config/usage, 3 missing upstream artifact, 4 data
error, 5 provider error, 6 training error, 7 influence error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import PopcfxError
from .pipeline import (
    STAGES,
    Artifacts,
    RunManifest,
    load_config,
    run_pipeline,
    stage_evaluate,
    stage_explain,
    stage_report,
    STAGE_FUNCS,
)

log = logging.getLogger("popcfx")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="pipeline config JSON", default=None)
    parser.add_argument("--out-dir", help="run output directory", default=None)
    parser.add_argument("--log-level", default="INFO")


def _provider_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--provider", choices=["stub", "remote"], default=None)
    parser.add_argument("--endpoint", default=None)
    parser.add_argument("--model-name", default=None)
    parser.add_argument("--temperature", type=float, default=None)
    parser.add_argument("--timeout-s", type=float, default=None)
    parser.add_argument("--retries", type=int, default=None)
    parser.add_argument("--api-key-env", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popcfx",
        description="counterfactual explanations for a latent-factor recommender, "
                    "with profile-filtered variants and popularity-bias reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, k-core filter, split, popularity")
    _add_common(p)
    p.add_argument("--interactions")
    p.add_argument("--metadata")
    p.add_argument("--format", choices=["auto", "tsv", "csv"], default=None)
    p.add_argument("--k-core", type=int, default=None)
    p.add_argument("--out", help="alias for --out-dir")

    p = sub.add_parser("cohorts", help="select niche/blockbuster users")
    _add_common(p)
    p.add_argument("--top-frac", type=float, default=None)
    p.add_argument("--bottom-frac", type=float, default=None)
    p.add_argument("--max-history", type=int, default=None)
    p.add_argument("--per-group", type=int, default=None)
    p.add_argument("--out", help="alias for --out-dir")

    p = sub.add_parser("train", help="fit the recommender")
    _add_common(p)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="model checkpoint path")

    p = sub.add_parser("eval", help="sampled-negative ranking quality")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--cutoff", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="eval JSON path")

    p = sub.add_parser("filter", help="profile-based greedy history filtering")
    _add_common(p)
    p.add_argument("--model-history", help="run directory holding prepared/ data")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--min-remaining", type=int, default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="filtered JSONL path")
    _provider_flags(p)

    p = sub.add_parser("explain", help="counterfactual search per cohort user")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--method", choices=["accent", "accent_filtered"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--max-set", type=int, default=None)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--users", help="cohorts JSON path")
    p.add_argument("--filtered", help="filtered histories JSONL")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="counterfactuals JSONL path")

    p = sub.add_parser("evaluate", help="popularity-alignment reports")
    _add_common(p)
    p.add_argument("--cfs", help="counterfactuals JSONL (accent)")
    p.add_argument("--cfs-baseline", help="counterfactuals JSONL (filtered variant)")
    p.add_argument("--popularity", help="popularity TSV")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("report", help="CSV tables and figures from report JSON")
    _add_common(p)
    p.add_argument("--format", choices=["csv", "svg"], default=None)
    p.add_argument("--out", help="report directory")

    p = sub.add_parser("run", help="full pipeline")
    _add_common(p)
    p.add_argument("--stages", help="comma-separated subset of: " + ",".join(STAGES))
    p.add_argument("--workers", type=int, default=None)

    return parser


def _overrides_from_args(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if getattr(args, "out_dir", None):
        o["out_dir"] = args.out_dir
    cmd = args.command
    if cmd in ("prepare", "cohorts") and getattr(args, "out", None):
        o["out_dir"] = args.out
    if cmd == "prepare":
        put("dataset", "interactions", args.interactions)
        put("dataset", "metadata", args.metadata)
        put("dataset", "format", args.format)
        put("dataset", "k_core", args.k_core)
    elif cmd == "cohorts":
        put("cohorts", "top_frac", args.top_frac)
        put("cohorts", "bottom_frac", args.bottom_frac)
        put("cohorts", "max_history", args.max_history)
        put("cohorts", "per_group", args.per_group)
    elif cmd == "train":
        put("train", "dim", args.dim)
        put("train", "learning_rate", args.lr)
        put("train", "weight_decay", args.weight_decay)
        put("train", "epochs", args.epochs)
        put("train", "negatives_per_positive", args.negatives)
        put("train", "batch_size", args.batch_size)
        put("train", "seed", args.seed)
    elif cmd == "eval":
        put("eval", "num_negatives", args.negatives)
        put("eval", "cutoff", args.cutoff)
        put("eval", "seed", args.seed)
    elif cmd == "filter":
        put("filter", "n", args.n)
        put("filter", "min_remaining", args.min_remaining)
        if args.model_history:
            o["out_dir"] = args.model_history
        if args.cache:
            o["cache_dir"] = args.cache
        if args.workers is not None:
            o["workers"] = args.workers
    elif cmd == "explain":
        put("influence", "k", args.k)
        put("influence", "max_set", args.max_set)
        put("influence", "damping", args.damping)
        if args.workers is not None:
            o["workers"] = args.workers
    elif cmd == "evaluate":
        put("metrics", "bins", args.bins)
    elif cmd == "report":
        if args.format:
            o["report_format"] = args.format
    elif cmd == "run":
        if getattr(args, "workers", None) is not None:
            o["workers"] = args.workers
    if cmd in ("filter",) and getattr(args, "provider", None):
        put("provider", "kind", args.provider)
    if hasattr(args, "endpoint"):
        put("provider", "endpoint", args.endpoint)
        put("provider", "model_name", args.model_name)
        put("provider", "temperature", args.temperature)
        put("provider", "timeout_s", args.timeout_s)
        put("provider", "max_retries", args.retries)
        put("provider", "api_key_env", args.api_key_env)
    return o


def _run_single_stage(cfg: dict, stage: str, art: Artifacts, args) -> None:
    manifest = RunManifest(cfg["out_dir"])
    manifest.record_start(cfg)
    try:
        if stage == "explain":
            methods = (args.method,) if args.method else None
            outputs = stage_explain(cfg, art, methods=methods)
        elif stage == "evaluate":
            outputs = stage_evaluate(
                cfg, art,
                cfs_path=Path(args.cfs) if args.cfs else None,
                cfs_baseline_path=Path(args.cfs_baseline) if args.cfs_baseline else None)
        elif stage == "report":
            outputs = stage_report(cfg, art, fmt=args.format)
        else:
            outputs = STAGE_FUNCS[stage](cfg, art)
    except Exception as exc:
        manifest.record_failed(stage, f"{type(exc).__name__}: {exc}")
        raise
    if isinstance(outputs, tuple):
        outputs, counters = outputs
    else:
        counters = None
    manifest.record_complete(stage, outputs, counters)
    for path in outputs:
        log.info("wrote %s", path)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
        art = Artifacts(cfg["out_dir"])
        # explicit artifact path overrides
        if getattr(args, "out", None):
            out = Path(args.out)
            if args.command == "train":
                art.model = out
            elif args.command == "eval":
                art.eval_json = out
            elif args.command == "filter":
                art.filtered = out
            elif args.command == "explain":
                method = args.method or "accent"
                art.cfs[method] = out
            elif args.command == "evaluate":
                art.report_json = out
            elif args.command == "report":
                art.report_dir = out
        if getattr(args, "model", None):
            art.model = Path(args.model)
        if getattr(args, "users", None):
            art.cohorts = Path(args.users)
        if getattr(args, "filtered", None):
            art.filtered = Path(args.filtered)
        if getattr(args, "popularity", None):
            art.popularity = Path(args.popularity)

        if args.command == "run":
            stages = args.stages.split(",") if args.stages else None
            run_pipeline(cfg, stages)
        else:
            _run_single_stage(cfg, args.command, art, args)
    except PopcfxError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
