"""Command-line entry points for the diagnosis pipeline.

Subcommands:

    build-matrices   derive transition/diagnosis matrices from a cohort
    ingest-corpus    embed a document corpus into a vector store
    predict          run inference for a cohort or a single patient
    evaluate         score a persisted run against held-out visits
    serve            start the HTTP service for the web console
    report-usage     print a run's token accounting

Data locations come from the config file's "paths" object; every path is
resolved relative to the config file itself, and flags override.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import api
from ._kernels import KERNEL_IMPL
from .ehr import (
    build_diagnosis_matrix,
    build_transition_matrix,
    load_cohort,
    load_diagnosis_matrix,
    load_registry,
    load_transition_matrix,
    save_diagnosis_matrix,
    save_transition_matrix,
)
from .knowledge import HashEmbedder, VectorStore
from .pipeline import (
    ConfigError,
    PipelineContext,
    PipelineError,
    RunConfig,
    evaluate_run_dir,
    load_run_config,
    predict_single,
    run_inference,
)

logger = logging.getLogger(__name__)

TRANSITION_FILENAME = "transition.json"
DIAGNOSIS_FILENAME = "diagnosis.json"


def _resolve(base: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given (flag or config paths entry required)")
    return path


def _load_config(args) -> tuple[RunConfig, dict[str, Optional[Path]]]:
    config, raw_paths = load_run_config(args.config)
    base = Path(args.config).resolve().parent
    paths = {key: _resolve(base, value) for key, value in raw_paths.items()}
    overrides = {}
    if getattr(args, "disable_knowledge", False):
        overrides["disable_knowledge"] = True
    if getattr(args, "disable_causal", False):
        overrides["disable_causal"] = True
    if overrides:
        config = config.with_overrides(**overrides)
    for flag in ("registry", "cohort", "matrices_dir", "store_dir", "runs_dir"):
        value = getattr(args, flag.replace("-", "_"), None)
        if value:
            paths[flag] = Path(value)
    return config, paths


def _load_context(config: RunConfig, paths: dict) -> PipelineContext:
    registry = load_registry(_require(paths.get("registry"), "registry path"))
    matrices_dir = _require(paths.get("matrices_dir"), "matrices directory")
    at = load_transition_matrix(matrices_dir / TRANSITION_FILENAME)
    ad = load_diagnosis_matrix(matrices_dir / DIAGNOSIS_FILENAME)
    store = None
    embedder = None
    if not config.disable_knowledge:
        store_dir = _require(paths.get("store_dir"), "store directory")
        store = VectorStore.load(store_dir)
        embedder = HashEmbedder(seed=config.seed)
    return PipelineContext(
        registry=registry, at=at, ad=ad, store=store, embedder=embedder
    )


def cmd_build_matrices(args) -> int:
    registry = load_registry(args.registry)
    cohort = load_cohort(args.cohort, registry)
    at = build_transition_matrix(cohort)
    ad = build_diagnosis_matrix(cohort)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_transition_matrix(at, out_dir / TRANSITION_FILENAME)
    save_diagnosis_matrix(ad, out_dir / DIAGNOSIS_FILENAME)
    print(
        f"built matrices for {len(cohort.patients)} patients x "
        f"{len(registry.codes)} codes (kernel: {KERNEL_IMPL})"
    )
    print(f"wrote {out_dir / TRANSITION_FILENAME}")
    print(f"wrote {out_dir / DIAGNOSIS_FILENAME}")
    return 0


def cmd_ingest_corpus(args) -> int:
    embedder = HashEmbedder(seed=args.seed)
    store = VectorStore.ingest(
        args.corpus,
        embedder,
        args.store_dir,
        description=args.description,
        source=args.source,
    )
    print(f"ingested {store.metadata.doc_count} documents into {args.store_dir}")
    return 0


def cmd_predict(args) -> int:
    config, paths = _load_config(args)
    context = _load_context(config, paths)
    cohort = load_cohort(
        _require(paths.get("cohort") or paths.get("cohort_test"), "cohort path"),
        context.registry,
    )
    if args.patient:
        artifact = predict_single(args.patient, args.comment, cohort, context, config)
        if not artifact.succeeded:
            print(f"prediction failed at stage {artifact.stage}: {artifact.error}")
            return 1
        print(json.dumps(artifact.to_record(), sort_keys=True, indent=2))
        return 0
    runs_dir = paths.get("runs_dir")
    artifacts = run_inference(
        cohort, context, config, comment=args.comment, out_dir=runs_dir
    )
    for artifact in artifacts.patients:
        if artifact.succeeded:
            print(f"{artifact.patient_id}: {', '.join(artifact.prediction.codes) or '(none)'}")
        else:
            print(f"{artifact.patient_id}: FAILED at {artifact.stage} ({artifact.error})")
    totals = artifacts.usage_totals
    print(
        f"run {artifacts.run_id}: {len(artifacts.patients)} patients, "
        f"{artifacts.failure_count()} failures, "
        f"{totals.input_tokens}+{totals.output_tokens} tokens, "
        f"cost {totals.estimated_cost:.7f}"
    )
    if artifacts.run_dir is not None:
        print(f"artifacts: {artifacts.run_dir}")
    return 1 if artifacts.failure_count() else 0


def cmd_evaluate(args) -> int:
    registry = load_registry(args.registry)
    cohort = load_cohort(args.cohort, registry)
    ks = tuple(int(k) for k in args.k)
    report = evaluate_run_dir(args.run_dir, cohort, ks=ks)
    print(f"patients evaluated: {report.patient_count}")
    print(f"w-F1: {report.w_f1:.6f}")
    for k in sorted(report.recall_at):
        print(f"R@{k}: {report.recall_at[k]:.6f}")
    print(f"metrics written to {Path(args.run_dir) / 'metrics.json'}")
    return 0


def cmd_serve(args) -> int:
    config, paths = _load_config(args)
    context = _load_context(config, paths)
    cohort = load_cohort(
        _require(paths.get("cohort") or paths.get("cohort_test"), "cohort path"),
        context.registry,
    )
    app = api.create_app(
        cohort, context, config, runs_dir=paths.get("runs_dir")
    )
    print(f"serving on http://{args.host}:{args.port} (provider: {config.provider})")
    api.serve(app, host=args.host, port=args.port)
    return 0


def cmd_report_usage(args) -> int:
    usage_path = Path(args.run_dir) / "usage.json"
    if not usage_path.is_file():
        print(f"no usage record at {usage_path}", file=sys.stderr)
        return 1
    payload = json.loads(usage_path.read_text(encoding="utf-8"))
    totals = payload.get("totals", {})
    print(f"run: {payload.get('run_id')}")
    print(f"calls: {payload.get('call_count')}")
    print(f"input tokens: {totals.get('input_tokens')}")
    print(f"output tokens: {totals.get('output_tokens')}")
    print(f"estimated cost: {totals.get('estimated_cost')}")
    print(
        f"rates per 1K tokens: in {payload.get('rate_in_per_1k')}, "
        f"out {payload.get('rate_out_per_1k')}"
    )
    failures = payload.get("patient_failures", 0)
    if failures:
        print(f"patient failures: {failures}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causaldx", description="agentic diagnosis prediction pipeline"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-matrices", help="derive matrices from a training cohort")
    p.add_argument("--registry", required=True, help="registry JSONL path")
    p.add_argument("--cohort", required=True, help="training cohort JSONL path")
    p.add_argument("--out-dir", required=True, help="directory for matrix files")
    p.set_defaults(func=cmd_build_matrices)

    p = sub.add_parser("ingest-corpus", help="embed documents into a vector store")
    p.add_argument("--corpus", required=True, help="corpus JSONL path")
    p.add_argument("--store-dir", required=True, help="output store directory")
    p.add_argument("--seed", type=int, default=0, help="embedder seed")
    p.add_argument("--description", default="disease knowledge corpus")
    p.add_argument("--source", default="local corpus file")
    p.set_defaults(func=cmd_ingest_corpus)

    p = sub.add_parser("predict", help="run inference for a cohort or one patient")
    p.add_argument("--config", required=True, help="run config JSON path")
    p.add_argument("--cohort", help="override the config's cohort path")
    p.add_argument("--comment", default=None, help="clinician comment")
    p.add_argument("--patient", help="single patient id (no persistence)")
    p.add_argument("--disable-knowledge", action="store_true")
    p.add_argument("--disable-causal", action="store_true")
    p.add_argument("--registry", help="override registry path")
    p.add_argument("--matrices-dir", dest="matrices_dir", help="override matrices dir")
    p.add_argument("--store-dir", dest="store_dir", help="override store dir")
    p.add_argument("--runs-dir", dest="runs_dir", help="override runs dir")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a persisted run directory")
    p.add_argument("--run-dir", required=True, help="run directory to score")
    p.add_argument("--cohort", required=True, help="test cohort JSONL path")
    p.add_argument("--registry", required=True, help="registry JSONL path")
    p.add_argument("--k", nargs="+", default=["10", "20"], help="recall cutoffs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--config", required=True, help="run config JSON path")
    p.add_argument("--cohort", help="override the config's cohort path")
    p.add_argument("--registry", help="override registry path")
    p.add_argument("--matrices-dir", dest="matrices_dir", help="override matrices dir")
    p.add_argument("--store-dir", dest="store_dir", help="override store dir")
    p.add_argument("--runs-dir", dest="runs_dir", help="override runs dir")
    p.add_argument("--disable-knowledge", action="store_true")
    p.add_argument("--disable-causal", action="store_true")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8077)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report-usage", help="print a run's token accounting")
    p.add_argument("--run-dir", required=True, help="run directory")
    p.set_defaults(func=cmd_report_usage)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
