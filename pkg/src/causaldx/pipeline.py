"""End-to-end inference runs: config, per-patient orchestration, persistence.

A run takes a test cohort plus frozen training-time assets (matrices and
an optional knowledge store), executes the candidate → knowledge →
discovery → decision chain per patient, and persists everything under a
directory content-addressed by the config hash. Per-patient failures are
recorded and the run continues; only configuration errors abort.

Persisted layout (one directory per run):

    <out_dir>/<run_id>/config.json      config snapshot
    <out_dir>/<run_id>/artifacts.jsonl  one record per patient, cohort order
    <out_dir>/<run_id>/transcript.jsonl prompts/replies grouped per patient
    <out_dir>/<run_id>/usage.json       cumulative token accounting
    <out_dir>/<run_id>/metrics.json     written by evaluate-and-save

Nothing persisted carries timestamps or other run-local entropy, so a
rerun with an identical config is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .agents import (
    DiscoveryTrace,
    Prediction,
    RuleBasedProvider,
    SynthesisOutput,
    causal_discovery,
    decision_making,
    knowledge_synthesis,
    ordered_nodes,
)
from .ehr import (
    CodeRegistry,
    Cohort,
    DiagnosisMatrix,
    TransitionMatrix,
    select_candidates,
)
from .engine import CausalDag
from .gateway import (
    ChatExchange,
    CompletionProvider,
    LlmRuntime,
    RemoteChatProvider,
    ScriptedProvider,
    TokenUsage,
    TranscriptWriter,
    UsageLedger,
    estimate_cost,
)
from .knowledge import EmbeddingProvider, HashEmbedder, VectorStore
from .metrics import MetricsReport, compute_metrics

logger = logging.getLogger(__name__)

PROVIDER_KINDS = ("rule-based", "scripted", "remote")
RUN_ID_HEX_CHARS = 16
DEFAULT_KS = (10, 20)


class PipelineError(RuntimeError):
    """Run-level failure."""


class ConfigError(PipelineError, ValueError):
    """Invalid run configuration; aborts before any patient work."""


class CoverageError(PipelineError):
    """Artifacts do not cover the cohort being evaluated."""


class UnknownPatientError(KeyError):
    """Requested patient id is not in the cohort."""


@dataclass(frozen=True)
class RunConfig:
    """Every knob that affects run output; its hash names the run."""

    epsilon: float = 0.01
    max_candidates: int = 50
    k_retrieval: int = 5
    t_max: int = 5
    alpha: float = 1.0
    temperature: float = 0.0
    provider: str = "rule-based"
    model: str = ""
    base_url: str = ""
    api_key_env: str = "LLM_API_KEY"
    script_path: str = ""
    disable_knowledge: bool = False
    disable_causal: bool = False
    rate_in_per_1k: float = 0.0003
    rate_out_per_1k: float = 0.0004
    seed: int = 0
    score_tol: float = 1e-6
    reprompt_budget: int = 3
    max_tokens: int = 4096
    attempts: int = 3
    workers: int = 1

    def __post_init__(self) -> None:
        if not (0.0 <= self.epsilon < 1.0):
            raise ConfigError(f"epsilon must be in [0, 1): {self.epsilon}")
        if self.max_candidates < 1:
            raise ConfigError(f"max_candidates must be >= 1: {self.max_candidates}")
        if self.k_retrieval < 1:
            raise ConfigError(f"k_retrieval must be >= 1: {self.k_retrieval}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1: {self.t_max}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive: {self.alpha}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0: {self.temperature}")
        if self.provider not in PROVIDER_KINDS:
            raise ConfigError(
                f"provider must be one of {PROVIDER_KINDS}: {self.provider!r}"
            )
        if self.provider == "remote" and not (self.base_url and self.model):
            raise ConfigError("remote provider requires base_url and model")
        if self.provider == "scripted" and not self.script_path:
            raise ConfigError("scripted provider requires script_path")
        if self.rate_in_per_1k < 0 or self.rate_out_per_1k < 0:
            raise ConfigError("token rates must be >= 0")
        if self.score_tol <= 0:
            raise ConfigError(f"score_tol must be positive: {self.score_tol}")
        if self.reprompt_budget < 0:
            raise ConfigError(f"reprompt_budget must be >= 0: {self.reprompt_budget}")
        if self.max_tokens < 1 or self.attempts < 1 or self.workers < 1:
            raise ConfigError("max_tokens, attempts, and workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "max_candidates": self.max_candidates,
            "k_retrieval": self.k_retrieval,
            "t_max": self.t_max,
            "alpha": self.alpha,
            "temperature": self.temperature,
            "provider": self.provider,
            "model": self.model,
            "base_url": self.base_url,
            "api_key_env": self.api_key_env,
            "script_path": self.script_path,
            "disable_knowledge": self.disable_knowledge,
            "disable_causal": self.disable_causal,
            "rate_in_per_1k": self.rate_in_per_1k,
            "rate_out_per_1k": self.rate_out_per_1k,
            "seed": self.seed,
            "score_tol": self.score_tol,
            "reprompt_budget": self.reprompt_budget,
            "max_tokens": self.max_tokens,
            "attempts": self.attempts,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in payload.items() if k in known}
        unknown = sorted(set(payload) - known - {"paths"})
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**kwargs)

    def run_id(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:RUN_ID_HEX_CHARS]

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def load_run_config(path: str | Path) -> tuple[RunConfig, dict]:
    """Read a config JSON file; returns (RunConfig, paths section).

    The optional "paths" object holds data locations (registry, cohorts,
    matrices, store, runs directory). Paths never enter the run id, so
    the same logical run hashes identically across machines.
    """
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a JSON object")
    paths = payload.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError('"paths" must be an object when present')
    return RunConfig.from_dict(payload), dict(paths)


@dataclass
class PipelineContext:
    """Immutable assets shared by every patient pipeline in a run."""

    registry: CodeRegistry
    at: TransitionMatrix
    ad: DiagnosisMatrix
    store: Optional[VectorStore] = None
    embedder: Optional[EmbeddingProvider] = None
    template_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        codes = tuple(self.registry.codes)
        if self.at.codes != codes:
            raise ConfigError("transition matrix axis does not match the registry")
        if self.ad.codes != codes:
            raise ConfigError("diagnosis matrix axis does not match the registry")


@dataclass
class PatientArtifact:
    """Everything produced for one patient, or the recorded failure."""

    patient_id: str
    history: list[str]
    candidates: list[str] = field(default_factory=list)
    synthesis: Optional[SynthesisOutput] = None
    trace: Optional[DiscoveryTrace] = None
    graph: Optional[CausalDag] = None
    prediction: Optional[Prediction] = None
    usage: TokenUsage = field(
        default_factory=lambda: TokenUsage(0, 0, 0.0)
    )
    exchanges: list[ChatExchange] = field(default_factory=list)
    error: Optional[str] = None
    stage: Optional[str] = None

    @property
    def succeeded(self) -> bool:
        return self.error is None

    def to_record(self) -> dict:
        record: dict = {
            "patient_id": self.patient_id,
            "history": list(self.history),
            "candidates": list(self.candidates),
        }
        if not self.succeeded:
            record["failure"] = {"stage": self.stage, "error": self.error}
            return record
        record["synthesis"] = self.synthesis.to_dict() if self.synthesis else None
        record["trace"] = self.trace.to_dict() if self.trace else None
        record["graph"] = self.graph.to_wire_dict() if self.graph else None
        record["prediction"] = self.prediction.to_dict() if self.prediction else None
        record["usage"] = self.usage.to_dict()
        return record


@dataclass
class RunArtifacts:
    """All per-patient outputs plus run-level accounting."""

    run_id: str
    config: RunConfig
    registry_hash: str
    patients: list[PatientArtifact]
    usage_totals: TokenUsage
    call_count: int
    run_dir: Optional[Path] = None

    def artifact_for(self, patient_id: str) -> PatientArtifact:
        for artifact in self.patients:
            if artifact.patient_id == patient_id:
                return artifact
        raise UnknownPatientError(patient_id)

    def failure_count(self) -> int:
        return sum(1 for a in self.patients if not a.succeeded)


def _sum_usage(exchanges: Sequence[ChatExchange], config: RunConfig) -> TokenUsage:
    input_tokens = sum(e.usage.input_tokens for e in exchanges)
    output_tokens = sum(e.usage.output_tokens for e in exchanges)
    return TokenUsage(
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        estimated_cost=estimate_cost(
            input_tokens, output_tokens, config.rate_in_per_1k, config.rate_out_per_1k
        ),
    )


def build_provider(config: RunConfig, context: PipelineContext) -> CompletionProvider:
    if config.provider == "rule-based":
        return RuleBasedProvider(
            registry=context.registry,
            at=context.at,
            ad=context.ad,
            alpha=config.alpha,
        )
    if config.provider == "scripted":
        with open(config.script_path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
        if not isinstance(entries, list):
            raise ConfigError("script file must hold a JSON list of replies")
        return ScriptedProvider(entries)
    return RemoteChatProvider(
        base_url=config.base_url,
        model=config.model,
        api_key_env=config.api_key_env,
    )


def build_runtime(
    config: RunConfig,
    context: PipelineContext,
    provider: Optional[CompletionProvider] = None,
) -> LlmRuntime:
    """Provider plus a fresh ledger; the transcript is assembled per patient."""
    return LlmRuntime(
        provider=provider if provider is not None else build_provider(config, context),
        ledger=UsageLedger(config.rate_in_per_1k, config.rate_out_per_1k),
        transcript=None,
        temperature=config.temperature,
        max_tokens=config.max_tokens,
        attempts=config.attempts,
    )


def run_patient(
    record,
    context: PipelineContext,
    config: RunConfig,
    runtime: LlmRuntime,
    comment: Optional[str] = None,
) -> PatientArtifact:
    """One patient through the full chain; failures become artifact records."""
    registry = context.registry
    history = sorted(record.history_codes(), key=registry.sort_key)
    artifact = PatientArtifact(patient_id=record.patient_id, history=history)
    exchanges: list[ChatExchange] = []
    stage = "candidates"
    try:
        candidates = select_candidates(
            history, context.at, epsilon=config.epsilon, max_candidates=config.max_candidates
        )
        artifact.candidates = candidates

        stage = "knowledge"
        summaries_text = ""
        if not config.disable_knowledge:
            if context.store is None or context.embedder is None:
                raise PipelineError(
                    "knowledge stage enabled but no store/embedder loaded"
                )
            synthesis = knowledge_synthesis(
                history,
                candidates,
                context.store,
                context.store.metadata,
                runtime,
                context.embedder,
                k=config.k_retrieval,
                registry=registry,
                template_dir=context.template_dir,
            )
            artifact.synthesis = synthesis
            exchanges.extend(synthesis.exchanges)
            summaries_text = synthesis.summaries_text()

        stage = "discovery"
        if config.disable_causal:
            graph = CausalDag.empty(ordered_nodes(history, candidates, registry))
        else:
            trace = causal_discovery(
                history,
                candidates,
                summaries_text,
                context.ad,
                runtime,
                registry,
                alpha=config.alpha,
                t_max=config.t_max,
                score_tol=config.score_tol,
                reprompt_budget=config.reprompt_budget,
                template_dir=context.template_dir,
            )
            artifact.trace = trace
            exchanges.extend(trace.exchanges)
            graph = trace.final_graph
        artifact.graph = graph

        stage = "decision"
        prediction = decision_making(
            history,
            candidates,
            summaries_text,
            graph,
            comment,
            runtime,
            registry,
            template_dir=context.template_dir,
        )
        artifact.prediction = prediction
        exchanges.append(prediction.exchange)
    except Exception as exc:
        logger.warning("patient %s failed at stage %s: %s", record.patient_id, stage, exc)
        partial = getattr(exc, "partial", None)
        if partial is not None:
            exchanges.extend(partial.exchanges)
        artifact.error = f"{type(exc).__name__}: {exc}"
        artifact.stage = stage
    artifact.exchanges = exchanges
    artifact.usage = _sum_usage(exchanges, config)
    return artifact


def _dump_line(payload: Mapping) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def run_inference(
    cohort: Cohort,
    context: PipelineContext,
    config: RunConfig,
    comment: Optional[str] = None,
    out_dir: Optional[str | Path] = None,
    provider: Optional[CompletionProvider] = None,
    patient_ids: Optional[Sequence[str]] = None,
) -> RunArtifacts:
    """Run the pipeline over a cohort, persisting artifacts incrementally.

    Patients execute concurrently up to ``config.workers``, but artifact
    and transcript lines land in cohort order, so identical configs give
    byte-identical run directories.
    """
    records = list(cohort.patients)
    if patient_ids is not None:
        wanted = set(patient_ids)
        known = {r.patient_id for r in records}
        missing = sorted(wanted - known)
        if missing:
            raise UnknownPatientError(missing[0])
        records = [r for r in records if r.patient_id in wanted]
    if not records:
        raise ConfigError("no patients selected for the run")

    run_id = config.run_id()
    runtime = build_runtime(config, context, provider)

    run_dir: Optional[Path] = None
    artifact_path = transcript_path = None
    if out_dir is not None:
        run_dir = Path(out_dir) / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(
            json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        artifact_path = run_dir / "artifacts.jsonl"
        transcript_path = run_dir / "transcript.jsonl"
        artifact_path.write_text("", encoding="utf-8")
        transcript_path.write_text("", encoding="utf-8")

    transcript = TranscriptWriter(transcript_path) if transcript_path else None
    artifacts: list[PatientArtifact] = []
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = [
            pool.submit(run_patient, record, context, config, runtime, comment)
            for record in records
        ]
        for future in futures:
            artifact = future.result()
            artifacts.append(artifact)
            if run_dir is not None:
                with open(artifact_path, "a", encoding="utf-8") as fh:
                    fh.write(_dump_line(artifact.to_record()) + "\n")
                transcript.append_many(artifact.exchanges)

    totals = runtime.ledger.totals()
    result = RunArtifacts(
        run_id=run_id,
        config=config,
        registry_hash=context.registry.sha256(),
        patients=artifacts,
        usage_totals=totals,
        call_count=runtime.ledger.call_count,
        run_dir=run_dir,
    )
    if run_dir is not None:
        usage_payload = {
            "run_id": run_id,
            "registry_hash": result.registry_hash,
            "call_count": result.call_count,
            "totals": totals.to_dict(),
            "rate_in_per_1k": config.rate_in_per_1k,
            "rate_out_per_1k": config.rate_out_per_1k,
            "patient_failures": result.failure_count(),
        }
        (run_dir / "usage.json").write_text(
            json.dumps(usage_payload, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return result


def predict_single(
    patient_id: str,
    comment: Optional[str],
    cohort: Cohort,
    context: PipelineContext,
    config: RunConfig,
    provider: Optional[CompletionProvider] = None,
) -> PatientArtifact:
    """One patient, no persistence; serves the CLI --patient flag and the API."""
    record = next((r for r in cohort.patients if r.patient_id == patient_id), None)
    if record is None:
        raise UnknownPatientError(patient_id)
    runtime = build_runtime(config, context, provider)
    artifact = run_patient(record, context, config, runtime, comment)
    return artifact


def evaluate(
    artifacts: RunArtifacts,
    cohort: Cohort,
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricsReport:
    """Score run artifacts against each patient's held-out final visit."""
    truth = {p.patient_id: set(p.target_codes()) for p in cohort.patients}
    predictions: dict[str, list[str]] = {}
    for artifact in artifacts.patients:
        if artifact.patient_id not in truth:
            continue
        if not artifact.succeeded or artifact.prediction is None:
            raise CoverageError(
                f"patient {artifact.patient_id!r} has no successful prediction "
                f"(stage={artifact.stage}, error={artifact.error})"
            )
        predictions[artifact.patient_id] = list(artifact.prediction.codes)
    missing = sorted(set(truth) - set(predictions))
    if missing:
        raise CoverageError(f"artifacts missing patients: {missing}")
    return compute_metrics(predictions, truth, cohort.registry, ks)


def evaluate_and_save(
    artifacts: RunArtifacts,
    cohort: Cohort,
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricsReport:
    report = evaluate(artifacts, cohort, ks)
    if artifacts.run_dir is not None:
        (artifacts.run_dir / "metrics.json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return report


def load_run_records(run_dir: str | Path) -> tuple[dict, list[dict]]:
    """Read back a persisted run: (config payload, artifact records)."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    artifact_path = run_dir / "artifacts.jsonl"
    if not config_path.is_file() or not artifact_path.is_file():
        raise PipelineError(f"not a run directory: {run_dir}")
    config_payload = json.loads(config_path.read_text(encoding="utf-8"))
    records = []
    with open(artifact_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return config_payload, records


def evaluate_run_dir(
    run_dir: str | Path,
    cohort: Cohort,
    ks: Sequence[int] = DEFAULT_KS,
    save: bool = True,
) -> MetricsReport:
    """Evaluate a persisted run directory against the cohort's final visits."""
    run_dir = Path(run_dir)
    _config_payload, records = load_run_records(run_dir)
    truth = {p.patient_id: set(p.target_codes()) for p in cohort.patients}
    predictions: dict[str, list[str]] = {}
    for record in records:
        pid = record["patient_id"]
        if pid not in truth:
            continue
        if "failure" in record or not record.get("prediction"):
            failure = record.get("failure") or {}
            raise CoverageError(
                f"patient {pid!r} has no successful prediction "
                f"(stage={failure.get('stage')}, error={failure.get('error')})"
            )
        predictions[pid] = [str(c) for c in record["prediction"]["codes"]]
    missing = sorted(set(truth) - set(predictions))
    if missing:
        raise CoverageError(f"run artifacts missing patients: {missing}")
    report = compute_metrics(predictions, truth, cohort.registry, ks)
    if save:
        (run_dir / "metrics.json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return report


def default_embedder(config: RunConfig) -> HashEmbedder:
    return HashEmbedder(seed=config.seed)
