"""The three agent procedures: knowledge synthesis, causal discovery, decision.

Each procedure renders a prompt template, sends it through a completion
provider, and post-processes the reply into typed outputs. Templates live
in an editable directory keyed by template id (the package ships defaults
in ``causaldx/templates``), so prompts can be customized without code
changes.

The rule-based provider defined here computes replies from pipeline state
passed through the request metadata channel. It exists so full end-to-end
runs work offline and deterministically; its semantics are versioned
(``RULESET_VERSION``) because snapshot tests depend on them:

- search query: the display names of history + candidate diseases, joined;
- document summary: the document's first two sentences;
- graph hypothesis: the empty graph over the given nodes;
- graph amendment: greedy: scan absent edges by (transition probability
  desc, then lexicographic) and add the first one that keeps the graph
  acyclic and strictly improves the fitted score, else repropose unchanged;
- decision: candidates in rank order, filtered by the clinician comment's
  focus keywords via an ICD-9 prefix table.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .ehr import CodeRegistry, DiagnosisMatrix, TransitionMatrix
from .engine import (
    DEFAULT_ALPHA,
    DEFAULT_REPROMPT_BUDGET,
    DEFAULT_SCORE_TOL,
    DEFAULT_T_MAX,
    CausalDag,
    FitMemory,
    enforce_acyclic,
    fit_loglikelihood,
    graph_diff,
    parse_dag,
)
from .gateway import (
    ChatExchange,
    GatewayError,
    LlmRuntime,
    Message,
    PromptTemplate,
    render_template,
)
from .knowledge import StoreMetadata, VectorStore, EmbeddingProvider, EmptyStoreError

logger = logging.getLogger(__name__)

RULESET_VERSION = 1
SUMMARY_CHAR_CAP = 1200
TRUNCATION_MARKER = " [truncated]"

TEMPLATES_DIR = Path(__file__).parent / "templates"

TEMPLATE_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "knowledge_query": frozenset({"Diagnosis history", "Candidate diseases", "Meta-data"}),
    "doc_summary": frozenset({"Document i", "Diagnosis history", "Candidate diseases"}),
    "dag_hypothesis": frozenset({"Disease names", "Summary"}),
    "dag_amendment": frozenset({"Memory"}),
    "decision": frozenset({"Summary", "DAG.json", "Clinician comment"}),
}

# focus keyword -> ICD-9 code prefixes; drives the clinician-comment filter
KIDNEY_PREFIXES = tuple(str(p) for p in range(580, 594))
HEART_PREFIXES = ("402", "404", "410", "411", "412", "413", "414", "420",
                  "421", "422", "423", "424", "425", "426", "427", "428", "429")
FOCUS_PREFIXES: dict[str, tuple[str, ...]] = {
    "kidney": KIDNEY_PREFIXES,
    "renal": KIDNEY_PREFIXES,
    "heart": HEART_PREFIXES,
    "cardiac": HEART_PREFIXES,
}

_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


class AgentError(RuntimeError):
    """An agent procedure failed beyond recovery."""


class CausalDiscoveryError(AgentError):
    """Discovery aborted mid-loop; the partial trace is preserved."""

    def __init__(self, message: str, partial: "DiscoveryTrace | None" = None):
        super().__init__(message)
        self.partial = partial


class KnowledgeSynthesisError(AgentError):
    """Synthesis aborted mid-way; completed exchanges are preserved."""

    def __init__(self, message: str, partial: "SynthesisOutput | None" = None):
        super().__init__(message)
        self.partial = partial


def load_template(template_id: str, template_dir: Optional[str | Path] = None) -> PromptTemplate:
    """Load a template body by id from ``template_dir`` (package default)."""
    if template_id not in TEMPLATE_PLACEHOLDERS:
        raise KeyError(f"unknown template id: {template_id!r}")
    directory = Path(template_dir) if template_dir is not None else TEMPLATES_DIR
    body = (directory / f"{template_id}.txt").read_text(encoding="utf-8")
    return PromptTemplate(
        template_id=template_id,
        body=body,
        required_placeholders=TEMPLATE_PLACEHOLDERS[template_id],
    )


def format_code_list(codes: Iterable[str], registry: CodeRegistry) -> str:
    """Deterministic ``code (name); ...`` listing preserving input order."""
    parts = [registry.label(code) for code in codes]
    return "; ".join(parts) if parts else "(none)"


def ordered_nodes(history: Sequence[str], candidates: Sequence[str], registry: CodeRegistry) -> list[str]:
    """History union candidates, deduplicated, in registry order."""
    merged = set(history) | set(candidates)
    return sorted(merged, key=registry.sort_key)


@dataclass
class SynthesisOutput:
    """Search query plus one summary per retrieved document."""

    search_query: str
    summaries: list[tuple[str, str]]  # (doc_id, summary text)
    exchanges: list[ChatExchange] = field(default_factory=list)

    def summaries_text(self) -> str:
        if not self.summaries:
            return ""
        return "\n".join(f"[{doc_id}] {text}" for doc_id, text in self.summaries)

    def to_dict(self) -> dict:
        return {
            "search_query": self.search_query,
            "summaries": [[doc_id, text] for doc_id, text in self.summaries],
            "exchange_count": len(self.exchanges),
        }


class StopReason(str, Enum):
    CONVERGED_GRAPH = "converged-graph"
    CONVERGED_SCORE = "converged-score"
    BUDGET = "budget"


@dataclass
class DiscoveryIteration:
    graph: CausalDag
    score: float
    exchange: ChatExchange


@dataclass
class DiscoveryTrace:
    """Every fitting iteration, the final graph, and why the loop stopped."""

    iterations: list[DiscoveryIteration]
    final_graph: CausalDag
    stop_reason: StopReason
    exchanges: list[ChatExchange] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": [
                {"graph": it.graph.to_wire_dict(), "score": it.score}
                for it in self.iterations
            ],
            "final_graph": self.final_graph.to_wire_dict(),
            "stop_reason": self.stop_reason.value,
        }


@dataclass
class Prediction:
    """Ranked predicted codes plus the free-text explanation."""

    codes: list[str]
    explanation: str
    exchange: ChatExchange
    clinician_comment_used: Optional[str] = None
    parse_fallback: bool = False
    parse_failure: bool = False

    def to_dict(self) -> dict:
        return {
            "codes": list(self.codes),
            "explanation": self.explanation,
            "clinician_comment_used": self.clinician_comment_used,
            "parse_fallback": self.parse_fallback,
            "parse_failure": self.parse_failure,
        }


def _cap_summary(text: str) -> str:
    if len(text) <= SUMMARY_CHAR_CAP:
        return text
    return text[: SUMMARY_CHAR_CAP - len(TRUNCATION_MARKER)] + TRUNCATION_MARKER


def knowledge_synthesis(
    history: Sequence[str],
    candidates: Sequence[str],
    store: VectorStore,
    metadata: Optional[StoreMetadata],
    runtime: LlmRuntime,
    embedder: EmbeddingProvider,
    k: int = 5,
    registry: Optional[CodeRegistry] = None,
    template_dir: Optional[str | Path] = None,
) -> SynthesisOutput:
    """Generate a search query, retrieve top-k, and summarize each document."""
    if k < 1:
        raise ValueError(f"k must be >= 1: {k}")
    if registry is None:
        raise ValueError("registry is required for prompt formatting")
    metadata = metadata if metadata is not None else store.metadata
    history_text = format_code_list(history, registry)
    candidates_text = format_code_list(candidates, registry)

    query_template = load_template("knowledge_query", template_dir)
    query_prompt = render_template(
        query_template,
        {
            "Diagnosis history": history_text,
            "Candidate diseases": candidates_text,
            "Meta-data": metadata.summary_text(),
        },
    )
    base_meta = {
        "history": list(history),
        "candidates": list(candidates),
        "history_names": [registry.name(c) for c in history],
        "candidate_names": [registry.name(c) for c in candidates],
    }
    search_query = ""
    exchanges: list[ChatExchange] = []
    summaries: list[tuple[str, str]] = []
    try:
        query_exchange = runtime.complete(
            [Message(role="user", text=query_prompt)],
            metadata={"template_id": "knowledge_query", **base_meta},
            template_id="knowledge_query",
        )
        search_query = query_exchange.response_text.strip()
        exchanges.append(query_exchange)

        try:
            results = store.query_topk(search_query, k, embedder)
        except EmptyStoreError:
            logger.warning("knowledge store is empty; continuing with no summaries")
            return SynthesisOutput(
                search_query=search_query, summaries=[], exchanges=exchanges
            )

        summary_template = load_template("doc_summary", template_dir)
        for result in results:
            prompt = render_template(
                summary_template,
                {
                    "Document i": result.doc.text,
                    "Diagnosis history": history_text,
                    "Candidate diseases": candidates_text,
                },
            )
            exchange = runtime.complete(
                [Message(role="user", text=prompt)],
                metadata={
                    "template_id": "doc_summary",
                    "document_text": result.doc.text,
                    "doc_id": result.doc.doc_id,
                    **base_meta,
                },
                template_id="doc_summary",
            )
            summaries.append(
                (result.doc.doc_id, _cap_summary(exchange.response_text.strip()))
            )
            exchanges.append(exchange)
    except GatewayError as exc:
        raise KnowledgeSynthesisError(
            f"synthesis aborted after {len(exchanges)} exchanges: "
            f"{type(exc).__name__}: {exc}",
            partial=SynthesisOutput(
                search_query=search_query, summaries=summaries, exchanges=exchanges
            ),
        ) from exc
    return SynthesisOutput(search_query=search_query, summaries=summaries, exchanges=exchanges)


def causal_discovery(
    history: Sequence[str],
    candidates: Sequence[str],
    summaries_text: str,
    ad: DiagnosisMatrix,
    runtime: LlmRuntime,
    registry: CodeRegistry,
    alpha: float = DEFAULT_ALPHA,
    t_max: int = DEFAULT_T_MAX,
    score_tol: float = DEFAULT_SCORE_TOL,
    reprompt_budget: int = DEFAULT_REPROMPT_BUDGET,
    template_dir: Optional[str | Path] = None,
) -> DiscoveryTrace:
    """Iterative graph fitting: hypothesis, score, amend, until converged.

    Stops when an amendment leaves the graph unchanged (converged-graph),
    when the score moves less than ``score_tol`` (converged-score), or
    after ``t_max`` amendment rounds (budget). Every iteration's graph is
    a validated DAG; a gateway failure mid-loop aborts with the partial
    trace attached.
    """
    nodes = ordered_nodes(history, candidates, registry)
    if not nodes:
        raise ValueError("history and candidates are both empty")

    exchanges: list[ChatExchange] = []
    iterations: list[DiscoveryIteration] = []

    def _propose(prompt: str, template_id: str, meta: Mapping) -> CausalDag:
        exchange = runtime.complete(
            [Message(role="user", text=prompt)],
            metadata={"template_id": template_id, **meta},
            template_id=template_id,
        )
        exchanges.append(exchange)
        return parse_dag(exchange.response_text, nodes)

    def _partial(reason: StopReason = StopReason.BUDGET) -> Optional[DiscoveryTrace]:
        if not iterations:
            return None
        return DiscoveryTrace(
            iterations=iterations,
            final_graph=iterations[-1].graph,
            stop_reason=reason,
            exchanges=exchanges,
        )

    hypo_template = load_template("dag_hypothesis", template_dir)
    hypo_meta = {
        "history": list(history),
        "candidates": list(candidates),
        "nodes": list(nodes),
    }
    hypo_prompt = render_template(
        hypo_template,
        {
            "Disease names": format_code_list(nodes, registry),
            "Summary": summaries_text or "(none)",
        },
    )

    try:
        parsed = _propose(hypo_prompt, "dag_hypothesis", hypo_meta)
        graph = enforce_acyclic(
            parsed,
            reprompt_budget=reprompt_budget,
            reprompter=lambda _g: _propose(hypo_prompt, "dag_hypothesis", hypo_meta),
        )
    except GatewayError as exc:
        raise CausalDiscoveryError(f"hypothesis generation failed: {exc}", None) from exc

    score, _ = fit_loglikelihood(graph, ad, alpha=alpha)
    iterations.append(DiscoveryIteration(graph=graph, score=score, exchange=exchanges[-1]))
    memory = FitMemory(current_graph=graph, current_score=score, iteration=0)

    amend_template = load_template("dag_amendment", template_dir)
    t = 0
    while True:
        amend_prompt = render_template(amend_template, {"Memory": memory.to_wire()})
        amend_meta = {
            **hypo_meta,
            "memory": memory.to_wire_dict(),
            "current_score_exact": memory.current_score,
            "current_graph": memory.current_graph.to_wire_dict(),
        }
        try:
            parsed = _propose(amend_prompt, "dag_amendment", amend_meta)
            next_graph = enforce_acyclic(
                parsed,
                reprompt_budget=reprompt_budget,
                reprompter=lambda _g: _propose(amend_prompt, "dag_amendment", amend_meta),
            )
        except GatewayError as exc:
            raise CausalDiscoveryError(
                f"amendment round {t + 1} failed: {exc}", _partial()
            ) from exc

        next_score, _ = fit_loglikelihood(next_graph, ad, alpha=alpha)
        iterations.append(
            DiscoveryIteration(graph=next_graph, score=next_score, exchange=exchanges[-1])
        )
        diff = graph_diff(memory.current_graph, next_graph)
        previous_score = memory.current_score
        memory = memory.advance(next_graph, next_score)
        t += 1
        if diff == 0:
            reason = StopReason.CONVERGED_GRAPH
            break
        if abs(next_score - previous_score) < score_tol:
            reason = StopReason.CONVERGED_SCORE
            break
        if t >= t_max:
            reason = StopReason.BUDGET
            break

    return DiscoveryTrace(
        iterations=iterations,
        final_graph=iterations[-1].graph,
        stop_reason=reason,
        exchanges=exchanges,
    )


def build_decision_summary(
    history: Sequence[str],
    candidates: Sequence[str],
    summaries_text: str,
    registry: CodeRegistry,
) -> str:
    """The {Summary} binding: patient context plus document summaries."""
    lines = [
        f"Diagnosis history: {format_code_list(history, registry)}",
        f"Candidate diseases: {format_code_list(candidates, registry)}",
        "Document summaries:",
        summaries_text or "(none)",
    ]
    return "\n".join(lines)


def _extract_code_list(text: str) -> Optional[list[str]]:
    """First JSON list in ``text`` whose items are all scalars, as strings."""
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        start = text.find("[", pos)
        if start < 0:
            return None
        try:
            payload, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            pos = start + 1
            continue
        if isinstance(payload, list) and all(
            isinstance(item, (str, int, float)) for item in payload
        ):
            return [str(item) for item in payload]
        pos = start + 1


def decision_making(
    history: Sequence[str],
    candidates: Sequence[str],
    summaries_text: str,
    graph: CausalDag,
    comment: Optional[str],
    runtime: LlmRuntime,
    registry: CodeRegistry,
    template_dir: Optional[str | Path] = None,
) -> Prediction:
    """Final ranked prediction plus explanation from the decision prompt.

    The reply splits on the first ``<SEP>``: a JSON code list on the left,
    an explanation on the right. Without the separator, the first JSON
    list anywhere in the reply is used and the fallback is flagged; with
    no list at all the prediction is empty and flagged as a parse failure.
    Unknown codes are dropped with a warning; duplicates keep their first
    position, and list order is the ranking.
    """
    graph.validated()
    template = load_template("decision", template_dir)
    prompt = render_template(
        template,
        {
            "Summary": build_decision_summary(history, candidates, summaries_text, registry),
            "DAG.json": graph.to_wire(),
            "Clinician comment": comment or "",
        },
    )
    exchange = runtime.complete(
        [Message(role="user", text=prompt)],
        metadata={
            "template_id": "decision",
            "history": list(history),
            "candidates": list(candidates),
            "comment": comment or "",
            "graph": graph.to_wire_dict(),
        },
        template_id="decision",
    )
    reply = exchange.response_text

    parse_fallback = False
    parse_failure = False
    if "<SEP>" in reply:
        left, right = reply.split("<SEP>", 1)
        raw_codes = _extract_code_list(left)
        explanation = right.strip()
        if raw_codes is None:
            raw_codes = _extract_code_list(reply)
            parse_fallback = True
            explanation = reply.strip()
    else:
        raw_codes = _extract_code_list(reply)
        parse_fallback = True
        explanation = reply.strip()
    if raw_codes is None:
        logger.warning("decision reply held no parseable code list")
        raw_codes = []
        parse_failure = True
        parse_fallback = False
        explanation = reply.strip()

    codes: list[str] = []
    for code in raw_codes:
        if code not in registry:
            logger.warning("dropping predicted code outside registry: %r", code)
            continue
        if code not in codes:
            codes.append(code)
    return Prediction(
        codes=codes,
        explanation=explanation,
        exchange=exchange,
        clinician_comment_used=comment if comment else None,
        parse_fallback=parse_fallback,
        parse_failure=parse_failure,
    )


def _first_sentences(text: str, count: int = 2) -> str:
    parts = _SENTENCE_SPLIT_RE.split(text.strip())
    return " ".join(parts[:count]).strip()


def focus_prefixes_for_comment(comment: str) -> tuple[str, ...]:
    """Union of code prefixes for every focus keyword in the comment."""
    lowered = comment.lower()
    prefixes: list[str] = []
    for keyword in sorted(FOCUS_PREFIXES):
        if keyword in lowered:
            for prefix in FOCUS_PREFIXES[keyword]:
                if prefix not in prefixes:
                    prefixes.append(prefix)
    return tuple(prefixes)


class RuleBasedProvider:
    """Deterministic offline stand-in computing replies from pipeline state.

    Replies are pure functions of the request metadata plus the frozen
    matrices handed to the constructor; see the module docstring for the
    per-template rules. Token counts are length estimates.
    """

    def __init__(
        self,
        registry: CodeRegistry,
        at: TransitionMatrix,
        ad: DiagnosisMatrix,
        alpha: float = DEFAULT_ALPHA,
    ):
        self.registry = registry
        self.at = at
        self.ad = ad
        self.alpha = alpha
        self.provider_id = f"rule-based:v{RULESET_VERSION}"
        self._col = {code: i for i, code in enumerate(at.codes)}

    def complete_once(self, messages, temperature, max_tokens, metadata=None):
        if not metadata or "template_id" not in metadata:
            raise ValueError("rule-based provider requires template metadata")
        template_id = metadata["template_id"]
        handler = {
            "knowledge_query": self._handle_query,
            "doc_summary": self._handle_summary,
            "dag_hypothesis": self._handle_hypothesis,
            "dag_amendment": self._handle_amendment,
            "decision": self._handle_decision,
        }.get(template_id)
        if handler is None:
            raise ValueError(f"rule-based provider cannot answer {template_id!r}")
        reply = handler(metadata)
        prompt_len = sum(len(m.text) for m in messages)
        return reply, max(1, (prompt_len + 3) // 4), max(1, (len(reply) + 3) // 4)

    def _handle_query(self, meta: Mapping) -> str:
        names = []
        for code, name in zip(
            list(meta["history"]) + list(meta["candidates"]),
            list(meta["history_names"]) + list(meta["candidate_names"]),
        ):
            label = name or code
            if label not in names:
                names.append(label)
        return ", ".join(names)

    def _handle_summary(self, meta: Mapping) -> str:
        return _first_sentences(str(meta["document_text"]), 2)

    def _handle_hypothesis(self, meta: Mapping) -> str:
        empty = CausalDag.empty(sorted(meta["nodes"]))
        return empty.to_wire()

    def _handle_amendment(self, meta: Mapping) -> str:
        current = CausalDag.from_wire_dict(meta["current_graph"])
        current_score = float(meta["current_score_exact"])
        nodes = sorted(current.nodes)
        present = current.edge_set
        absent = [
            (u, v)
            for u in nodes
            for v in nodes
            if u != v and (u, v) not in present
        ]
        absent.sort(key=lambda e: (-self._prob(e[0], e[1]), e))
        for u, v in absent:
            candidate = CausalDag(nodes=current.nodes, edges=current.edges + ((u, v),))
            if not candidate.is_acyclic():
                continue
            score, _ = fit_loglikelihood(candidate, self.ad, alpha=self.alpha)
            if score > current_score:
                return candidate.to_wire()
            break  # only the single best-ranked viable edge is considered
        return current.to_wire()

    def _handle_decision(self, meta: Mapping) -> str:
        ranked = list(meta["candidates"])
        comment = str(meta.get("comment", ""))
        prefixes = focus_prefixes_for_comment(comment)
        if prefixes:
            ranked = [c for c in ranked if any(c.startswith(p) for p in prefixes)]
            focus_note = f"restricted to focus prefixes {', '.join(prefixes)}"
        else:
            focus_note = "no focus filter"
        listed = "; ".join(self.registry.label(c) for c in ranked) or "none"
        explanation = (
            f"Candidates ranked by strongest transition evidence from the "
            f"diagnosis history; {focus_note} (ruleset v{RULESET_VERSION}). "
            f"Ranked codes: {listed}."
        )
        return json.dumps(ranked) + " <SEP> " + explanation

    def _prob(self, src: str, dst: str) -> float:
        return float(self.at.entries[self._col[src], self._col[dst]])
