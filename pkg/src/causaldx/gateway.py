"""Prompt templating, chat-completion providers, retries, and token accounting.

Three provider families implement one small interface:

- ``RemoteChatProvider``: any OpenAI-compatible ``/chat/completions``
  endpoint, API key read from an environment variable;
- ``ScriptedProvider``: a queue of canned replies for snapshot tests;
- rule-based providers (defined alongside the agent procedures) that
  compute replies from pipeline state for offline end-to-end runs.

``complete`` wraps any provider with capped-exponential-backoff retries on
transient transport failures, records the exchange in a cumulative usage
ledger, and appends it to a line-delimited transcript for audit. With a
scripted provider and fixed inputs the whole transcript is reproducible
byte for byte, so persisted records carry no wall-clock fields.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import requests

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 4096
DEFAULT_ATTEMPTS = 3
DEFAULT_BACKOFF_SECONDS = 0.5
MAX_BACKOFF_SECONDS = 8.0
DEFAULT_MAX_INFLIGHT = 4

_PLACEHOLDER_RE = re.compile(r"\{([^{}]+)\}")


class GatewayError(RuntimeError):
    """Base class for completion-path failures."""


class TransportError(GatewayError):
    """Transient transport failure; retried up to the attempt budget."""


class ProviderRefusalError(GatewayError):
    """The provider answered but declined to produce content."""


class ContextLengthExceededError(GatewayError):
    """Input too long for the model; callers may shrink and retry."""


class ScriptExhaustedError(GatewayError):
    """A scripted provider ran out of queued replies."""


class MissingPlaceholderError(KeyError):
    """Template rendering lacked bindings for required placeholders."""

    def __init__(self, names: Sequence[str]):
        super().__init__(", ".join(names))
        self.names = list(names)


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt body with ``{Name}`` placeholders."""

    template_id: str
    body: str
    required_placeholders: frozenset[str]

    def __post_init__(self) -> None:
        present = set(_PLACEHOLDER_RE.findall(self.body))
        missing = sorted(self.required_placeholders - present)
        if missing:
            raise ValueError(
                f"template {self.template_id!r} body lacks declared "
                f"placeholders: {missing}"
            )


def render_template(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Replace each placeholder with its binding verbatim.

    Substitution is single-pass, so braces inside bound values (JSON
    payloads in particular) are never re-expanded. Extra bindings are
    ignored; missing required ones raise, listing every absent name.
    """
    missing = sorted(n for n in template.required_placeholders if n not in bindings)
    if missing:
        raise MissingPlaceholderError(missing)

    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name in bindings:
            return str(bindings[name])
        if name in template.required_placeholders:  # unreachable after check
            raise MissingPlaceholderError([name])
        return match.group(0)

    return _PLACEHOLDER_RE.sub(_sub, template.body)


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int
    output_tokens: int
    estimated_cost: float

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "estimated_cost": self.estimated_cost,
        }


def estimate_cost(
    input_tokens: int,
    output_tokens: int,
    rate_in_per_1k: float,
    rate_out_per_1k: float,
) -> float:
    """Cost under per-1,000-token rates."""
    return input_tokens * rate_in_per_1k / 1000.0 + output_tokens * rate_out_per_1k / 1000.0


@dataclass(frozen=True)
class Message:
    role: str
    text: str

    def to_dict(self) -> dict:
        return {"role": self.role, "text": self.text}


@dataclass(frozen=True)
class ChatExchange:
    """One completed request/response round trip."""

    request: tuple[Message, ...]
    response_text: str
    usage: TokenUsage
    provider_id: str
    temperature: float
    template_id: str = ""

    def to_dict(self) -> dict:
        return {
            "request": [m.to_dict() for m in self.request],
            "response_text": self.response_text,
            "usage": self.usage.to_dict(),
            "provider_id": self.provider_id,
            "temperature": self.temperature,
            "template_id": self.template_id,
        }


class UsageLedger:
    """Thread-safe cumulative token/cost accounting at configured rates."""

    def __init__(self, rate_in_per_1k: float = 0.0, rate_out_per_1k: float = 0.0):
        self.rate_in_per_1k = rate_in_per_1k
        self.rate_out_per_1k = rate_out_per_1k
        self._lock = threading.Lock()
        self._input = 0
        self._output = 0
        self._calls = 0

    def charge(self, input_tokens: int, output_tokens: int) -> TokenUsage:
        usage = TokenUsage(
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            estimated_cost=estimate_cost(
                input_tokens, output_tokens, self.rate_in_per_1k, self.rate_out_per_1k
            ),
        )
        with self._lock:
            self._input += input_tokens
            self._output += output_tokens
            self._calls += 1
        return usage

    def totals(self) -> TokenUsage:
        with self._lock:
            return TokenUsage(
                input_tokens=self._input,
                output_tokens=self._output,
                estimated_cost=estimate_cost(
                    self._input, self._output, self.rate_in_per_1k, self.rate_out_per_1k
                ),
            )

    @property
    def call_count(self) -> int:
        with self._lock:
            return self._calls


class CompletionProvider(Protocol):
    """Minimal provider surface: one synchronous completion call."""

    provider_id: str

    def complete_once(
        self,
        messages: Sequence[Message],
        temperature: float,
        max_tokens: int,
        metadata: Optional[Mapping] = None,
    ) -> tuple[str, int, int]:
        """Return (response_text, input_tokens, output_tokens)."""
        ...


def _estimate_tokens(text: str) -> int:
    # crude 4-chars-per-token heuristic, only for offline doubles
    return max(1, (len(text) + 3) // 4)


class ScriptedProvider:
    """Replays a fixed queue of replies; raises once the queue is empty.

    Entries are either plain strings (token counts estimated from text
    length) or ``{"text", "input_tokens", "output_tokens"}`` dicts.
    """

    provider_id = "scripted"

    def __init__(self, replies: Iterable[str | dict]):
        self._replies = list(replies)
        self._cursor = 0
        self._lock = threading.Lock()

    def complete_once(self, messages, temperature, max_tokens, metadata=None):
        with self._lock:
            if self._cursor >= len(self._replies):
                raise ScriptExhaustedError(
                    f"script exhausted after {self._cursor} replies"
                )
            entry = self._replies[self._cursor]
            self._cursor += 1
        if isinstance(entry, str):
            prompt_chars = sum(len(m.text) for m in messages)
            return entry, _estimate_tokens("x" * prompt_chars), _estimate_tokens(entry)
        return (
            str(entry["text"]),
            int(entry.get("input_tokens", 0)),
            int(entry.get("output_tokens", 0)),
        )

    @property
    def remaining(self) -> int:
        with self._lock:
            return len(self._replies) - self._cursor


class RemoteChatProvider:
    """OpenAI-compatible chat-completions endpoint over HTTP."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout_seconds: float = 120.0,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_seconds = timeout_seconds
        self.provider_id = f"remote:{model}"
        self._session = session or requests.Session()

    def complete_once(self, messages, temperature, max_tokens, metadata=None):
        api_key = os.environ.get(self.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.text} for m in messages],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions",
                headers=headers,
                json=payload,
                timeout=self.timeout_seconds,
            )
        except requests.RequestException as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        if resp.status_code in (429,) or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            body = resp.text
            if "context_length" in body or "maximum context" in body:
                raise ContextLengthExceededError(body[:500])
            raise GatewayError(f"HTTP {resp.status_code}: {body[:500]}")
        data = resp.json()
        choice = data["choices"][0]
        if choice.get("finish_reason") == "content_filter":
            raise ProviderRefusalError("provider filtered the completion")
        content = choice.get("message", {}).get("content")
        if content is None:
            raise ProviderRefusalError("provider returned no content")
        usage = data.get("usage", {})
        return (
            content,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )


class TranscriptWriter:
    """Append-only line-delimited exchange log; safe for concurrent writers."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._seq = 0

    def append(self, exchange: ChatExchange) -> None:
        record = {"seq": self._next_seq(), **exchange.to_dict()}
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def append_many(self, exchanges: Iterable[ChatExchange]) -> None:
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                for exchange in exchanges:
                    record = {"seq": self._seq, **exchange.to_dict()}
                    self._seq += 1
                    fh.write(
                        json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"
                    )

    def _next_seq(self) -> int:
        with self._lock:
            seq = self._seq
            self._seq += 1
            return seq


def retry_call(fn, attempts: int = DEFAULT_ATTEMPTS, base_delay: float = DEFAULT_BACKOFF_SECONDS):
    """Run ``fn`` retrying TransportError with capped exponential backoff."""
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            return fn()
        except TransportError as exc:
            last = exc
            if attempt + 1 >= attempts:
                break
            delay = min(base_delay * (2**attempt), MAX_BACKOFF_SECONDS)
            logger.warning(
                "transient failure (attempt %d/%d), retrying in %.1fs: %s",
                attempt + 1,
                attempts,
                delay,
                exc,
            )
            time.sleep(delay)
    assert last is not None
    raise last


@dataclass
class LlmRuntime:
    """A provider bundled with accounting, transcript, and call parameters."""

    provider: CompletionProvider
    ledger: UsageLedger
    transcript: Optional[TranscriptWriter] = None
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    attempts: int = DEFAULT_ATTEMPTS
    max_inflight: int = DEFAULT_MAX_INFLIGHT
    _gate: threading.Semaphore = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._gate = threading.Semaphore(self.max_inflight)

    def complete(
        self,
        messages: Sequence[Message],
        metadata: Optional[Mapping] = None,
        template_id: str = "",
    ) -> ChatExchange:
        return complete(
            self.provider,
            messages,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            metadata=metadata,
            template_id=template_id,
            ledger=self.ledger,
            transcript=self.transcript,
            attempts=self.attempts,
            gate=self._gate,
        )


def complete(
    provider: CompletionProvider,
    messages: Sequence[Message],
    *,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    metadata: Optional[Mapping] = None,
    template_id: str = "",
    ledger: Optional[UsageLedger] = None,
    transcript: Optional[TranscriptWriter] = None,
    attempts: int = DEFAULT_ATTEMPTS,
    gate: Optional[threading.Semaphore] = None,
) -> ChatExchange:
    """One completion call with retries, accounting, and transcript logging."""
    if not messages:
        raise ValueError("request must hold at least one message")

    def _call():
        if gate is not None:
            with gate:
                return provider.complete_once(messages, temperature, max_tokens, metadata)
        return provider.complete_once(messages, temperature, max_tokens, metadata)

    text, input_tokens, output_tokens = retry_call(_call, attempts=attempts)
    ledger = ledger if ledger is not None else UsageLedger()
    usage = ledger.charge(input_tokens, output_tokens)
    exchange = ChatExchange(
        request=tuple(messages),
        response_text=text,
        usage=usage,
        provider_id=provider.provider_id,
        temperature=temperature,
        template_id=template_id,
    )
    if transcript is not None:
        transcript.append(exchange)
    return exchange
