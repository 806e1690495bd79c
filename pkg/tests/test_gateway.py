from __future__ import annotations

import json
import threading

import pytest

from causaldx.gateway import (
    ChatExchange,
    ContextLengthExceededError,
    LlmRuntime,
    Message,
    MissingPlaceholderError,
    PromptTemplate,
    ProviderRefusalError,
    ScriptExhaustedError,
    ScriptedProvider,
    TokenUsage,
    TranscriptWriter,
    TransportError,
    UsageLedger,
    complete,
    estimate_cost,
    render_template,
    retry_call,
)


def make_template(body, required=()):
    return PromptTemplate(
        template_id="t", body=body, required_placeholders=frozenset(required)
    )


class TestTemplates:
    def test_values_inserted_verbatim(self):
        tpl = make_template("History: {Diagnosis history}.", ["Diagnosis history"])
        out = render_template(tpl, {"Diagnosis history": "A (x); B {raw}"})
        assert out == "History: A (x); B {raw}."

    def test_missing_placeholder_lists_names(self):
        tpl = make_template("{A} and {B}", ["A", "B"])
        with pytest.raises(MissingPlaceholderError) as err:
            render_template(tpl, {"A": "1"})
        assert "B" in str(err.value)

    def test_extra_bindings_ignored(self):
        tpl = make_template("{A}", ["A"])
        assert render_template(tpl, {"A": "1", "Z": "nope"}) == "1"

    def test_template_requires_declared_placeholders_present(self):
        with pytest.raises(ValueError):
            make_template("no slots here", ["Missing"])


class TestCostAccounting:
    def test_per_thousand_rates(self):
        assert estimate_cost(1000, 0, 0.5, 0.9) == 0.5
        assert estimate_cost(0, 2000, 0.5, 0.9) == pytest.approx(1.8)

    def test_ledger_accumulates(self):
        ledger = UsageLedger(0.0003, 0.0004)
        ledger.charge(100, 50)
        ledger.charge(200, 25)
        totals = ledger.totals()
        assert totals.input_tokens == 300
        assert totals.output_tokens == 75
        assert ledger.call_count == 2

    def test_ledger_thread_safe(self):
        ledger = UsageLedger()
        threads = [
            threading.Thread(target=lambda: [ledger.charge(1, 1) for _ in range(200)])
            for _ in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert ledger.totals().input_tokens == 1600
        assert ledger.call_count == 1600

    def test_negative_tokens_rejected(self):
        with pytest.raises(ValueError):
            TokenUsage(input_tokens=-1, output_tokens=0, estimated_cost=0.0)


class TestScriptedProvider:
    def test_replays_in_order(self):
        provider = ScriptedProvider(["first", "second"])
        text1, _, _ = provider.complete_once([Message("user", "q")], 0.0, 10)
        text2, _, _ = provider.complete_once([Message("user", "q")], 0.0, 10)
        assert (text1, text2) == ("first", "second")

    def test_exhaustion_raises(self):
        provider = ScriptedProvider(["only"])
        provider.complete_once([Message("user", "q")], 0.0, 10)
        with pytest.raises(ScriptExhaustedError):
            provider.complete_once([Message("user", "q")], 0.0, 10)

    def test_dict_entries_carry_exact_tokens(self):
        provider = ScriptedProvider(
            [{"text": "hi", "input_tokens": 4871, "output_tokens": 2932}]
        )
        text, tin, tout = provider.complete_once([Message("user", "q")], 0.0, 10)
        assert (text, tin, tout) == ("hi", 4871, 2932)


class TestRetry:
    def test_retries_transport_errors(self, monkeypatch):
        monkeypatch.setattr("time.sleep", lambda _s: None)
        calls = []

        def flaky():
            calls.append(1)
            if len(calls) < 3:
                raise TransportError("try again")
            return "ok"

        assert retry_call(flaky, attempts=3) == "ok"
        assert len(calls) == 3

    def test_gives_up_after_budget(self, monkeypatch):
        monkeypatch.setattr("time.sleep", lambda _s: None)

        def always_down():
            raise TransportError("down")

        with pytest.raises(TransportError):
            retry_call(always_down, attempts=2)

    def test_refusal_not_retried(self):
        calls = []

        def refuses():
            calls.append(1)
            raise ProviderRefusalError("no")

        with pytest.raises(ProviderRefusalError):
            retry_call(refuses, attempts=3)
        assert len(calls) == 1


class FakeResponse:
    def __init__(self, status_code, payload):
        self.status_code = status_code
        self._payload = payload
        self.text = json.dumps(payload)

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self._responses = list(responses)
        self.requests = []

    def post(self, url, headers=None, json=None, timeout=None):
        self.requests.append(json)
        return self._responses.pop(0)


class TestRemoteProvider:
    def _provider(self, responses):
        from causaldx.gateway import RemoteChatProvider

        return RemoteChatProvider(
            "http://llm.test/v1", "test-model", session=FakeSession(responses)
        )

    def test_parses_reply_and_usage(self):
        provider = self._provider(
            [
                FakeResponse(
                    200,
                    {
                        "choices": [{"message": {"content": "hello"}}],
                        "usage": {"prompt_tokens": 12, "completion_tokens": 3},
                    },
                )
            ]
        )
        text, tin, tout = provider.complete_once([Message("user", "hi")], 0.0, 64)
        assert (text, tin, tout) == ("hello", 12, 3)

    def test_rate_limit_maps_to_transport_error(self):
        provider = self._provider([FakeResponse(429, {"error": "slow down"})])
        with pytest.raises(TransportError):
            provider.complete_once([Message("user", "hi")], 0.0, 64)

    def test_context_length_maps_to_dedicated_error(self):
        provider = self._provider(
            [
                FakeResponse(
                    400,
                    {"error": {"code": "context_length_exceeded", "message": "too long"}},
                )
            ]
        )
        with pytest.raises(ContextLengthExceededError):
            provider.complete_once([Message("user", "hi")], 0.0, 64)

    def test_empty_content_is_refusal(self):
        provider = self._provider(
            [
                FakeResponse(
                    200,
                    {
                        "choices": [
                            {"message": {"content": None}, "finish_reason": "content_filter"}
                        ],
                        "usage": {},
                    },
                )
            ]
        )
        with pytest.raises(ProviderRefusalError):
            provider.complete_once([Message("user", "hi")], 0.0, 64)


class TestCompleteAndTranscript:
    def test_complete_charges_and_logs(self, tmp_path):
        ledger = UsageLedger(0.0003, 0.0004)
        transcript = TranscriptWriter(tmp_path / "t.jsonl")
        provider = ScriptedProvider(
            [{"text": "reply", "input_tokens": 10, "output_tokens": 5}]
        )
        exchange = complete(
            provider,
            [Message("user", "question")],
            ledger=ledger,
            transcript=transcript,
            template_id="decision",
        )
        assert exchange.response_text == "reply"
        assert exchange.usage.input_tokens == 10
        assert ledger.totals().output_tokens == 5
        record = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
        assert record["seq"] == 0
        assert record["template_id"] == "decision"
        assert record["response_text"] == "reply"

    def test_empty_request_rejected(self):
        with pytest.raises(ValueError):
            complete(ScriptedProvider(["x"]), [])

    def test_transcript_lines_are_compact_sorted_json(self, tmp_path):
        transcript = TranscriptWriter(tmp_path / "t.jsonl")
        exchange = ChatExchange(
            request=(Message("user", "q"),),
            response_text="r",
            usage=TokenUsage(1, 1, 0.0),
            provider_id="scripted",
            temperature=0.0,
        )
        transcript.append_many([exchange, exchange])
        lines = (tmp_path / "t.jsonl").read_text().splitlines()
        assert [json.loads(l)["seq"] for l in lines] == [0, 1]
        payload = json.loads(lines[0])
        assert lines[0] == json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def test_runtime_bundles_parameters(self):
        ledger = UsageLedger()
        runtime = LlmRuntime(
            provider=ScriptedProvider(["a"]), ledger=ledger, temperature=0.0
        )
        exchange = runtime.complete([Message("user", "q")], template_id="x")
        assert exchange.template_id == "x"
        assert ledger.call_count == 1
