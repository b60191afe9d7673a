import json
import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from tandem.core import ChatMessage, TokenUsage
from tandem.llm import (
    CompletionRequest,
    HttpLM,
    JsonExtractionError,
    MockLM,
    MockScript,
    MockScriptError,
    ProtocolError,
    TransportError,
    complete_json,
    estimate_tokens,
    extract_json_block,
)

from helpers import fenced


def request_of(text: str) -> CompletionRequest:
    return CompletionRequest(messages=(ChatMessage("user", text),))


class TestEstimateTokens:
    @pytest.mark.parametrize("text,expected", [("", 0), ("abcd", 1), ("abcde", 2)])
    def test_ceil_of_quarter_length(self, text, expected):
        assert estimate_tokens(text) == expected


class TestExtractJson:
    def test_single_fence(self):
        assert extract_json_block('<think>...```json\n{"a":1}\n```') == {"a": 1}

    def test_last_of_two_fences_wins(self):
        text = (
            "first try:\n```json\n{\"a\": 1}\n```\n"
            "after more thought:\n```json\n{\"a\": 2}\n```"
        )
        assert extract_json_block(text) == {"a": 2}

    def test_brace_fallback(self):
        text = 'prefix {"decision":"provide_final_answer"} suffix'
        assert extract_json_block(text) == {"decision": "provide_final_answer"}

    def test_braces_inside_strings_are_skipped(self):
        text = 'noise {"msg": "look at {this}", "n": 1} tail'
        assert extract_json_block(text) == {"msg": "look at {this}", "n": 1}

    def test_no_candidate_carries_raw_text(self):
        with pytest.raises(JsonExtractionError) as exc_info:
            extract_json_block("plain prose, nothing structured")
        assert exc_info.value.raw == "plain prose, nothing structured"

    def test_unparseable_fence_raises(self):
        with pytest.raises(JsonExtractionError):
            extract_json_block("```json\n{not json}\n```")

    def test_reserializes_cleanly(self):
        value = extract_json_block(fenced({"k": [1, 2, {"x": None}]}))
        json.dumps(value)


class TestMockLM:
    def test_queue_mode_in_order(self):
        mock = MockLM(MockScript.queue(["hello", "world"]))
        assert mock.complete(request_of("anything")).text == "hello"
        assert mock.complete(request_of("anything")).text == "world"

    def test_queue_exhaustion_is_an_error(self):
        mock = MockLM(MockScript.queue(["only"]))
        mock.complete(request_of("x"))
        with pytest.raises(MockScriptError):
            mock.complete(request_of("x"))

    def test_pattern_dispatch(self):
        mock = MockLM(
            MockScript.patterns([("revenue", fenced({"a": 1})), (None, "fallback")])
        )
        assert mock.complete(request_of("total revenue?")).text == fenced({"a": 1})
        assert mock.complete(request_of("unrelated")).text == "fallback"

    def test_pattern_matches_last_user_message(self):
        mock = MockLM(MockScript.patterns([("second", "yes"), (None, "no")]))
        request = CompletionRequest(
            messages=(
                ChatMessage("user", "first"),
                ChatMessage("assistant", "reply"),
                ChatMessage("user", "second"),
            )
        )
        assert mock.complete(request).text == "yes"

    def test_usage_from_token_estimator(self):
        mock = MockLM(MockScript.queue(["abcd"]))
        response = mock.complete(request_of("abcdefgh"))
        assert response.usage == TokenUsage(2, 1)

    def test_determinism(self):
        script = {"mode": "pattern", "rules": [{"match": "q", "response": "r"}]}
        runs = []
        for _ in range(2):
            mock = MockLM(MockScript.from_dict(script))
            runs.append([mock.complete(request_of("q1")) for _ in range(3)])
        assert runs[0] == runs[1]

    def test_queue_thread_safety_each_response_once(self):
        responses = [str(i) for i in range(64)]
        mock = MockLM(MockScript.queue(responses))
        with ThreadPoolExecutor(max_workers=8) as pool:
            seen = list(
                pool.map(lambda _: mock.complete(request_of("x")).text, range(64))
            )
        assert sorted(seen, key=int) == responses


class _StubHandler(BaseHTTPRequestHandler):
    """Plays back scripted (status, payload) pairs and records request bodies."""

    script: list[tuple[int, dict]] = []
    requests: list[dict] = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        _StubHandler.requests.append(json.loads(self.rfile.read(length)))
        status, payload = _StubHandler.script.pop(0)
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    _StubHandler.script = []
    _StubHandler.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", _StubHandler
    server.shutdown()


def completion_payload(text: str, prompt_tokens: int, completion_tokens: int) -> dict:
    return {
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
        },
    }


class TestHttpLM:
    def test_usage_passthrough(self, stub_server):
        base_url, handler = stub_server
        handler.script.append((200, completion_payload("hi", 12, 3)))
        client = HttpLM(base_url, model_name="m", api_key="k", backoff_base=0.0)
        response = client.complete(request_of("hello"))
        assert response.text == "hi"
        assert response.usage == TokenUsage(12, 3)
        sent = handler.requests[0]
        assert sent["model"] == "m"
        assert sent["messages"] == [{"role": "user", "content": "hello"}]

    def test_retries_on_server_error(self, stub_server):
        base_url, handler = stub_server
        handler.script.extend(
            [(500, {}), (429, {}), (200, completion_payload("ok", 1, 1))]
        )
        client = HttpLM(base_url, backoff_base=0.0, max_attempts=3)
        assert client.complete(request_of("x")).text == "ok"

    def test_transport_error_after_exhausted_retries(self, stub_server):
        base_url, handler = stub_server
        handler.script.extend([(503, {}), (503, {})])
        client = HttpLM(base_url, backoff_base=0.0, max_attempts=2)
        with pytest.raises(TransportError) as exc_info:
            client.complete(request_of("x"))
        assert exc_info.value.attempts == 2

    def test_client_error_is_not_retried(self, stub_server):
        base_url, handler = stub_server
        handler.script.append((400, {"error": "bad request"}))
        client = HttpLM(base_url, backoff_base=0.0)
        with pytest.raises(ProtocolError):
            client.complete(request_of("x"))
        assert handler.script == []

    def test_malformed_payload(self, stub_server):
        base_url, handler = stub_server
        handler.script.append((200, {"choices": []}))
        client = HttpLM(base_url, backoff_base=0.0)
        with pytest.raises(ProtocolError):
            client.complete(request_of("x"))

    def test_max_tokens_forwarded(self, stub_server):
        base_url, handler = stub_server
        handler.script.append((200, completion_payload("ok", 1, 1)))
        client = HttpLM(base_url, backoff_base=0.0)
        client.complete(
            CompletionRequest(
                messages=(ChatMessage("user", "x"),), max_decode_tokens=99
            )
        )
        assert handler.requests[0]["max_tokens"] == 99

    def test_requires_base_url(self, monkeypatch):
        monkeypatch.delenv("OPENAI_BASE_URL", raising=False)
        with pytest.raises(ValueError):
            HttpLM()


class TestCompleteJson:
    def test_corrective_retry_appends_messages(self):
        mock = MockLM(MockScript.queue(["not json at all", fenced({"ok": True})]))
        value, _ = complete_json(mock, request_of("go"), retries=3)
        assert value == {"ok": True}
        retry_request = mock.requests[1]
        assert retry_request.messages[-1].role == "user"
        assert "not valid JSON" in retry_request.messages[-1].content
        assert retry_request.messages[-2].content == "not json at all"

    def test_every_attempt_reported_for_accounting(self):
        mock = MockLM(MockScript.queue(["bad", "also bad", fenced({"a": 1})]))
        seen = []
        complete_json(mock, request_of("go"), retries=3, on_response=seen.append)
        assert len(seen) == 3

    def test_raises_after_exhausting_retries(self):
        mock = MockLM(MockScript.queue(["bad"] * 3))
        with pytest.raises(JsonExtractionError):
            complete_json(mock, request_of("go"), retries=2)
