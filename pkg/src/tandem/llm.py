"""Completion clients: deterministic mocks for tests and an OpenAI-compatible HTTP adapter.

All clients expose a single ``complete(request) -> CompletionResponse`` method and
are safe for concurrent calls; the queue-mode mock serializes internally so the
scripted order is preserved.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import requests

from .core import ChatMessage, TokenUsage


class LMClientError(Exception):
    """Base class for completion-client failures."""


class TransportError(LMClientError):
    """Network-level failure after exhausting retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class ProtocolError(LMClientError):
    """The provider or model returned a payload we cannot interpret."""


class MockScriptError(LMClientError):
    """A mock script was exhausted or no rule matched; a test-configuration bug."""


class JsonExtractionError(LMClientError):
    """No parseable JSON found in a model reply; carries the raw text."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_decode_tokens: int | None = None
    model_name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    usage: TokenUsage


class LMClient(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


def estimate_tokens(text: str) -> int:
    """Rough token count at 4 chars/token; real runs use provider-reported counts."""
    return math.ceil(len(text) / 4)


_JSON_FENCE = re.compile(r"```json\s*(.*?)```", re.DOTALL | re.IGNORECASE)


def extract_json_block(text: str) -> Any:
    """Parse the last fenced ```json block, falling back to the first balanced object.

    Prompts ask models to think first and emit JSON last, so the final fenced
    block is authoritative. Raises JsonExtractionError (carrying the raw text)
    when nothing parseable is found.
    """
    fences = _JSON_FENCE.findall(text)
    if fences:
        candidate = fences[-1]
    else:
        candidate = _first_balanced_object(text)
        if candidate is None:
            raise JsonExtractionError("no JSON object found in model reply", raw=text)
    try:
        return json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise JsonExtractionError(f"invalid JSON in model reply: {exc}", raw=text) from exc


def _first_balanced_object(text: str) -> str | None:
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


@dataclass(frozen=True)
class MockRule:
    response: str
    match: str | None = None


class MockScript:
    """Scripted responses: a consume-in-order queue or ordered substring patterns."""

    def __init__(self, mode: str, rules: Sequence[MockRule]):
        if mode not in ("queue", "pattern"):
            raise ValueError(f"unknown mock script mode {mode!r}")
        self.mode = mode
        self.rules = tuple(rules)

    @classmethod
    def queue(cls, responses: Iterable[str]) -> "MockScript":
        return cls("queue", [MockRule(response=r) for r in responses])

    @classmethod
    def patterns(cls, rules: Iterable[tuple[str | None, str]]) -> "MockScript":
        return cls("pattern", [MockRule(response=r, match=m) for m, r in rules])

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "MockScript":
        mode = obj.get("mode", "queue")
        if mode == "queue":
            return cls.queue(obj["responses"])
        return cls.patterns([(r.get("match"), r["response"]) for r in obj["rules"]])


class MockLM:
    """Deterministic scripted model; usage is computed with the token estimator.

    Pattern rules match against the last user message when one exists, otherwise
    against the last message of any role (system-only prompts occur on the
    opening remote turn).
    """

    def __init__(
        self,
        script: MockScript,
        token_estimator: Callable[[str], int] = estimate_tokens,
        model_name: str = "mock",
    ):
        self.script = script
        self.token_estimator = token_estimator
        self.model_name = model_name
        self.requests: list[CompletionRequest] = []
        self._cursor = 0
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.requests.append(request)
            text = self._pick(request)
        prefill = sum(self.token_estimator(m.content) for m in request.messages)
        return CompletionResponse(
            text=text, usage=TokenUsage(prefill, self.token_estimator(text))
        )

    def _pick(self, request: CompletionRequest) -> str:
        if self.script.mode == "queue":
            if self._cursor >= len(self.script.rules):
                raise MockScriptError(
                    f"mock queue exhausted after {self._cursor} responses"
                )
            rule = self.script.rules[self._cursor]
            self._cursor += 1
            return rule.response
        target = self._match_target(request)
        for rule in self.script.rules:
            if rule.match is None or rule.match in target:
                return rule.response
        raise MockScriptError(f"no mock pattern matched message: {target[:120]!r}")

    @staticmethod
    def _match_target(request: CompletionRequest) -> str:
        for message in reversed(request.messages):
            if message.role == "user":
                return message.content
        return request.messages[-1].content


class HttpLM:
    """OpenAI-compatible chat completions adapter with bounded retries.

    Retries 429 and 5xx responses (and transport failures) with exponential
    backoff; other HTTP errors and malformed payloads raise immediately.
    """

    RETRIABLE_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(
        self,
        base_url: str | None = None,
        model_name: str = "",
        api_key: str | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        base_url_env: str = "OPENAI_BASE_URL",
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        session: requests.Session | None = None,
    ):
        resolved_base = base_url or os.getenv(base_url_env, "")
        if not resolved_base:
            raise ValueError("base_url is required (flag or environment)")
        self.base_url = resolved_base.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key if api_key is not None else os.getenv(api_key_env, "")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.session = session or requests.Session()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        body: dict[str, Any] = {
            "model": request.model_name or self.model_name,
            "messages": [
                {"role": m.role, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
        }
        if request.max_decode_tokens is not None:
            body["max_tokens"] = request.max_decode_tokens
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error = "request failed"
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self.session.post(
                    f"{self.base_url}/v1/chat/completions",
                    json=body,
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
            else:
                if response.status_code == 200:
                    return self._parse_payload(response)
                if response.status_code not in self.RETRIABLE_STATUS:
                    raise ProtocolError(
                        f"HTTP {response.status_code}: {response.text[:500]}"
                    )
                last_error = f"HTTP {response.status_code}"
            if attempt < self.max_attempts:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
        raise TransportError(last_error, attempts=self.max_attempts)

    @staticmethod
    def _parse_payload(response: requests.Response) -> CompletionResponse:
        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"]
            usage = payload["usage"]
            prefill = int(usage["prompt_tokens"])
            decode = int(usage["completion_tokens"])
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion payload: {exc}") from exc
        return CompletionResponse(text=text, usage=TokenUsage(prefill, decode))


_CORRECTIVE_MESSAGE = (
    "Your last reply was not valid JSON. Reply again, following the required "
    "JSON format exactly."
)


def complete_json(
    client: LMClient,
    request: CompletionRequest,
    retries: int = 3,
    on_response: Callable[[CompletionResponse], None] | None = None,
) -> tuple[Any, CompletionResponse]:
    """Run a completion and parse its JSON payload, retrying with a corrective message.

    Every attempt's response is passed to ``on_response`` so callers can account
    for usage even when extraction fails.
    """
    messages = request.messages
    for attempt in range(retries + 1):
        response = client.complete(replace(request, messages=messages))
        if on_response is not None:
            on_response(response)
        try:
            return extract_json_block(response.text), response
        except JsonExtractionError:
            if attempt == retries:
                raise
            messages = messages + (
                ChatMessage("assistant", response.text),
                ChatMessage("user", _CORRECTIVE_MESSAGE),
            )
    raise AssertionError("unreachable")
