"""Minion protocol: free-form chat between a context-holding local model and a
context-blind remote model, looping until the remote declares a final answer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import (
    ChatMessage,
    CostLedger,
    ProtocolResult,
    ROLE_LOCAL,
    ROLE_REMOTE,
    TaskInstance,
    TERMINATED_ERROR,
    TERMINATED_FINAL_ANSWER,
    TERMINATED_MAX_ROUNDS,
    TranscriptEvent,
    event,
    query_with_options,
)
from .llm import (
    CompletionRequest,
    CompletionResponse,
    LMClient,
    LMClientError,
    ProtocolError,
    complete_json,
    extract_json_block,
)

REMOTE_SYSTEM_TEMPLATE = """\
We need to answer the following question based on a {doc_type}.

### Question
{query}

### Instructions
You will not have direct access to the {doc_type}, but can chat with a small \
language model which has read the entire thing.

Feel free to think step-by-step, but eventually you must provide an output \
in the format below:

<think step by step here>
```json
{{
    "message": "<your message to the small language model>"
}}
```"""

LOCAL_SYSTEM_TEMPLATE = """\
You will help a user answer the following question based on a {doc_type}.

Read the {doc_type} below and prepare to answer questions from an expert user.
### {doc_type}
{context}

### Question
{query}"""

CONVERSATION_TEMPLATE = """\
Here is the response from the small language model:

### Response
{response}

### Instructions
Analyze the response and think step-by-step to determine if you have enough \
information to answer the question.

If you have enough information, provide a final answer in the format below.

<think step by step here>
```json
{{
    "decision": "provide_final_answer",
    "answer": "<your answer>"
}}
```

Otherwise, request additional information from the small language model by \
outputting the following:

<think step by step here>
```json
{{
    "decision": "request_additional_info",
    "message": "<your message to the small language model>"
}}
```"""

# Appended on the last permitted round so the conversation must terminate.
FORCED_FINAL_SUFFIX = """

No further rounds of communication are available. You must now answer with the \
"provide_final_answer" format above, giving your best answer from the \
information gathered so far."""

FORCED_OPENING_PROMPT = """\
No rounds of communication are available. Answer the question directly now:

<think step by step here>
```json
{{
    "decision": "provide_final_answer",
    "answer": "<your answer>"
}}
```"""


@dataclass(frozen=True)
class MinionConfig:
    max_rounds: int = 5
    remote_temperature: float = 0.0
    local_temperature: float = 0.2
    doc_type: str | None = None  # defaults to the task's label
    json_retries: int = 3

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass(frozen=True)
class RemoteDecision:
    kind: str  # "message" | "final_answer"
    text: str

    def __post_init__(self) -> None:
        if self.kind not in ("message", "final_answer"):
            raise ValueError(f"unknown decision kind {self.kind!r}")


def build_remote_system_prompt(query: str, doc_type: str) -> str:
    return REMOTE_SYSTEM_TEMPLATE.format(query=query, doc_type=doc_type)


def build_local_system_prompt(
    context: Sequence[str], query: str, doc_type: str
) -> str:
    return LOCAL_SYSTEM_TEMPLATE.format(
        context="\n\n".join(context), query=query, doc_type=doc_type
    )


def build_conversation_prompt(local_response: str, force_final: bool = False) -> str:
    prompt = CONVERSATION_TEMPLATE.format(response=local_response)
    if force_final:
        prompt += FORCED_FINAL_SUFFIX
    return prompt


def interpret_remote_object(
    obj: object, round_index: int, force_final: bool = False
) -> RemoteDecision:
    """Map a parsed remote JSON object onto the per-round schema."""
    if not isinstance(obj, dict):
        raise ProtocolError(f"remote turn must be a JSON object, got {type(obj).__name__}")
    if round_index == 1 and not force_final:
        if "message" not in obj:
            raise ProtocolError('first remote turn must contain a "message" key')
        return RemoteDecision("message", str(obj["message"]))
    decision = obj.get("decision")
    if decision == "provide_final_answer":
        if "answer" not in obj or obj["answer"] is None:
            raise ProtocolError('final-answer turn missing the "answer" key')
        return RemoteDecision("final_answer", str(obj["answer"]))
    if decision == "request_additional_info":
        if "message" not in obj:
            raise ProtocolError('info-request turn missing the "message" key')
        return RemoteDecision("message", str(obj["message"]))
    raise ProtocolError(f"unknown decision value {decision!r}")


def parse_remote_turn(
    text: str, round_index: int, force_final: bool = False
) -> RemoteDecision:
    """Extract and interpret a raw remote reply."""
    return interpret_remote_object(extract_json_block(text), round_index, force_final)


def run_minion(
    local_client: LMClient,
    remote_client: LMClient,
    task: TaskInstance,
    config: MinionConfig = MinionConfig(),
) -> ProtocolResult:
    """Alternate remote and local turns until the remote provides a final answer.

    The raw context only ever appears in the local system prompt; the remote
    side sees just the conversation. On the last permitted round the remote
    prompt is suffixed so only a final answer is acceptable.
    """
    ledger = CostLedger()
    events: list[TranscriptEvent] = []
    doc_type = config.doc_type or task.doc_type
    query = query_with_options(task)

    remote_messages: list[ChatMessage] = [
        ChatMessage("system", build_remote_system_prompt(query, doc_type))
    ]
    local_messages: list[ChatMessage] = [
        ChatMessage("system", build_local_system_prompt(task.context, query, doc_type))
    ]

    def on_remote(response: CompletionResponse) -> None:
        ledger.record(ROLE_REMOTE, response.usage)

    rounds_used = 1
    try:
        for round_index in range(1, config.max_rounds + 1):
            rounds_used = round_index
            force_final = round_index == config.max_rounds
            if round_index > 1:
                remote_messages.append(
                    ChatMessage(
                        "user", build_conversation_prompt(local_reply, force_final)
                    )
                )
            elif force_final:
                # max_rounds=1: no local exchange can happen, demand an answer.
                remote_messages.append(ChatMessage("user", FORCED_OPENING_PROMPT))

            obj, response = complete_json(
                remote_client,
                CompletionRequest(
                    messages=tuple(remote_messages),
                    temperature=config.remote_temperature,
                ),
                retries=config.json_retries,
                on_response=on_remote,
            )
            events.append(event("remote_message", response.text))
            remote_messages.append(ChatMessage("assistant", response.text))
            decision = interpret_remote_object(obj, round_index, force_final)

            if decision.kind == "final_answer":
                return ProtocolResult(
                    final_answer=decision.text,
                    rounds_used=round_index,
                    ledger=ledger,
                    transcript=tuple(events),
                    terminated_by=(
                        TERMINATED_MAX_ROUNDS if force_final else TERMINATED_FINAL_ANSWER
                    ),
                )
            if force_final:
                raise ProtocolError("remote declined to answer on the forced round")

            local_messages.append(ChatMessage("user", decision.text))
            local_response = local_client.complete(
                CompletionRequest(
                    messages=tuple(local_messages),
                    temperature=config.local_temperature,
                )
            )
            ledger.record(ROLE_LOCAL, local_response.usage)
            events.append(event("local_message", local_response.text))
            local_messages.append(ChatMessage("assistant", local_response.text))
            local_reply = local_response.text
    except LMClientError as exc:
        events.append(event("error", str(exc)))
        return ProtocolResult(
            final_answer=None,
            rounds_used=rounds_used,
            ledger=ledger,
            transcript=tuple(events),
            terminated_by=TERMINATED_ERROR,
        )
    raise AssertionError("unreachable: forced round returns or raises")
