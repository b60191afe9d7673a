"""Shared domain types: tasks, messages, job records, and the token/cost ledger.

Everything here is either an immutable value object or (for ``CostLedger``)
explicitly thread-safe, so instances can be shared freely between the protocol
runners and parallel job workers.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, Mapping, Sequence

ROLE_LOCAL = "local"
ROLE_REMOTE = "remote"
ROLES = (ROLE_LOCAL, ROLE_REMOTE)

CHAT_ROLES = ("system", "user", "assistant")

TERMINATED_FINAL_ANSWER = "final_answer"
TERMINATED_MAX_ROUNDS = "max_rounds_forced"
TERMINATED_ERROR = "error"

_WHITESPACE_RUN = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Lowercase, strip, and collapse internal whitespace runs to single spaces."""
    return _WHITESPACE_RUN.sub(" ", text.strip()).lower()


def is_abstention(answer: object) -> bool:
    """True when a worker answer is the none-marker (missing, null, or "none")."""
    if answer is None:
        return True
    if isinstance(answer, str):
        return answer.strip().lower() in ("", "none")
    return False


@dataclass(frozen=True)
class TaskInstance:
    """One benchmark item: context documents, a query against them, and the gold answer."""

    id: str
    context: tuple[str, ...]
    query: str
    gold_answer: str
    options: tuple[str, ...] | None = None
    doc_type: str = "document"

    def __post_init__(self) -> None:
        object.__setattr__(self, "context", tuple(self.context))
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))
        if not self.context:
            raise ValueError("context must contain at least one document")
        if not self.query:
            raise ValueError("query must be non-empty")
        if self.options is not None:
            gold = normalize_answer(self.gold_answer)
            if not any(normalize_answer(opt) == gold for opt in self.options):
                raise ValueError(
                    f"gold_answer {self.gold_answer!r} does not match any option"
                )

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "TaskInstance":
        """Build a task from the JSONL record schema (id, context, query, answer, ...)."""
        for key in ("id", "context", "query", "answer"):
            if key not in obj:
                raise KeyError(key)
        options = obj.get("options")
        return cls(
            id=str(obj["id"]),
            context=tuple(obj["context"]),
            query=obj["query"],
            gold_answer=obj["answer"],
            options=tuple(options) if options is not None else None,
            doc_type=obj.get("doc_type", "document"),
        )

    def to_dict(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "id": self.id,
            "context": list(self.context),
            "query": self.query,
            "answer": self.gold_answer,
        }
        if self.options is not None:
            record["options"] = list(self.options)
        if self.doc_type != "document":
            record["doc_type"] = self.doc_type
        return record


def query_with_options(task: TaskInstance) -> str:
    """Render the task query, appending answer choices when the task has them."""
    if not task.options:
        return task.query
    choices = "\n".join(f"- {opt}" for opt in task.options)
    return f"{task.query}\n\nAnswer choices:\n{choices}"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in CHAT_ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class JobManifest:
    """A single local subtask: one instruction paired with one context chunk."""

    job_index: int
    task_id: int
    chunk_id: str
    chunk: str
    task: str
    advice: str | None = None
    sample_index: int = 0

    def __post_init__(self) -> None:
        if not self.chunk:
            raise ValueError("chunk must be non-empty")


@dataclass(frozen=True)
class JobOutput:
    """Structured result of one job; abstained jobs carry no answer."""

    job_index: int
    explanation: str
    citation: str | None
    answer: str | None
    abstained: bool

    def __post_init__(self) -> None:
        if self.abstained != is_abstention(self.answer):
            raise ValueError("abstained flag inconsistent with answer field")

    @classmethod
    def from_fields(
        cls,
        job_index: int,
        explanation: object,
        citation: object,
        answer: object,
    ) -> "JobOutput":
        """Build an output from raw worker JSON values, deriving the abstain flag."""
        answer_text = None if is_abstention(answer) else str(answer)
        citation_text = None if is_abstention(citation) else str(citation)
        return cls(
            job_index=job_index,
            explanation="" if explanation is None else str(explanation),
            citation=citation_text,
            answer=answer_text,
            abstained=answer_text is None,
        )


@dataclass(frozen=True)
class TokenUsage:
    prefill_tokens: int = 0
    decode_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prefill_tokens < 0 or self.decode_tokens < 0:
            raise ValueError("token counts must be >= 0")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prefill_tokens + other.prefill_tokens,
            self.decode_tokens + other.decode_tokens,
        )


@dataclass(frozen=True)
class CostRates:
    """Per-token USD prices; decode tokens are typically a small multiple of prefill."""

    usd_per_prefill_token: Decimal
    usd_per_decode_token: Decimal

    def __post_init__(self) -> None:
        for name in ("usd_per_prefill_token", "usd_per_decode_token"):
            value = getattr(self, name)
            if not isinstance(value, Decimal):
                value = Decimal(str(value))
                object.__setattr__(self, name, value)
            if not value.is_finite() or value < 0:
                raise ValueError(f"{name} must be finite and >= 0")


# GPT-4o list prices as of January 2025; override per provider.
DEFAULT_COST_RATES = CostRates(Decimal("2.50E-6"), Decimal("1.00E-5"))


class CostLedger:
    """Thread-safe per-role accumulator of prefill/decode token counts."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._totals: dict[str, TokenUsage] = {role: TokenUsage() for role in ROLES}

    def record(self, role: str, usage: TokenUsage) -> None:
        """Add usage to one role's totals; the other role is untouched."""
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        with self._lock:
            self._totals[role] = self._totals[role] + usage

    def usage(self, role: str) -> TokenUsage:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        with self._lock:
            return self._totals[role]

    def combine(self, other: "CostLedger") -> "CostLedger":
        """Return a new ledger holding the elementwise sum of both ledgers."""
        merged = CostLedger()
        for role in ROLES:
            merged.record(role, self.usage(role))
            merged.record(role, other.usage(role))
        return merged

    def as_dict(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {
                role: {
                    "prefill_tokens": usage.prefill_tokens,
                    "decode_tokens": usage.decode_tokens,
                }
                for role, usage in self._totals.items()
            }


def record_usage(ledger: CostLedger, role: str, usage: TokenUsage) -> CostLedger:
    """Accumulate usage into the ledger and return it (convenience form)."""
    ledger.record(role, usage)
    return ledger


def cost_usd(
    ledger: CostLedger,
    rates: CostRates = DEFAULT_COST_RATES,
    priced_roles: Iterable[str] = (ROLE_REMOTE,),
) -> Decimal:
    """Exact USD cost of the priced roles' usage; local calls are free by default."""
    total = Decimal(0)
    for role in priced_roles:
        usage = ledger.usage(role)
        total += (
            usage.prefill_tokens * rates.usd_per_prefill_token
            + usage.decode_tokens * rates.usd_per_decode_token
        )
    return total


def usd_str(amount: Decimal) -> str:
    """Render a USD amount rounded to 3 decimals, e.g. '0.261'."""
    return str(amount.quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class TranscriptEvent:
    """One tagged protocol event; payloads are pre-rendered deterministic strings."""

    kind: str
    payload: str


def event(kind: str, payload: Any) -> TranscriptEvent:
    """Build an event, canonicalizing structured payloads to sorted compact JSON."""
    if isinstance(payload, str):
        return TranscriptEvent(kind, payload)
    return TranscriptEvent(
        kind, json.dumps(payload, sort_keys=True, separators=(",", ":"))
    )


def render_transcript(events: Sequence[TranscriptEvent]) -> str:
    return "\n".join(f"[{e.kind}] {e.payload}" for e in events)


@dataclass(frozen=True)
class ProtocolResult:
    """Outcome of one protocol run over one task."""

    final_answer: str | None
    rounds_used: int
    ledger: CostLedger
    transcript: tuple[TranscriptEvent, ...] = ()
    terminated_by: str = TERMINATED_FINAL_ANSWER

    def __post_init__(self) -> None:
        object.__setattr__(self, "transcript", tuple(self.transcript))
        if self.terminated_by not in (
            TERMINATED_FINAL_ANSWER,
            TERMINATED_MAX_ROUNDS,
            TERMINATED_ERROR,
        ):
            raise ValueError(f"unknown termination reason {self.terminated_by!r}")
        if self.final_answer is None and self.terminated_by != TERMINATED_ERROR:
            raise ValueError("final_answer required unless the run errored")
        if self.rounds_used < 1:
            raise ValueError("rounds_used must be >= 1")

    def transcript_text(self) -> str:
        return render_transcript(self.transcript)
