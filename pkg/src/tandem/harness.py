"""Evaluation harness: dataset loading, scoring, suite execution, and sweeps.

Aggregate ratios (accuracy, means) are kept as exact fractions so accounting
identities hold without float drift; CSV output formats them at fixed width.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from .core import (
    ChatMessage,
    CostLedger,
    CostRates,
    DEFAULT_COST_RATES,
    ProtocolResult,
    ROLE_LOCAL,
    ROLE_REMOTE,
    TaskInstance,
    TERMINATED_ERROR,
    TERMINATED_FINAL_ANSWER,
    TokenUsage,
    cost_usd,
    event,
    normalize_answer,
    query_with_options,
)
from .llm import CompletionRequest, LMClient, LMClientError
from .minion import MinionConfig, run_minion
from .minions import MinionsConfig, run_minions
from .retrieval import EmbeddingProvider, RagConfig, run_rag

logger = logging.getLogger(__name__)

PROTOCOLS = ("remote-only", "local-only", "minion", "minions", "rag")

SWEEP_AXES = (
    "max_rounds",
    "samples_per_task",
    "instructions_per_round",
    "pages_per_chunk",
    "rag_k",
)

SWEEP_CSV_COLUMNS = (
    "axis",
    "value",
    "accuracy",
    "mean_usd",
    "mean_remote_prefill",
    "mean_remote_decode",
    "mean_rounds",
)

RECORD_CSV_COLUMNS = (
    "task_id",
    "protocol",
    "predicted",
    "correct",
    "usd",
    "remote_prefill",
    "remote_decode",
    "local_prefill",
    "local_decode",
    "rounds",
    "config_fingerprint",
)


class DatasetError(ValueError):
    """A dataset file failed to parse; the message carries the line number."""


class ConfigError(ValueError):
    """An invalid harness configuration value."""


def load_dataset(path: str | Path) -> list[TaskInstance]:
    """Read one JSON task object per line; blank lines are ignored."""
    tasks = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_number}: invalid JSON ({exc})") from exc
            try:
                tasks.append(TaskInstance.from_dict(obj))
            except KeyError as exc:
                raise DatasetError(
                    f"line {line_number}: missing required key {exc.args[0]!r}"
                ) from exc
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"line {line_number}: {exc}") from exc
    return tasks


def score(predicted: str | None, task: TaskInstance, mode: str = "exact") -> bool:
    """Binary correctness: exact normalized match, constrained to options when present.

    With options, the prediction must match exactly one answer choice and that
    choice must be the gold one. "span" mode additionally accepts containment
    in either direction for free-text answers.
    """
    if predicted is None:
        return False
    if mode not in ("exact", "span"):
        raise ConfigError(f"unknown score mode {mode!r}")
    pred = normalize_answer(predicted)
    gold = normalize_answer(task.gold_answer)
    if task.options:
        matches = [opt for opt in task.options if normalize_answer(opt) == pred]
        return len(matches) == 1 and normalize_answer(matches[0]) == gold
    if pred == gold:
        return True
    if mode == "span" and pred and gold:
        return pred in gold or gold in pred
    return False


@dataclass(frozen=True)
class RunRecord:
    task_id: str
    protocol: str
    predicted: str | None
    correct: bool
    remote_usage: TokenUsage
    local_usage: TokenUsage
    usd: Decimal
    rounds: int
    config_fingerprint: str

    def __post_init__(self) -> None:
        if self.correct and self.predicted is None:
            raise ValueError("a correct record must carry a prediction")


@dataclass(frozen=True)
class AggregateReport:
    count: int
    accuracy: Fraction
    mean_usd: Fraction
    mean_remote_prefill: Fraction
    mean_remote_decode: Fraction
    mean_rounds: Fraction
    total_usd: Decimal

    @property
    def ib_proxy(self) -> tuple[Fraction, Fraction]:
        """(compression proxy, relevance proxy) = (mean remote prefill, accuracy)."""
        return (self.mean_remote_prefill, self.accuracy)


def aggregate(records: Sequence[RunRecord]) -> AggregateReport:
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    count = len(records)
    total_usd = sum((r.usd for r in records), Decimal(0))
    return AggregateReport(
        count=count,
        accuracy=Fraction(sum(r.correct for r in records), count),
        mean_usd=Fraction(total_usd) / count,
        mean_remote_prefill=Fraction(
            sum(r.remote_usage.prefill_tokens for r in records), count
        ),
        mean_remote_decode=Fraction(
            sum(r.remote_usage.decode_tokens for r in records), count
        ),
        mean_rounds=Fraction(sum(r.rounds for r in records), count),
        total_usd=total_usd,
    )


@dataclass(frozen=True)
class SuiteConfig:
    protocol: str = "minions"
    rates: CostRates = DEFAULT_COST_RATES
    score_mode: str = "exact"
    parallelism: int = 1
    # Remote-only context cap (chars); roughly a 128K-token window at 4 chars/token.
    max_context_chars: int | None = 512_000
    minion: MinionConfig = field(default_factory=MinionConfig)
    minions: MinionsConfig = field(default_factory=MinionsConfig)
    rag: RagConfig = field(default_factory=RagConfig)
    baseline_temperature: float = 0.2

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "protocol": self.protocol,
                "score_mode": self.score_mode,
                "max_context_chars": self.max_context_chars,
                "minion": vars(self.minion),
                "minions": vars(self.minions),
                "rag": vars(self.rag),
                "baseline_temperature": self.baseline_temperature,
            },
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


BASELINE_PROMPT_TEMPLATE = """\
Answer the question below based on the {doc_type}.

### {doc_type}
{context}

### Question
{query}

Reply with the answer only.
"""


def run_single_model(
    client: LMClient, task: TaskInstance, role: str, config: SuiteConfig
) -> ProtocolResult:
    """Remote-only / local-only baseline: one call with the (possibly truncated) context."""
    context = "\n\n".join(task.context)
    if (
        role == ROLE_REMOTE
        and config.max_context_chars is not None
        and len(context) > config.max_context_chars
    ):
        logger.warning(
            "truncating context for task %s: %d chars exceeds the %d-char cap",
            task.id,
            len(context),
            config.max_context_chars,
        )
        context = context[: config.max_context_chars]
    prompt = BASELINE_PROMPT_TEMPLATE.format(
        doc_type=task.doc_type, context=context, query=query_with_options(task)
    )
    ledger = CostLedger()
    response = client.complete(
        CompletionRequest(
            messages=(ChatMessage("user", prompt),),
            temperature=config.baseline_temperature,
        )
    )
    ledger.record(role, response.usage)
    return ProtocolResult(
        final_answer=response.text.strip(),
        rounds_used=1,
        ledger=ledger,
        transcript=(event(f"{role}_message", response.text),),
        terminated_by=TERMINATED_FINAL_ANSWER,
    )


ClientFactory = Callable[[], tuple[LMClient | None, LMClient | None]]


def _run_protocol(
    task: TaskInstance,
    config: SuiteConfig,
    local_client: LMClient | None,
    remote_client: LMClient | None,
    embedding_provider: EmbeddingProvider | None,
) -> ProtocolResult:
    if config.protocol == "remote-only":
        assert remote_client is not None
        return run_single_model(remote_client, task, ROLE_REMOTE, config)
    if config.protocol == "local-only":
        assert local_client is not None
        return run_single_model(local_client, task, ROLE_LOCAL, config)
    if config.protocol == "minion":
        assert local_client is not None and remote_client is not None
        return run_minion(local_client, remote_client, task, config.minion)
    if config.protocol == "minions":
        assert local_client is not None and remote_client is not None
        return run_minions(local_client, remote_client, task, config.minions)
    assert remote_client is not None
    return run_rag(task, config.rag, remote_client, provider=embedding_provider)


def run_suite(
    dataset: Sequence[TaskInstance],
    config: SuiteConfig,
    make_clients: ClientFactory,
    embedding_provider: EmbeddingProvider | None = None,
) -> tuple[list[RunRecord], AggregateReport]:
    """Run every task through the configured protocol and aggregate the results.

    The client factory is invoked once per task so scripted mocks start fresh.
    Per-task protocol errors become incorrect records; the suite continues.
    Records come back sorted by task id, so output is order-independent even
    with parallelism > 1.
    """
    fingerprint = config.fingerprint()

    def run_one(task: TaskInstance) -> RunRecord:
        local_client, remote_client = make_clients()
        try:
            result = _run_protocol(
                task, config, local_client, remote_client, embedding_provider
            )
        except LMClientError as exc:
            logger.warning("task %s failed: %s", task.id, exc)
            result = ProtocolResult(
                final_answer=None,
                rounds_used=1,
                ledger=CostLedger(),
                transcript=(event("error", str(exc)),),
                terminated_by=TERMINATED_ERROR,
            )
        return RunRecord(
            task_id=task.id,
            protocol=config.protocol,
            predicted=result.final_answer,
            correct=score(result.final_answer, task, config.score_mode),
            remote_usage=result.ledger.usage(ROLE_REMOTE),
            local_usage=result.ledger.usage(ROLE_LOCAL),
            usd=cost_usd(result.ledger, config.rates),
            rounds=result.rounds_used,
            config_fingerprint=fingerprint,
        )

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            records = list(pool.map(run_one, dataset))
    else:
        records = [run_one(task) for task in dataset]
    records.sort(key=lambda r: r.task_id)
    return records, aggregate(records)


def _apply_axis(config: SuiteConfig, axis: str, value: int) -> SuiteConfig:
    if axis == "max_rounds":
        return replace(
            config,
            minion=replace(config.minion, max_rounds=value),
            minions=replace(config.minions, max_rounds=value),
        )
    if axis == "samples_per_task":
        return replace(config, minions=replace(config.minions, samples_per_task=value))
    if axis == "instructions_per_round":
        return replace(config, minions=replace(config.minions, max_instructions=value))
    if axis == "pages_per_chunk":
        return replace(config, minions=replace(config.minions, pages_per_chunk=value))
    if axis == "rag_k":
        return replace(config, rag=replace(config.rag, top_k=value))
    raise ConfigError(f"unknown sweep axis {axis!r} (expected one of {SWEEP_AXES})")


def fraction_str(value: Fraction, places: int = 6) -> str:
    quantum = Decimal(1).scaleb(-places)
    return str(
        (Decimal(value.numerator) / Decimal(value.denominator)).quantize(quantum)
    )


def sweep(
    dataset: Sequence[TaskInstance],
    base_config: SuiteConfig,
    axis: str,
    values: Sequence[int],
    make_clients: ClientFactory,
    embedding_provider: EmbeddingProvider | None = None,
) -> list[dict[str, str]]:
    """Run the suite once per axis value and return one CSV row per value."""
    if not values:
        raise ConfigError("sweep requires at least one value")
    rows = []
    for value in values:
        config = _apply_axis(base_config, axis, value)
        _, report = run_suite(dataset, config, make_clients, embedding_provider)
        rows.append(
            {
                "axis": axis,
                "value": str(value),
                "accuracy": fraction_str(report.accuracy),
                "mean_usd": fraction_str(report.mean_usd),
                "mean_remote_prefill": fraction_str(report.mean_remote_prefill),
                "mean_remote_decode": fraction_str(report.mean_remote_decode),
                "mean_rounds": fraction_str(report.mean_rounds),
            }
        )
    return rows


def records_to_rows(records: Sequence[RunRecord]) -> list[dict[str, str]]:
    return [
        {
            "task_id": r.task_id,
            "protocol": r.protocol,
            "predicted": r.predicted if r.predicted is not None else "",
            "correct": str(int(r.correct)),
            "usd": str(r.usd),
            "remote_prefill": str(r.remote_usage.prefill_tokens),
            "remote_decode": str(r.remote_usage.decode_tokens),
            "local_prefill": str(r.local_usage.prefill_tokens),
            "local_decode": str(r.local_usage.decode_tokens),
            "rounds": str(r.rounds),
            "config_fingerprint": r.config_fingerprint,
        }
        for r in records
    ]


def write_csv(
    rows: Sequence[dict[str, str]], path: str | Path, columns: Sequence[str]
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)
