"""MinionS protocol: the remote model plans jobs over context chunks, the local
model executes them in parallel, and the remote synthesizes the survivors.

The remote never sees raw context. Each round it emits a structured JSON plan
(instructions x chunking x samples) which is expanded and executed locally;
non-abstaining outputs are formatted into a findings block for synthesis.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Sequence

from .chunking import Chunk, ChunkingStrategy, STRATEGY_KINDS
from .core import (
    ChatMessage,
    CostLedger,
    JobManifest,
    JobOutput,
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
    JsonExtractionError,
    LMClient,
    LMClientError,
    ProtocolError,
    complete_json,
    extract_json_block,
)

FLAVORS = ("finance", "multiple_choice", "span")

# Flavor-specific sampling defaults for the local worker.
LOCAL_TEMPERATURE_BY_FLAVOR = {"finance": 0.2, "multiple_choice": 1e-5, "span": 1e-5}


class PlanValidationError(ValueError):
    """A decomposition plan violated its schema; the message names the field."""


@dataclass(frozen=True)
class PlanTask:
    task_id: int
    instruction: str
    advice: str | None = None


@dataclass(frozen=True)
class DecompositionPlan:
    """Structured job-generation recipe for one round."""

    round_index: int
    instructions: tuple[PlanTask, ...]
    chunking: ChunkingStrategy
    samples_per_task: int = 1
    chunk_filter: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "instructions", tuple(self.instructions))
        if self.chunk_filter is not None:
            object.__setattr__(self, "chunk_filter", tuple(self.chunk_filter))
        if not self.instructions:
            raise PlanValidationError("instructions must be non-empty")
        ids = [t.task_id for t in self.instructions]
        if len(set(ids)) != len(ids):
            raise PlanValidationError("instructions contain duplicate task_id values")
        if self.samples_per_task < 1:
            raise PlanValidationError("samples_per_task must be >= 1")

    def to_json_dict(self) -> dict:
        plan: dict = {
            "instructions": [
                {"task_id": t.task_id, "instruction": t.instruction}
                | ({"advice": t.advice} if t.advice is not None else {})
                for t in self.instructions
            ],
            "chunking": self.chunking.to_json_dict(),
            "samples_per_task": self.samples_per_task,
        }
        if self.chunk_filter is not None:
            plan["chunk_filter"] = list(self.chunk_filter)
        return plan

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))


def plan_from_json_obj(
    obj: object,
    round_index: int,
    max_instructions: int = 16,
    max_samples: int = 16,
) -> DecompositionPlan:
    """Validate the plan wire format and raise field-naming errors on violations."""
    if not isinstance(obj, dict):
        raise PlanValidationError("plan must be a JSON object")
    raw_instructions = obj.get("instructions")
    if not isinstance(raw_instructions, list) or not raw_instructions:
        raise PlanValidationError("instructions must be a non-empty array")
    if len(raw_instructions) > max_instructions:
        raise PlanValidationError(
            f"instructions exceeds the cap of {max_instructions} tasks per round"
        )
    tasks = []
    for entry in raw_instructions:
        if not isinstance(entry, dict):
            raise PlanValidationError("each instructions entry must be an object")
        if "task_id" not in entry or not isinstance(entry["task_id"], int):
            raise PlanValidationError("instructions[].task_id must be an integer")
        instruction = entry.get("instruction")
        if not isinstance(instruction, str) or not instruction:
            raise PlanValidationError("instructions[].instruction must be a non-empty string")
        advice = entry.get("advice")
        if advice is not None and not isinstance(advice, str):
            raise PlanValidationError("instructions[].advice must be a string when present")
        tasks.append(PlanTask(entry["task_id"], instruction, advice))

    chunking_obj = obj.get("chunking")
    if not isinstance(chunking_obj, dict):
        raise PlanValidationError('plan is missing the "chunking" object')
    try:
        strategy = ChunkingStrategy.from_json_dict(chunking_obj)
    except ValueError as exc:
        raise PlanValidationError(f"chunking: {exc}") from exc

    samples = obj.get("samples_per_task", 1)
    if not isinstance(samples, int) or samples < 1:
        raise PlanValidationError("samples_per_task must be an integer >= 1")
    if samples > max_samples:
        raise PlanValidationError(
            f"samples_per_task exceeds the cap of {max_samples} samples"
        )

    chunk_filter = obj.get("chunk_filter")
    if chunk_filter is not None:
        if not isinstance(chunk_filter, list) or not all(
            isinstance(c, str) for c in chunk_filter
        ):
            raise PlanValidationError("chunk_filter must be an array of chunk-id strings")
    return DecompositionPlan(
        round_index=round_index,
        instructions=tuple(tasks),
        chunking=strategy,
        samples_per_task=samples,
        chunk_filter=tuple(chunk_filter) if chunk_filter is not None else None,
    )


def parse_plan(
    remote_text: str,
    round_index: int = 1,
    max_instructions: int = 16,
    max_samples: int = 16,
) -> DecompositionPlan:
    """Extract the fenced JSON plan from a raw remote reply and validate it."""
    return plan_from_json_obj(
        extract_json_block(remote_text), round_index, max_instructions, max_samples
    )


@dataclass(frozen=True)
class RoundStrategy:
    """Cross-round carry-over: either a one-shot advice string or a growing scratchpad."""

    kind: str = "retries"  # "retries" | "scratchpad"
    carried_advice: str = ""
    scratchpad_text: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("retries", "scratchpad"):
            raise ValueError(f"unknown round strategy {self.kind!r}")

    def after_round(self, decision: "SynthesisDecision", round_index: int) -> "RoundStrategy":
        """Fold one round's synthesis outcome into the carried state."""
        if self.kind == "retries":
            return replace(self, carried_advice=decision.explanation)
        note = decision.scratchpad or decision.explanation
        entry = f"Round {round_index}: {note}"
        grown = f"{self.scratchpad_text}\n{entry}" if self.scratchpad_text else entry
        return replace(self, scratchpad_text=grown)

    def render(self) -> str:
        if self.kind == "scratchpad" and self.scratchpad_text:
            return f"### Scratchpad from earlier rounds\n{self.scratchpad_text}"
        if self.kind == "retries" and self.carried_advice:
            return f"### Advice carried over from the previous round\n{self.carried_advice}"
        return ""


@dataclass(frozen=True)
class SynthesisDecision:
    decision: str  # "provide_final_answer" | "request_additional_info"
    explanation: str
    answer: str | None = None
    scratchpad: str | None = None

    def __post_init__(self) -> None:
        if self.decision not in ("provide_final_answer", "request_additional_info"):
            raise ValueError(f"unknown synthesis decision {self.decision!r}")
        if self.decision == "provide_final_answer" and self.answer is None:
            raise ValueError("provide_final_answer requires an answer")
        if self.decision == "request_additional_info" and self.answer is not None:
            raise ValueError("request_additional_info must not carry an answer")

    def to_json_dict(self) -> dict:
        payload: dict = {
            "decision": self.decision,
            "explanation": self.explanation,
            "answer": self.answer,
        }
        if self.scratchpad is not None:
            payload["scratchpad"] = self.scratchpad
        return payload


@dataclass(frozen=True)
class RoundReport:
    """Job bookkeeping for one round; the abstain fraction is kept exact."""

    jobs_created: int
    jobs_kept: int

    def __post_init__(self) -> None:
        if not 0 <= self.jobs_kept <= self.jobs_created:
            raise ValueError("jobs_kept must lie in [0, jobs_created]")

    @property
    def abstain_fraction(self) -> Fraction:
        if self.jobs_created == 0:
            return Fraction(0)
        return Fraction(self.jobs_created - self.jobs_kept, self.jobs_created)


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

PLAN_SCHEMA_BLOCK = """\
Describe the jobs as a single JSON plan using this exact schema:

```json
{{
  "instructions": [{{"task_id": 1, "instruction": "<what to extract>", "advice": "<optional hint for the worker>"}}],
  "chunking": {{"strategy": "by_page", "params": {{}}}},
  "samples_per_task": 1,
  "chunk_filter": ["<doc>_<chunk>"]
}}
```

- "chunking.strategy" must be one of {kinds}.
- "chunking.params" may set "chunk_size_chars" and "overlap_chars" (by_chars) \
or "pages_per_chunk" (multi_page).
- Every instruction is applied to every chunk and sampled "samples_per_task" times.
- Use at most {max_instructions} instructions and at most {max_samples} samples per task.
- "chunk_filter" is optional: include it only to restrict this round to chunk \
ids reported in an earlier round."""

DECOMPOSE_GUIDANCE = {
    "finance": """\
Make sure that NONE of the tasks require calculations or complicated reasoning.
Any information you mention in your task should be given an extraction task.""",
    "multiple_choice": """\
Make sure that NONE of the tasks require multiple steps. Each task should be atomic!
The same task_id should be applied to multiple chunks; DO NOT create a new \
task_id for each combination of task and chunk.""",
    "span": """\
Make sure that NONE of the tasks require multiple steps. Each task should be atomic!
The same task_id should be applied to multiple chunks; DO NOT create a new \
task_id for each combination of task and chunk.""",
}

DECOMPOSE_HEADER_TEMPLATE = """\
# Decomposition Round #{round_index}

You do not have access to the raw document(s), but instead can assign tasks to \
small and less capable language models that can read the document(s).
Note that the document(s) can be very long, so each task should be performed \
only over a small chunk of text."""

PAGES_PER_CHUNK_INSTRUCTION = """\
Please use chunks of {pages_per_chunk} pages: set "chunking" to \
{{"strategy": "multi_page", "params": {{"pages_per_chunk": {pages_per_chunk}}}}}."""

WORKER_PROMPT_TEMPLATE = """\
Your job is to complete the following task using only the context below. The \
context is a chunk of text taken arbitrarily from a document, it might or \
might not contain relevant information to the task.

## Document
{context}

## Task
{task}

{advice}

Return your result in JSON with the following keys: "explanation", "citation", \
and "answer".

- "explanation": A concise statement of your reasoning or how you concluded your answer.
- "citation": A direct snippet of the text that supports your answer. If nothing is found, put "None".
- "answer": The extracted answer. If nothing is found, put "None".

Be certain to only rely on the provided text. If you cannot determine the \
information confidently from this chunk, respond with "None" for all fields."""

SYNTHESIS_PROMPT_TEMPLATE = """\
Now synthesize the findings from multiple junior workers (LLMs).
Your task is to finalize an answer to the question below **if and only if** \
you have sufficient, reliable information. Otherwise, you must request \
additional work.

---
## Inputs
1. Question to answer:
{question}

2. Collected Job Outputs (from junior models):
{extractions}

---
First think step-by-step and then answer the question using the exact format below.

## ANSWER GUIDELINES
1. **Determine if the collected Job Outputs provide enough trustworthy, \
consistent evidence to confidently answer the question.**
   - If the data is incomplete or contradictory, do NOT guess. Instead, specify what is missing.
   - If the evidence is sufficient, provide a final answer.

2. **Be conservative.** When in doubt, ask for more information.

3. **Address conflicts.** If multiple jobs give different answers, rely on \
whichever is best supported by a valid "explanation" and "citation".

4. **Required JSON Output**: You must output a JSON object with these keys:
   - "decision": Must be either "provide_final_answer" OR "request_additional_info".
   - "explanation": A short statement about how you arrived at your conclusion \
or what is still missing.
   - "answer": The final answer string if "decision"="provide_final_answer", \
or null otherwise. Should contain ONLY the final answer, without additional \
calculations or explanations (good: "0.56"; bad: "The ratio is 1-0.27*2 = 0.56").
{flavor_rules}
Here is the template for your JSON response (with no extra text outside the JSON):

<think step-by-step here>
```json
{{
"decision": "...",
"explanation": "...",
"answer": "... or null"
}}
```

Now, carefully inspect the question, think step-by-step and perform any \
calculations before outputting the JSON object."""

SYNTHESIS_FLAVOR_RULES = {
    "finance": "",
    "multiple_choice": (
        '   - If answer choices are provided, your "answer" must **exactly** '
        "match one of the answer choices.\n"
    ),
    "span": (
        '   - Your "answer" must be a text span pulled directly from the job '
        "output citations; do not paraphrase.\n"
    ),
}

FORCED_SYNTHESIS_SUFFIX = """

This is the final round: you cannot request additional work. Set "decision" to \
"provide_final_answer" and give your best answer from the evidence above."""

SCRATCHPAD_SUFFIX = """

Also include a "scratchpad" key in your JSON recording any facts learned this \
round that later rounds should keep in mind."""

EMPTY_FINDINGS_SENTINEL = "No job returned relevant information."


def build_decompose_prompt(
    query: str,
    round_index: int,
    strategy_state: RoundStrategy,
    prior_round_summary: str = "",
    flavor: str = "finance",
    pages_per_chunk: int | None = None,
    max_instructions: int = 16,
    max_samples: int = 16,
    samples_per_task: int | None = None,
) -> list[ChatMessage]:
    """Render the per-flavor decomposition request; never includes raw context."""
    if flavor not in FLAVORS:
        raise ValueError(f"unknown dataset flavor {flavor!r}")
    parts = [
        DECOMPOSE_HEADER_TEMPLATE.format(round_index=round_index),
        DECOMPOSE_GUIDANCE[flavor],
        PLAN_SCHEMA_BLOCK.format(
            kinds=", ".join(f'"{k}"' for k in STRATEGY_KINDS),
            max_instructions=max_instructions,
            max_samples=max_samples,
        ),
    ]
    if pages_per_chunk is not None:
        parts.append(
            PAGES_PER_CHUNK_INSTRUCTION.format(pages_per_chunk=pages_per_chunk)
        )
    if samples_per_task is not None:
        parts.append(f'Set "samples_per_task" to {samples_per_task}.')
    parts.append(f"### Question\n{query}")
    state = strategy_state.render()
    if state:
        parts.append(state)
    if prior_round_summary:
        parts.append(f"### Previous rounds\n{prior_round_summary}")
    return [ChatMessage("user", "\n\n".join(parts))]


def expand_plan(
    plan: DecompositionPlan, context: Sequence[str]
) -> list[JobManifest]:
    """Expand a plan into the instructions x chunks x samples manifest cross product.

    Manifests are ordered lexicographically by (task_id, chunk_id, sample_index)
    and job_index follows that order.
    """
    if not context:
        raise ValueError("context must be non-empty")
    chunks: list[Chunk] = []
    for doc_index, doc in enumerate(context):
        chunks.extend(plan.chunking.split(doc, doc_index))
    if plan.chunk_filter is not None:
        by_id = {c.chunk_id: c for c in chunks}
        unknown = [cid for cid in plan.chunk_filter if cid not in by_id]
        if unknown:
            raise PlanValidationError(
                f"chunk_filter references unknown chunk ids: {unknown}"
            )
        wanted = set(plan.chunk_filter)
        chunks = [c for c in chunks if c.chunk_id in wanted]

    keyed = sorted(
        (
            (task.task_id, chunk.chunk_id, sample, task, chunk)
            for task in plan.instructions
            for chunk in chunks
            for sample in range(plan.samples_per_task)
        ),
        key=lambda entry: entry[:3],
    )
    return [
        JobManifest(
            job_index=index,
            task_id=task.task_id,
            chunk_id=chunk.chunk_id,
            chunk=chunk.text,
            task=task.instruction,
            advice=task.advice,
            sample_index=sample,
        )
        for index, (_, _, sample, task, chunk) in enumerate(keyed)
    ]


def execute_jobs(
    local_client: LMClient,
    manifests: Sequence[JobManifest],
    worker_prompt_template: str = WORKER_PROMPT_TEMPLATE,
    batch_size: int = 8,
    local_temperature: float = 1e-5,
    ledger: CostLedger | None = None,
    json_retries: int = 3,
) -> list[JobOutput]:
    """Run all jobs with up to batch_size in flight; outputs follow manifest order.

    A job whose reply never parses as JSON becomes an abstention rather than a
    run failure; client-level errors (transport, script exhaustion) propagate.
    """
    if not manifests:
        raise ValueError("manifests must be non-empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    def run_one(manifest: JobManifest) -> JobOutput:
        prompt = worker_prompt_template.format(
            context=manifest.chunk,
            task=manifest.task,
            advice=manifest.advice or "",
        )
        request = CompletionRequest(
            messages=(ChatMessage("user", prompt),), temperature=local_temperature
        )
        record = (
            (lambda response: ledger.record(ROLE_LOCAL, response.usage))
            if ledger is not None
            else None
        )
        try:
            obj, _ = complete_json(
                local_client, request, retries=json_retries, on_response=record
            )
        except JsonExtractionError:
            return JobOutput.from_fields(
                manifest.job_index, "Worker reply was not valid JSON.", None, None
            )
        if not isinstance(obj, dict):
            return JobOutput.from_fields(
                manifest.job_index, "Worker reply was not a JSON object.", None, None
            )
        return JobOutput.from_fields(
            manifest.job_index,
            obj.get("explanation"),
            obj.get("citation"),
            obj.get("answer"),
        )

    with ThreadPoolExecutor(max_workers=min(batch_size, len(manifests))) as pool:
        return list(pool.map(run_one, manifests))


def filter_abstentions(
    outputs: Sequence[JobOutput],
) -> tuple[list[JobOutput], RoundReport]:
    """Drop abstaining outputs, preserving order, and report the keep counts."""
    kept = [output for output in outputs if not output.abstained]
    return kept, RoundReport(jobs_created=len(outputs), jobs_kept=len(kept))


def format_for_synthesis(
    kept: Sequence[JobOutput], manifests: Sequence[JobManifest]
) -> str:
    """Render kept outputs into the deterministic findings block sent to the remote."""
    if not kept:
        return EMPTY_FINDINGS_SENTINEL
    by_index = {m.job_index: m for m in manifests}
    entries = []
    for output in kept:
        manifest = by_index[output.job_index]
        entries.append(
            f"### Job {output.job_index} (task {manifest.task_id}, chunk {manifest.chunk_id})\n"
            f"Instruction: {manifest.task}\n"
            f"Explanation: {output.explanation}\n"
            f"Citation: {output.citation or 'None'}\n"
            f"Answer: {output.answer}"
        )
    return "\n\n".join(entries)


def build_synthesis_prompt(
    findings: str,
    query: str,
    is_final_round: bool,
    flavor: str = "finance",
    request_scratchpad: bool = False,
) -> str:
    if flavor not in FLAVORS:
        raise ValueError(f"unknown dataset flavor {flavor!r}")
    prompt = SYNTHESIS_PROMPT_TEMPLATE.format(
        question=query,
        extractions=findings,
        flavor_rules=SYNTHESIS_FLAVOR_RULES[flavor],
    )
    if is_final_round:
        prompt += FORCED_SYNTHESIS_SUFFIX
    elif request_scratchpad:
        prompt += SCRATCHPAD_SUFFIX
    return prompt


def interpret_synthesis_object(obj: object, is_final_round: bool) -> SynthesisDecision:
    if not isinstance(obj, dict):
        raise ProtocolError("synthesis reply must be a JSON object")
    decision = obj.get("decision")
    if decision == "need more information":  # span-flavor alias
        decision = "request_additional_info"
    if decision not in ("provide_final_answer", "request_additional_info"):
        raise ProtocolError(f"unknown synthesis decision {decision!r}")
    answer = obj.get("answer")
    if decision == "provide_final_answer":
        if answer is None:
            raise ProtocolError("provide_final_answer reply missing an answer")
        answer = str(answer)
    else:
        if is_final_round:
            raise ProtocolError("remote requested more work on the forced final round")
        answer = None
    scratchpad = obj.get("scratchpad")
    return SynthesisDecision(
        decision=decision,
        explanation=str(obj.get("explanation", "")),
        answer=answer,
        scratchpad=str(scratchpad) if scratchpad is not None else None,
    )


def synthesize(
    remote_client: LMClient,
    findings: str,
    query: str,
    is_final_round: bool,
    flavor: str = "finance",
    request_scratchpad: bool = False,
    temperature: float = 0.0,
    json_retries: int = 3,
    on_response: Callable[[CompletionResponse], None] | None = None,
) -> SynthesisDecision:
    """Ask the remote model whether the findings suffice, forcing an answer when final."""
    prompt = build_synthesis_prompt(
        findings, query, is_final_round, flavor, request_scratchpad
    )
    obj, _ = complete_json(
        remote_client,
        CompletionRequest(
            messages=(ChatMessage("user", prompt),), temperature=temperature
        ),
        retries=json_retries,
        on_response=on_response,
    )
    return interpret_synthesis_object(obj, is_final_round)


@dataclass(frozen=True)
class MinionsConfig:
    max_rounds: int = 3
    round_strategy: str = "retries"  # "retries" | "scratchpad"
    batch_size: int = 8
    flavor: str = "finance"
    remote_temperature: float = 0.0
    local_temperature: float | None = None  # default depends on flavor
    pages_per_chunk: int | None = None
    samples_per_task: int | None = None  # override injected into prompt and plan
    max_instructions: int = 16
    max_samples: int = 16
    summary_char_budget: int = 4000
    json_retries: int = 3
    plan_retries: int = 3

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown dataset flavor {self.flavor!r}")
        if self.round_strategy not in ("retries", "scratchpad"):
            raise ValueError(f"unknown round strategy {self.round_strategy!r}")

    @property
    def effective_local_temperature(self) -> float:
        if self.local_temperature is not None:
            return self.local_temperature
        return LOCAL_TEMPERATURE_BY_FLAVOR[self.flavor]


def _request_plan(
    remote_client: LMClient,
    messages: list[ChatMessage],
    round_index: int,
    config: MinionsConfig,
    known_chunk_ids: set[str],
    on_response: Callable[[CompletionResponse], None],
) -> tuple[DecompositionPlan, str]:
    """Request a plan, re-prompting with the validation message on rejection."""
    conversation = list(messages)
    for attempt in range(config.plan_retries + 1):
        obj, response = complete_json(
            remote_client,
            CompletionRequest(
                messages=tuple(conversation), temperature=config.remote_temperature
            ),
            retries=config.json_retries,
            on_response=on_response,
        )
        try:
            plan = plan_from_json_obj(
                obj, round_index, config.max_instructions, config.max_samples
            )
            if plan.chunk_filter is not None:
                stale = [c for c in plan.chunk_filter if c not in known_chunk_ids]
                if stale:
                    raise PlanValidationError(
                        f"chunk_filter names chunk ids not seen in prior rounds: {stale}"
                    )
            return plan, response.text
        except PlanValidationError as exc:
            if attempt == config.plan_retries:
                raise
            conversation.extend(
                (
                    ChatMessage("assistant", response.text),
                    ChatMessage(
                        "user",
                        f"The plan was rejected: {exc}. Reply with a corrected JSON plan.",
                    ),
                )
            )
    raise AssertionError("unreachable")


def _round_summary(
    plan: DecompositionPlan,
    manifests: Sequence[JobManifest],
    kept: Sequence[JobOutput],
    report: RoundReport,
) -> str:
    by_index = {m.job_index: m for m in manifests}
    lines = [
        f"Round {plan.round_index}: created {report.jobs_created} jobs "
        f"({plan.chunking.kind} chunking), kept {report.jobs_kept}."
    ]
    seen_ids = sorted({m.chunk_id for m in manifests})
    lines.append(f"Chunk ids available for chunk_filter: {', '.join(seen_ids)}")
    for output in kept:
        manifest = by_index[output.job_index]
        lines.append(
            f"- [task {manifest.task_id} | chunk {manifest.chunk_id}] {output.answer}"
        )
    return "\n".join(lines)


def _clip_summaries(summaries: Sequence[str], budget: int) -> str:
    """Join per-round summaries, dropping the oldest rounds to stay under budget."""
    kept = list(summaries)
    while len(kept) > 1 and sum(len(s) + 2 for s in kept) > budget:
        kept.pop(0)
    text = "\n\n".join(kept)
    return text[-budget:] if len(text) > budget else text


def run_minions(
    local_client: LMClient,
    remote_client: LMClient,
    task: TaskInstance,
    config: MinionsConfig = MinionsConfig(),
) -> ProtocolResult:
    """Loop decompose -> expand -> execute -> filter -> synthesize until answered.

    Plan and synthesis usage is attributed to the remote role, job execution to
    the local role. On the final permitted round the synthesis prompt forces an
    answer. Any unrecoverable step error yields terminated_by="error" with the
    partial transcript preserved.
    """
    ledger = CostLedger()
    events: list[TranscriptEvent] = []
    query = query_with_options(task)

    def on_remote(response: CompletionResponse) -> None:
        ledger.record(ROLE_REMOTE, response.usage)

    strategy = RoundStrategy(kind=config.round_strategy)
    summaries: list[str] = []
    known_chunk_ids: set[str] = set()
    rounds_used = 1
    try:
        for round_index in range(1, config.max_rounds + 1):
            rounds_used = round_index
            is_final = round_index == config.max_rounds

            messages = build_decompose_prompt(
                query,
                round_index,
                strategy,
                _clip_summaries(summaries, config.summary_char_budget),
                flavor=config.flavor,
                pages_per_chunk=config.pages_per_chunk,
                max_instructions=config.max_instructions,
                max_samples=config.max_samples,
                samples_per_task=config.samples_per_task,
            )
            plan, raw_plan_text = _request_plan(
                remote_client, messages, round_index, config, known_chunk_ids, on_remote
            )
            if config.samples_per_task is not None:
                plan = replace(plan, samples_per_task=config.samples_per_task)
            events.append(event("remote_message", raw_plan_text))
            events.append(event("plan", plan.canonical_json()))

            manifests = expand_plan(plan, task.context)
            known_chunk_ids.update(m.chunk_id for m in manifests)
            events.append(
                event(
                    "job_batch",
                    {
                        "round": round_index,
                        "jobs_created": len(manifests),
                        "chunk_ids": sorted({m.chunk_id for m in manifests}),
                    },
                )
            )

            outputs = execute_jobs(
                local_client,
                manifests,
                batch_size=config.batch_size,
                local_temperature=config.effective_local_temperature,
                ledger=ledger,
                json_retries=config.json_retries,
            )
            kept, report = filter_abstentions(outputs)
            events.append(
                event(
                    "round_report",
                    {
                        "round": round_index,
                        "jobs_created": report.jobs_created,
                        "jobs_kept": report.jobs_kept,
                        "abstain_fraction": str(report.abstain_fraction),
                    },
                )
            )

            findings = format_for_synthesis(kept, manifests)
            decision = synthesize(
                remote_client,
                findings,
                query,
                is_final_round=is_final,
                flavor=config.flavor,
                request_scratchpad=config.round_strategy == "scratchpad",
                temperature=config.remote_temperature,
                json_retries=config.json_retries,
                on_response=on_remote,
            )
            events.append(
                event(
                    "synthesis",
                    json.dumps(
                        decision.to_json_dict(), sort_keys=True, separators=(",", ":")
                    ),
                )
            )

            if decision.decision == "provide_final_answer":
                return ProtocolResult(
                    final_answer=decision.answer,
                    rounds_used=round_index,
                    ledger=ledger,
                    transcript=tuple(events),
                    terminated_by=(
                        TERMINATED_MAX_ROUNDS if is_final else TERMINATED_FINAL_ANSWER
                    ),
                )
            strategy = strategy.after_round(decision, round_index)
            summaries.append(_round_summary(plan, manifests, kept, report))
    except (LMClientError, PlanValidationError) as exc:
        events.append(event("error", str(exc)))
        return ProtocolResult(
            final_answer=None,
            rounds_used=rounds_used,
            ledger=ledger,
            transcript=tuple(events),
            terminated_by=TERMINATED_ERROR,
        )
    raise AssertionError("unreachable: the forced final round returns or raises")
