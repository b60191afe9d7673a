"""Shared builders for scripted mock model replies and random latency configs."""

from __future__ import annotations

import json
import random
from typing import Any

from tandem import TaskInstance
from tandem.latency import HardwareSpec, ModelShape, WorkloadProfile


def fenced(obj: Any) -> str:
    """Wrap a JSON value in the fenced block the prompts mandate."""
    return "```json\n" + json.dumps(obj) + "\n```"


def worker_reply(explanation: str = "found it", citation: str = "snippet",
                 answer: str = "42") -> str:
    return json.dumps(
        {"explanation": explanation, "citation": citation, "answer": answer}
    )


def abstain_reply() -> str:
    return json.dumps({"explanation": "None", "citation": "None", "answer": "None"})


def plan_reply(
    instructions: list[dict],
    strategy: str = "by_page",
    params: dict | None = None,
    samples_per_task: int = 1,
    chunk_filter: list[str] | None = None,
) -> str:
    plan: dict = {
        "instructions": instructions,
        "chunking": {"strategy": strategy, "params": params or {}},
        "samples_per_task": samples_per_task,
    }
    if chunk_filter is not None:
        plan["chunk_filter"] = chunk_filter
    return fenced(plan)


def synthesis_reply(decision: str, answer: str | None = None,
                    explanation: str = "synthesized", **extra: Any) -> str:
    return fenced(
        {"decision": decision, "explanation": explanation, "answer": answer, **extra}
    )


def minion_message_reply(message: str) -> str:
    return fenced({"message": message})


def minion_request_reply(message: str) -> str:
    return fenced({"decision": "request_additional_info", "message": message})


def minion_final_reply(answer: str) -> str:
    return fenced({"decision": "provide_final_answer", "answer": answer})


def make_task(
    context: tuple[str, ...] = ("p1\fp2\fp3",),
    query: str = "what is the total?",
    answer: str = "42",
    options: tuple[str, ...] | None = None,
    task_id: str = "t1",
    doc_type: str = "report",
) -> TaskInstance:
    return TaskInstance(
        id=task_id,
        context=context,
        query=query,
        gold_answer=answer,
        options=options,
        doc_type=doc_type,
    )


def random_latency_config(rng: random.Random):
    """One valid local-remote deployment: local model no wider than the remote,
    with the kept local output well below the context length."""
    while True:
        shape_local = ModelShape(rng.randint(8, 48), rng.choice([1024, 2048, 3072, 4096]))
        shape_remote = ModelShape(
            rng.randint(48, 160), rng.choice([8192, 12288, 16384, 20480])
        )
        hw_local = HardwareSpec(rng.uniform(5e13, 5e14), rng.uniform(5e11, 3e12))
        hw_remote = HardwareSpec(rng.uniform(1e15, 1.6e16), rng.uniform(1e13, 5e13))
        profile = WorkloadProfile(
            context_tokens=rng.randint(20_000, 500_000),
            local_decode_tokens=rng.randint(16, 1024),
            remote_decode_tokens=rng.randint(16, 2048),
            chunks=rng.randint(1, 64),
            instructions=rng.randint(1, 16),
            samples=rng.randint(1, 16),
            keep_fraction=rng.uniform(0.05, 1.0),
        )
        if 0.01 < profile.answer_ratio < 0.99:
            return profile, hw_local, hw_remote, shape_local, shape_remote
