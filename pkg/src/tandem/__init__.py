"""Tandem: orchestration of paired local and remote language models.

Two collaboration protocols (a free-form chat loop and a decompose/execute/
aggregate loop), a retrieval baseline, analytic cost and latency models, and an
evaluation harness, all runnable offline against deterministic mock models.
"""

from .core import (
    ChatMessage,
    CostLedger,
    CostRates,
    DEFAULT_COST_RATES,
    JobManifest,
    JobOutput,
    ProtocolResult,
    TaskInstance,
    TokenUsage,
    cost_usd,
    normalize_answer,
    record_usage,
)
from .chunking import (
    Chunk,
    ChunkingStrategy,
    chunk_by_chars,
    chunk_by_page,
    chunk_by_section,
    chunk_on_multiple_pages,
)
from .llm import (
    CompletionRequest,
    CompletionResponse,
    HttpLM,
    MockLM,
    MockScript,
    estimate_tokens,
    extract_json_block,
)
from .minion import MinionConfig, run_minion
from .minions import (
    DecompositionPlan,
    MinionsConfig,
    execute_jobs,
    expand_plan,
    filter_abstentions,
    format_for_synthesis,
    parse_plan,
    run_minions,
    synthesize,
)
from .latency import (
    HardwareSpec,
    ModelShape,
    WorkloadProfile,
    latency_minion,
    latency_minions,
    latency_ratio_bound,
    latency_remote_only,
    verify_bound,
)
from .retrieval import (
    Bm25Index,
    HashingEmbedder,
    RagConfig,
    bm25_top_k,
    build_bm25,
    embed_top_k,
    run_rag,
)
from .harness import (
    AggregateReport,
    RunRecord,
    SuiteConfig,
    load_dataset,
    run_suite,
    score,
    sweep,
)

__version__ = "0.1.0"
