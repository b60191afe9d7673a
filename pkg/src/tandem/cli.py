"""Command-line entry point: run suites, sweeps, the latency table, and dataset checks."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import Any, Sequence

from .core import usd_str
from .harness import (
    ConfigError,
    DatasetError,
    PROTOCOLS,
    RECORD_CSV_COLUMNS,
    SWEEP_AXES,
    SWEEP_CSV_COLUMNS,
    SuiteConfig,
    fraction_str,
    load_dataset,
    records_to_rows,
    run_suite,
    sweep,
    write_csv,
)
from .latency import (
    HardwareSpec,
    LatencySplit,
    ModelShape,
    WorkloadProfile,
    latency_minions,
    latency_ratio_bound,
    latency_remote_only,
)
from .llm import HttpLM, MockLM, MockScript
from .minion import MinionConfig
from .minions import FLAVORS, MinionsConfig
from .retrieval import RagConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tandem",
        description="Local-remote language model orchestration and evaluation",
    )
    parser.add_argument("--config", help="JSON config file; CLI flags override its keys")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run one protocol over a JSONL dataset")
    _add_run_flags(run_parser)

    sweep_parser = sub.add_parser("sweep", help="run a suite per value of one knob")
    _add_run_flags(sweep_parser)
    sweep_parser.add_argument("--axis", choices=SWEEP_AXES)
    sweep_parser.add_argument("--values", help="comma-separated integers, e.g. 1,3,5")

    latency_parser = sub.add_parser("latency", help="print the analytic latency table")
    for flag, help_text in (
        ("--f-l", "local peak flops/sec"),
        ("--m-l", "local peak memory bandwidth bytes/sec"),
        ("--f-r", "remote peak flops/sec"),
        ("--m-r", "remote peak memory bandwidth bytes/sec"),
    ):
        latency_parser.add_argument(flag, type=float, required=True, help=help_text)
    for flag, help_text in (
        ("--l-l", "local layers"),
        ("--d-l", "local hidden size"),
        ("--l-r", "remote layers"),
        ("--d-r", "remote hidden size"),
        ("--n", "context tokens"),
        ("--n-out-local", "local decode tokens per job"),
        ("--n-out-remote", "remote decode tokens"),
        ("--c", "chunks"),
        ("--k", "instructions"),
        ("--s", "samples per task"),
    ):
        latency_parser.add_argument(flag, type=int, required=True, help=help_text)
    latency_parser.add_argument("--p", type=float, required=True, help="keep fraction")
    latency_parser.add_argument("--rounds", type=int, default=1)

    validate_parser = sub.add_parser("validate-dataset", help="check a JSONL dataset")
    validate_parser.add_argument("--dataset", required=True)
    return parser


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--protocol", choices=PROTOCOLS)
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--local-url", help="OpenAI-compatible endpoint for the local model")
    parser.add_argument("--remote-url", help="OpenAI-compatible endpoint for the remote model")
    parser.add_argument("--local-model", help="model name sent to the local endpoint")
    parser.add_argument("--remote-model", help="model name sent to the remote endpoint")
    parser.add_argument("--mock-script", help="JSON mock script path (offline runs)")
    parser.add_argument("--max-rounds", type=int)
    parser.add_argument("--round-strategy", choices=("retries", "scratchpad"))
    parser.add_argument("--samples", type=int, help="samples per task override")
    parser.add_argument("--pages-per-chunk", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--rag-k", type=int)
    parser.add_argument("--rag-retriever", choices=("bm25", "embedding"))
    parser.add_argument("--flavor", choices=FLAVORS)
    parser.add_argument("--score-mode", choices=("exact", "span"))
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--out", help="CSV output path")


def _load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as handle:
        obj = json.load(handle)
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a flat JSON object")
    return {key.replace("-", "_"): value for key, value in obj.items()}


def _setting(args: argparse.Namespace, file_config: dict[str, Any], key: str, default: Any = None) -> Any:
    """Config precedence: CLI flag, then config-file key, then the default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in file_config:
        return file_config[key]
    return default


def _suite_config(args: argparse.Namespace, file_config: dict[str, Any]) -> SuiteConfig:
    protocol = _setting(args, file_config, "protocol")
    if protocol is None:
        raise ConfigError("--protocol is required (flag or config file)")
    minion = MinionConfig()
    minions = MinionsConfig()
    rag = RagConfig()

    max_rounds = _setting(args, file_config, "max_rounds")
    if max_rounds is not None:
        minion = replace(minion, max_rounds=int(max_rounds))
        minions = replace(minions, max_rounds=int(max_rounds))
    strategy = _setting(args, file_config, "round_strategy")
    if strategy is not None:
        minions = replace(minions, round_strategy=strategy)
    samples = _setting(args, file_config, "samples")
    if samples is not None:
        minions = replace(minions, samples_per_task=int(samples))
    pages = _setting(args, file_config, "pages_per_chunk")
    if pages is not None:
        minions = replace(minions, pages_per_chunk=int(pages))
    batch = _setting(args, file_config, "batch_size")
    if batch is not None:
        minions = replace(minions, batch_size=int(batch))
    flavor = _setting(args, file_config, "flavor")
    if flavor is not None:
        minions = replace(minions, flavor=flavor)
    rag_k = _setting(args, file_config, "rag_k")
    if rag_k is not None:
        rag = replace(rag, top_k=int(rag_k))
    retriever = _setting(args, file_config, "rag_retriever")
    if retriever is not None:
        rag = replace(rag, retriever=retriever)

    return SuiteConfig(
        protocol=protocol,
        score_mode=_setting(args, file_config, "score_mode", "exact"),
        parallelism=int(_setting(args, file_config, "parallelism", 1)),
        minion=minion,
        minions=minions,
        rag=rag,
    )


def _client_factory(args: argparse.Namespace, file_config: dict[str, Any]):
    mock_path = _setting(args, file_config, "mock_script")
    if mock_path:
        with open(mock_path, "r", encoding="utf-8") as handle:
            spec = json.load(handle)
        local_spec = spec.get("local")
        remote_spec = spec.get("remote")

        def make_mocks():
            local = MockLM(MockScript.from_dict(local_spec)) if local_spec else None
            remote = MockLM(MockScript.from_dict(remote_spec)) if remote_spec else None
            return local, remote

        return make_mocks

    local_url = _setting(args, file_config, "local_url")
    remote_url = _setting(args, file_config, "remote_url")
    if not local_url and not remote_url:
        raise ConfigError("provide --mock-script, or --local-url/--remote-url")
    local = (
        HttpLM(local_url, model_name=_setting(args, file_config, "local_model", ""))
        if local_url
        else None
    )
    remote = (
        HttpLM(remote_url, model_name=_setting(args, file_config, "remote_model", ""))
        if remote_url
        else None
    )
    return lambda: (local, remote)


def _cmd_run(args: argparse.Namespace, file_config: dict[str, Any]) -> int:
    config = _suite_config(args, file_config)
    dataset = load_dataset(args.dataset)
    records, report = run_suite(dataset, config, _client_factory(args, file_config))
    out = _setting(args, file_config, "out")
    if out:
        write_csv(records_to_rows(records), out, RECORD_CSV_COLUMNS)
    print(
        f"protocol={config.protocol} tasks={report.count} "
        f"accuracy={fraction_str(report.accuracy, 4)} "
        f"mean_usd={usd_str(report.total_usd / report.count)} "
        f"mean_remote_prefill={fraction_str(report.mean_remote_prefill, 1)} "
        f"mean_remote_decode={fraction_str(report.mean_remote_decode, 1)} "
        f"mean_rounds={fraction_str(report.mean_rounds, 2)}"
    )
    if out:
        print(f"records written to {out}")
    return 0


def _cmd_sweep(args: argparse.Namespace, file_config: dict[str, Any]) -> int:
    axis = _setting(args, file_config, "axis")
    raw_values = _setting(args, file_config, "values")
    if not axis or not raw_values:
        raise ConfigError("sweep requires --axis and --values")
    if isinstance(raw_values, str):
        values = [int(v) for v in raw_values.split(",") if v.strip()]
    else:
        values = [int(v) for v in raw_values]
    config = _suite_config(args, file_config)
    dataset = load_dataset(args.dataset)
    rows = sweep(dataset, config, axis, values, _client_factory(args, file_config))
    out = _setting(args, file_config, "out")
    if out:
        write_csv(rows, out, SWEEP_CSV_COLUMNS)
        print(f"sweep written to {out}")
    else:
        print(",".join(SWEEP_CSV_COLUMNS))
        for row in rows:
            print(",".join(row[c] for c in SWEEP_CSV_COLUMNS))
    return 0


def _cmd_latency(args: argparse.Namespace) -> int:
    hw_local = HardwareSpec(args.f_l, args.m_l)
    hw_remote = HardwareSpec(args.f_r, args.m_r)
    shape_local = ModelShape(args.l_l, args.d_l)
    shape_remote = ModelShape(args.l_r, args.d_r)
    profile = WorkloadProfile(
        context_tokens=args.n,
        local_decode_tokens=args.n_out_local,
        remote_decode_tokens=args.n_out_remote,
        chunks=args.c,
        instructions=args.k,
        samples=args.s,
        keep_fraction=args.p,
    )
    baseline = latency_remote_only(
        hw_remote, shape_remote, profile.context_tokens, profile.remote_decode_tokens
    )
    split: LatencySplit = latency_minions(
        hw_local, shape_local, hw_remote, shape_remote, profile, rounds=args.rounds
    )
    a = profile.answer_ratio
    if 0.0 < a < 1.0:
        bound = latency_ratio_bound(a, hw_local, hw_remote, shape_local, shape_remote)
        bound_text = f"{bound * args.rounds:.4f}"
    else:
        bound_text = "n/a (answer ratio outside (0, 1))"
    rows = [
        ("T_remote_only (s)", f"{baseline:.4f}"),
        ("T_local (s)", f"{split.local_seconds:.4f}"),
        ("T_remote (s)", f"{split.remote_seconds:.4f}"),
        ("ratio", f"{split.total_seconds / baseline:.4f}"),
        ("bound", bound_text),
    ]
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        print(f"{label:<{width}}  {value}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    try:
        tasks = load_dataset(args.dataset)
    except DatasetError as exc:
        print(f"INVALID: {exc}")
        return 1
    print(f"OK: {len(tasks)} task(s)")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        file_config = _load_config_file(args.config)
        if args.command == "run":
            return _cmd_run(args, file_config)
        if args.command == "sweep":
            return _cmd_sweep(args, file_config)
        if args.command == "latency":
            return _cmd_latency(args)
        return _cmd_validate(args)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
