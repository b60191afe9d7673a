"""Analytic roofline latency models for the three serving patterns.

Prefill is compute-bound (flops / peak_flops); single-stream decode is
memory-bound (bytes / peak_mem_bw). Batched local job decoding is treated as
compute-bound instead, which is what makes fan-out cheap on-device. All outputs
are seconds.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class HardwareSpec:
    peak_flops: float
    peak_mem_bw: float  # bytes/second

    def __post_init__(self) -> None:
        if self.peak_flops <= 0 or self.peak_mem_bw <= 0:
            raise ValueError("hardware peaks must be > 0")


@dataclass(frozen=True)
class ModelShape:
    layers: int
    hidden: int

    def __post_init__(self) -> None:
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be >= 1")

    @property
    def param_bytes(self) -> float:
        # 12·L·d² non-embedding params at 2 bytes each; numerically this also
        # equals the per-token matmul flops (24·L·d²), which the decode-compute
        # formula relies on.
        return 24.0 * self.layers * self.hidden**2


@dataclass(frozen=True)
class WorkloadProfile:
    """Token counts and fan-out parameters for one decomposition round."""

    context_tokens: int
    local_decode_tokens: int
    remote_decode_tokens: int
    chunks: int = 1
    instructions: int = 1
    samples: int = 1
    keep_fraction: float = 1.0

    def __post_init__(self) -> None:
        for name in (
            "context_tokens",
            "local_decode_tokens",
            "remote_decode_tokens",
            "chunks",
            "instructions",
            "samples",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must be in [0, 1]")

    @property
    def jobs(self) -> int:
        return self.chunks * self.instructions * self.samples

    @property
    def answer_ratio(self) -> float:
        """Kept local output tokens as a fraction of the context length."""
        if self.context_tokens == 0:
            raise ValueError("answer_ratio undefined for an empty context")
        return (
            self.local_decode_tokens * self.keep_fraction * self.jobs
        ) / self.context_tokens


@dataclass(frozen=True)
class LatencySplit:
    local_seconds: float
    remote_seconds: float

    @property
    def total_seconds(self) -> float:
        return self.local_seconds + self.remote_seconds


def _prefill_seconds(
    hw: HardwareSpec, shape: ModelShape, n_tokens: float, attention_divisor: float = 1.0
) -> float:
    """Compute-bound prefill: (n·P + 2·L·d·n²/divisor) / F."""
    p = shape.param_bytes
    return (
        n_tokens * p
        + 2.0 * shape.layers * shape.hidden * n_tokens**2 / attention_divisor
    ) / hw.peak_flops


def _decode_io_seconds(
    hw: HardwareSpec, shape: ModelShape, context_tokens: float, decode_tokens: float
) -> float:
    """Memory-bound decode: n_out·(P + 4·L·d·n) / M."""
    p = shape.param_bytes
    return (
        decode_tokens * (p + 4.0 * shape.layers * shape.hidden * context_tokens)
    ) / hw.peak_mem_bw


def latency_remote_only(
    hw: HardwareSpec, shape: ModelShape, context_tokens: float, decode_tokens: float
) -> float:
    """Seconds to prefill the whole context and decode the reply on one model."""
    return _prefill_seconds(hw, shape, context_tokens) + _decode_io_seconds(
        hw, shape, context_tokens, decode_tokens
    )


def latency_minion(
    hw_local: HardwareSpec,
    shape_local: ModelShape,
    hw_remote: HardwareSpec,
    shape_remote: ModelShape,
    context_tokens: int,
    local_decode_tokens: int,
    remote_decode_tokens: int,
    rounds: int = 1,
) -> LatencySplit:
    """Chat protocol: local reads the context, remote only reads local's reply."""
    local = latency_remote_only(hw_local, shape_local, context_tokens, local_decode_tokens)
    remote = latency_remote_only(
        hw_remote, shape_remote, local_decode_tokens, remote_decode_tokens
    )
    return LatencySplit(local * rounds, remote * rounds)


def latency_minions(
    hw_local: HardwareSpec,
    shape_local: ModelShape,
    hw_remote: HardwareSpec,
    shape_remote: ModelShape,
    profile: WorkloadProfile,
    rounds: int = 1,
) -> LatencySplit:
    """Decomposition protocol: chunked local prefill, batched compute-bound decode.

    The remote side prefills only the kept job outputs
    (keep_fraction·chunks·instructions·samples·local_decode_tokens tokens).
    """
    if profile.chunks < 1:
        raise ValueError("chunks must be >= 1")
    n = float(profile.context_tokens)
    c = float(profile.chunks)
    p_l = shape_local.param_bytes
    kept_decode = profile.local_decode_tokens * profile.keep_fraction * profile.jobs

    local_prefill = _prefill_seconds(hw_local, shape_local, n, attention_divisor=c)
    local_decode = (
        kept_decode * (p_l + 2.0 * shape_local.layers * shape_local.hidden * n / c)
    ) / hw_local.peak_flops

    remote = latency_remote_only(
        hw_remote, shape_remote, kept_decode, profile.remote_decode_tokens
    )
    return LatencySplit((local_prefill + local_decode) * rounds, remote * rounds)


def ratio_bound_from_parts(
    answer_ratio: float, compute_ratio: float, shape_ratio: float
) -> float:
    """Bound 1 + (1 + a)·(F_remote/F_local)·shape_ratio on the latency ratio."""
    return 1.0 + (1.0 + answer_ratio) * compute_ratio * shape_ratio


def latency_ratio_bound(
    answer_ratio: float,
    hw_local: HardwareSpec,
    hw_remote: HardwareSpec,
    shape_local: ModelShape,
    shape_remote: ModelShape,
) -> float:
    """Upper bound on (decomposed total latency) / (remote-only latency)."""
    if not 0.0 < answer_ratio < 1.0:
        raise ValueError("answer_ratio must lie in (0, 1)")
    return ratio_bound_from_parts(
        answer_ratio,
        hw_remote.peak_flops / hw_local.peak_flops,
        (shape_local.layers * shape_local.hidden)
        / (shape_remote.layers * shape_remote.hidden),
    )


def verify_bound(
    profile: WorkloadProfile,
    hw_local: HardwareSpec,
    hw_remote: HardwareSpec,
    shape_local: ModelShape,
    shape_remote: ModelShape,
) -> bool:
    """Check the ratio bound on one concrete configuration."""
    split = latency_minions(hw_local, shape_local, hw_remote, shape_remote, profile)
    baseline = latency_remote_only(
        hw_remote, shape_remote, profile.context_tokens, profile.remote_decode_tokens
    )
    bound = latency_ratio_bound(
        profile.answer_ratio, hw_local, hw_remote, shape_local, shape_remote
    )
    return split.total_seconds / baseline <= bound
