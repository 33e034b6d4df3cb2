"""Pure metric derivations over collected records.

All wei and gas arithmetic stays in exact integers; floats appear only at
the final ratio or display conversion.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

from .records import (
    WEI_PER_ETH,
    WEI_PER_GWEI,
    BlockRecord,
    MempoolSnapshot,
    MetricPoint,
    TxRecord,
)

# Registry of metric names this system emits, with their fixed units.
METRIC_REGISTRY: dict[str, str] = {
    "rpc.latency_ms": "ms",
    "rpc.success": "ratio",
    "chain.head": "blocks",
    "block.gas_utilization": "ratio",
    "block.tx_count": "count",
    "block.eth_transferred_wei": "wei",
    "block.interval_s": "seconds",
    "mempool.pending": "count",
    "mempool.queued": "count",
    "tx.inclusion_delay_blocks": "blocks",
}

HIGH_EFFICIENCY_THRESHOLD = 0.90


class InvalidBlockError(ValueError):
    pass


class NotYetIncludedError(ValueError):
    pass


class EmptyWindowError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def metric_point(
    name: str,
    value: float,
    observed_at: int,
    dimensions: dict[str, str] | None = None,
) -> MetricPoint:
    """Build a point for a registered metric name, with its registry unit."""
    unit = METRIC_REGISTRY.get(name)
    if unit is None:
        raise KeyError(f"metric name not in registry: {name!r}")
    return MetricPoint(
        name=name,
        value=value,
        unit=unit,
        dimensions=dimensions or {},
        observed_at=observed_at,
    )


def gas_utilization(block: BlockRecord) -> float:
    """Fraction of the block gas limit actually used."""
    if block.gas_limit <= 0:
        raise InvalidBlockError(f"block {block.number} has zero gas limit")
    return block.gas_used / block.gas_limit


def filter_high_efficiency(
    blocks: Iterable[BlockRecord], threshold: float = HIGH_EFFICIENCY_THRESHOLD
) -> list[tuple[int, float, int]]:
    """Blocks whose gas utilization strictly exceeds the threshold.

    Returns (block number, utilization, tx count) tuples in input order.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    out = []
    for block in blocks:
        utilization = gas_utilization(block)
        if utilization > threshold:
            out.append((block.number, utilization, block.tx_count))
    return out


def inclusion_delay(tx: TxRecord) -> int:
    """Blocks between first observation and inclusion."""
    if tx.first_seen_block is None or tx.inclusion_block is None:
        raise NotYetIncludedError(f"tx {tx.tx_hash} has no measurable delay")
    return tx.inclusion_block - tx.first_seen_block


def delay_price_series(txs: Iterable[TxRecord]) -> list[tuple[float, int]]:
    """(gas price in gwei, inclusion delay in blocks) pairs, one per tx."""
    return [(tx.gas_price_wei / WEI_PER_GWEI, inclusion_delay(tx)) for tx in txs]


def eth_transferred(block: BlockRecord) -> tuple[int, float]:
    """Total value moved in a block, as exact wei plus a display ETH float."""
    total_wei = sum(tx.value_wei for tx in block.transactions)
    return total_wei, total_wei / WEI_PER_ETH


@dataclass(frozen=True)
class AddressActivity:
    """Per-address activity in one role, ranked for the top-address view."""

    address: str
    tx_count: int
    role: str  # "sender" | "receiver"
    avg_gas_price_gwei: float
    total_value_wei: int


def _rank_role(txs: Sequence[TxRecord], role: str, n: int) -> list[AddressActivity]:
    counts: dict[str, int] = {}
    price_sums: dict[str, int] = {}
    value_sums: dict[str, int] = {}
    for tx in txs:
        address = tx.sender if role == "sender" else tx.recipient
        if address is None:
            continue
        counts[address] = counts.get(address, 0) + 1
        price_sums[address] = price_sums.get(address, 0) + tx.gas_price_wei
        value_sums[address] = value_sums.get(address, 0) + tx.value_wei
    ranked = sorted(counts, key=lambda a: (-counts[a], a))[:n]
    return [
        AddressActivity(
            address=a,
            tx_count=counts[a],
            role=role,
            avg_gas_price_gwei=(price_sums[a] / counts[a]) / WEI_PER_GWEI,
            total_value_wei=value_sums[a],
        )
        for a in ranked
    ]


def top_addresses(txs: Sequence[TxRecord], n: int = 20) -> list[AddressActivity]:
    """Top-n senders followed by top-n receivers, ranked by tx count.

    Ties break toward the lexicographically smaller address. Gas price
    averages are role-scoped: a sender's average covers the transactions it
    sent, a receiver's the ones it received.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return _rank_role(txs, "sender", n) + _rank_role(txs, "receiver", n)


def nearest_rank(sorted_values: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile over an ascending-sorted sequence."""
    if not sorted_values:
        raise EmptyWindowError("percentile of empty window")
    k = max(0, math.ceil(percentile / 100.0 * len(sorted_values)) - 1)
    return sorted_values[k]


@dataclass(frozen=True)
class LatencyStats:
    p50_ms: float | None
    p95_ms: float | None
    max_ms: float | None
    success_rate: float | None


def latency_stats(points: Iterable[MetricPoint]) -> LatencyStats:
    """Nearest-rank latency percentiles and call success rate for a window.

    Percentiles come from rpc.latency_ms points, the success rate from
    rpc.success points (transport failures emit no latency, so a window of
    pure failures still yields a success rate).
    """
    latencies = []
    successes = []
    for p in points:
        if p.name == "rpc.latency_ms":
            latencies.append(p.value)
        elif p.name == "rpc.success":
            successes.append(p.value)
    if not latencies and not successes:
        raise EmptyWindowError("window has no rpc latency or success points")
    latencies.sort()
    return LatencyStats(
        p50_ms=nearest_rank(latencies, 50) if latencies else None,
        p95_ms=nearest_rank(latencies, 95) if latencies else None,
        max_ms=latencies[-1] if latencies else None,
        success_rate=sum(successes) / len(successes) if successes else None,
    )


@dataclass(frozen=True)
class BlockIntervalStats:
    mean_s: float
    max_s: float
    stalled: bool


def block_interval_stats(
    blocks: Sequence[BlockRecord],
    stall_threshold_s: float = 60.0,
    now_s: float | None = None,
) -> BlockIntervalStats:
    """Spacing statistics over consecutive block timestamps.

    ``stalled`` is true when the newest block is older than the threshold
    relative to ``now_s`` (wall clock by default).
    """
    if len(blocks) < 2:
        raise InsufficientDataError("need at least two blocks for intervals")
    ordered = sorted(blocks, key=lambda b: b.number)
    intervals = [
        ordered[i + 1].timestamp - ordered[i].timestamp for i in range(len(ordered) - 1)
    ]
    now = time.time() if now_s is None else now_s
    return BlockIntervalStats(
        mean_s=sum(intervals) / len(intervals),
        max_s=float(max(intervals)),
        stalled=(now - ordered[-1].timestamp) > stall_threshold_s,
    )


def mempool_series(snapshots: Iterable[MempoolSnapshot]) -> list[MetricPoint]:
    """Pending-count series in snapshot order."""
    return [
        metric_point("mempool.pending", s.pending, s.observed_at) for s in snapshots
    ]
