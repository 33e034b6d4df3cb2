"""Scheduled polling pipeline from JSON-RPC endpoint to record streams.

One logical collector owns the checkpoint (single writer). Each poll cycle
fetches the head, backfills every block above the checkpoint in ascending
order with full transactions, snapshots the mempool, and emits latency and
availability metric points for every call it makes. The committed block
range is always contiguous: a failure mid-backfill advances the checkpoint
only over the blocks that were actually ingested.

Sessions run cycles on a fixed cadence (each deadline is start plus i times
the interval, independent of how long cycles take) and emit aggregated
metric batches, "datapoints", on a second, slower cadence. The checkpoint is
saved only after the sinks flush, so a crash can never leave the checkpoint
ahead of durable data; the records file is reconciled on restart to cover
the opposite window.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .alerts import AlertEvaluator, notify
from .metrics import eth_transferred, gas_utilization, metric_point
from .records import (
    BlockRecord,
    CollectorCheckpoint,
    MempoolSnapshot,
    MetricPoint,
    RecordError,
    SupersededBlockMarker,
    TxRecord,
    checkpoint_from_dict,
    checkpoint_to_dict,
    now_ms,
)
from .rpc_client import (
    Endpoint,
    JsonRpcClient,
    MalformedQuantityError,
    RpcResult,
    RpcStatus,
    decode_quantity,
)
from .sink import RecordWriter, SinkError, repair_torn_tail, replay, write_emf

logger = logging.getLogger(__name__)

DEFAULT_REORG_DEPTH = 6
_FIRST_SEEN_CAP = 50_000


class CollectorError(Exception):
    pass


class CheckpointError(CollectorError):
    """Checkpoint file exists but cannot be parsed."""


class ReorgTooDeepError(CollectorError):
    """The chain diverged deeper than the configured walk-back bound."""


@dataclass
class CollectorConfig:
    poll_interval_s: float = 10.0
    datapoint_interval_s: float = 60.0
    start_block: int | None = None  # first block to ingest; None starts at head
    reorg_depth: int = DEFAULT_REORG_DEPTH
    track_first_seen: bool = True


@dataclass
class CycleResult:
    checkpoint: CollectorCheckpoint | None
    blocks: list[BlockRecord] = field(default_factory=list)
    snapshot: MempoolSnapshot | None = None
    points: list[MetricPoint] = field(default_factory=list)
    superseded: list[SupersededBlockMarker] = field(default_factory=list)
    reorg_rollback: int | None = None
    deep_reorg_reset: bool = False
    error: str | None = None


def save_checkpoint(checkpoint: CollectorCheckpoint, path: str | Path) -> None:
    """Atomic write: temp file then rename, so a crash never corrupts it."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(checkpoint_to_dict(checkpoint)))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(
    path: str | Path, start_block: int | None = None
) -> CollectorCheckpoint | None:
    """Load a checkpoint; a missing file yields a fresh start.

    With ``start_block`` given, the fresh checkpoint is anchored just below
    it so ingestion begins exactly there; with ``start_block=None`` the
    caller anchors at the live head on first contact. A file that exists but
    does not parse raises, never silently defaults.
    """
    path = Path(path)
    if not path.exists():
        if start_block is None:
            return None
        return CollectorCheckpoint(
            last_block_number=start_block - 1,
            last_block_hash="",
            datapoints_emitted=0,
            updated_at=now_ms(),
        )
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return checkpoint_from_dict(obj)
    except (json.JSONDecodeError, RecordError, OSError) as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc


def detect_reorg(
    new_block: BlockRecord,
    checkpoint: CollectorCheckpoint,
    recent_hashes: Mapping[int, str],
    fetch_remote_hash: Callable[[int], str | None],
    max_depth: int = DEFAULT_REORG_DEPTH,
) -> int | None:
    """Decide whether a block extends the committed chain or replaces part of it.

    Returns None when the parent hash matches the checkpoint, otherwise the
    highest block number at which the local and remote chains still agree
    (the rollback target). Raises when no agreement exists within
    ``max_depth`` superseded blocks.
    """
    if not checkpoint.last_block_hash:
        return None
    if new_block.parent_hash == checkpoint.last_block_hash:
        return None
    last = checkpoint.last_block_number
    lowest = max(last - max_depth, 0)
    for join in range(last - 1, lowest - 1, -1):
        local = recent_hashes.get(join)
        if local is None:
            break  # no local knowledge left to compare against
        if fetch_remote_hash(join) == local:
            return join
    raise ReorgTooDeepError(
        f"no common ancestor within {max_depth} blocks below {last}"
    )


class Collector:
    """Owns one endpoint's ingestion state; not safe for concurrent cycles."""

    def __init__(
        self,
        client: JsonRpcClient,
        endpoint: Endpoint,
        config: CollectorConfig | None = None,
        checkpoint: CollectorCheckpoint | None = None,
    ):
        self.client = client
        self.endpoint = endpoint
        self.config = config or CollectorConfig()
        self.checkpoint = checkpoint
        self.recent_hashes: dict[int, str] = {}
        self._recent_window = max(64, self.config.reorg_depth * 4)
        self._last_block_timestamp: int | None = None
        # None: capability unknown; True: pool contents readable; False: not.
        self._pool_readable: bool | None = None if self.config.track_first_seen else False
        self._first_seen: dict[str, int] = {}

    # -- state restoration ----------------------------------------------------

    def reconcile(self, records_path: str | Path) -> None:
        """Fast-forward state from the records file after a restart.

        Covers the crash window where blocks reached the sink but the
        checkpoint save did not happen: the durable stream wins. A torn
        final line (killed mid-write) is dropped before parsing.
        """
        records_path = Path(records_path)
        if not records_path.exists():
            return
        repair_torn_tail(records_path)
        live: dict[int, tuple[str, int]] = {}
        for record in replay(records_path):
            if isinstance(record, BlockRecord):
                live[record.number] = (record.hash, record.timestamp)
            elif isinstance(record, SupersededBlockMarker):
                if record.number in live and live[record.number][0] == record.hash:
                    del live[record.number]
        if not live:
            return
        top = max(live)
        if self.checkpoint is None or top > self.checkpoint.last_block_number:
            datapoints = self.checkpoint.datapoints_emitted if self.checkpoint else 0
            logger.info("fast-forwarding checkpoint to block %d from records", top)
            self.checkpoint = CollectorCheckpoint(
                last_block_number=top,
                last_block_hash=live[top][0],
                datapoints_emitted=datapoints,
                updated_at=now_ms(),
            )
        for number in sorted(live)[-self._recent_window :]:
            self.recent_hashes[number] = live[number][0]
        anchor = self.checkpoint.last_block_number
        if anchor in live:
            self._last_block_timestamp = live[anchor][1]

    # -- one poll cycle ---------------------------------------------------------

    def run_poll_cycle(self) -> CycleResult:
        result = CycleResult(checkpoint=self.checkpoint)
        points = result.points

        head_res = self._timed_call("eth_blockNumber", [], points)
        if not head_res.ok:
            result.error = f"head fetch failed: {_describe(head_res)}"
            return result
        try:
            head = decode_quantity(head_res.value)
        except MalformedQuantityError as exc:
            result.error = f"head fetch returned malformed quantity: {exc}"
            return result
        points.append(metric_point("chain.head", head, now_ms()))

        if self.checkpoint is None:
            # First contact with no configured start: begin at the head block.
            self.checkpoint = CollectorCheckpoint(
                last_block_number=head - 1,
                last_block_hash="",
                datapoints_emitted=0,
                updated_at=now_ms(),
            )
        result.checkpoint = self.checkpoint

        self._track_first_seen(head, points)
        self._backfill(head, result)
        self._snapshot_mempool(result)
        result.checkpoint = self.checkpoint
        return result

    def _backfill(self, head: int, result: CycleResult) -> None:
        points = result.points
        number = self.checkpoint.last_block_number + 1
        while number <= head:
            block_res = self._timed_call(
                "eth_getBlockByNumber", [hex(number), True], points
            )
            if not block_res.ok or block_res.value is None:
                result.error = f"backfill stopped at {number}: {_describe(block_res)}"
                return
            try:
                block = self._parse_wire_block(block_res.value)
            except (KeyError, TypeError, MalformedQuantityError, RecordError) as exc:
                result.error = f"malformed block {number}: {exc!r}"
                return

            try:
                join = detect_reorg(
                    block,
                    self.checkpoint,
                    self.recent_hashes,
                    self._fetch_remote_hash,
                    self.config.reorg_depth,
                )
            except ReorgTooDeepError as exc:
                logger.error("%s; resetting to fresh head (operator attention)", exc)
                result.deep_reorg_reset = True
                self.checkpoint = CollectorCheckpoint(
                    last_block_number=number - 1,
                    last_block_hash="",
                    datapoints_emitted=self.checkpoint.datapoints_emitted,
                    updated_at=now_ms(),
                )
                self.recent_hashes.clear()
                self._last_block_timestamp = None
                continue

            if join is not None:
                logger.warning(
                    "reorg: rolling back from block %d to %d",
                    self.checkpoint.last_block_number,
                    join,
                )
                for n in range(join + 1, self.checkpoint.last_block_number + 1):
                    old_hash = self.recent_hashes.pop(n, None)
                    if old_hash:
                        result.superseded.append(
                            SupersededBlockMarker(n, old_hash, now_ms())
                        )
                result.reorg_rollback = join
                self.checkpoint = CollectorCheckpoint(
                    last_block_number=join,
                    last_block_hash=self.recent_hashes.get(join, ""),
                    datapoints_emitted=self.checkpoint.datapoints_emitted,
                    updated_at=now_ms(),
                )
                self._last_block_timestamp = None
                number = join + 1
                continue

            self._commit(block, points)
            result.blocks.append(block)
            number += 1

    def _commit(self, block: BlockRecord, points: list[MetricPoint]) -> None:
        ts = now_ms()
        points.append(
            metric_point("block.gas_utilization", gas_utilization(block), ts)
        )
        points.append(metric_point("block.tx_count", block.tx_count, ts))
        total_wei, _ = eth_transferred(block)
        points.append(metric_point("block.eth_transferred_wei", float(total_wei), ts))
        if self._last_block_timestamp is not None:
            points.append(
                metric_point(
                    "block.interval_s", block.timestamp - self._last_block_timestamp, ts
                )
            )
        for tx in block.transactions:
            self._first_seen.pop(tx.tx_hash, None)
            if tx.first_seen_block is not None:
                points.append(
                    metric_point(
                        "tx.inclusion_delay_blocks",
                        block.number - tx.first_seen_block,
                        ts,
                        {"tx_hash": tx.tx_hash},
                    )
                )
        self.recent_hashes[block.number] = block.hash
        if len(self.recent_hashes) > self._recent_window:
            for stale in sorted(self.recent_hashes)[: -self._recent_window]:
                del self.recent_hashes[stale]
        self._last_block_timestamp = block.timestamp
        self.checkpoint = CollectorCheckpoint(
            last_block_number=block.number,
            last_block_hash=block.hash,
            datapoints_emitted=self.checkpoint.datapoints_emitted,
            updated_at=now_ms(),
        )

    def _snapshot_mempool(self, result: CycleResult) -> None:
        res = self._timed_call("txpool_status", [], result.points)
        if not res.ok or not isinstance(res.value, dict):
            return
        try:
            pending = decode_quantity(res.value["pending"])
            queued = decode_quantity(res.value["queued"])
        except (KeyError, TypeError, MalformedQuantityError):
            return
        ts = now_ms()
        snapshot = MempoolSnapshot(
            pending=pending,
            queued=queued,
            observed_at=ts,
            head_block=max(self.checkpoint.last_block_number, 0),
        )
        result.snapshot = snapshot
        result.points.append(metric_point("mempool.pending", pending, ts))
        result.points.append(metric_point("mempool.queued", queued, ts))

    def _track_first_seen(self, head: int, points: list[MetricPoint]) -> None:
        """Record the head at which each pending tx was first observed.

        Requires pool-content access; endpoints that restrict the method are
        detected once (without polluting availability metrics) and the
        feature stays off for the session.
        """
        if self._pool_readable is False:
            return
        probing = self._pool_readable is None
        res = self._timed_call("txpool_content", [], None if probing else points)
        if res.status is RpcStatus.RPC_ERROR:
            self._pool_readable = False
            logger.info("pool contents unavailable (%s); first-seen tracking off",
                        res.error_message)
            return
        if not res.ok or not isinstance(res.value, dict):
            return  # transport hiccup; capability still unknown
        self._pool_readable = True
        if len(self._first_seen) > _FIRST_SEEN_CAP:
            self._first_seen.clear()
        for per_sender in res.value.get("pending", {}).values():
            for tx in per_sender.values():
                tx_hash = tx.get("hash")
                if tx_hash:
                    self._first_seen.setdefault(tx_hash, head)

    def _fetch_remote_hash(self, number: int) -> str | None:
        res = self.client.call(
            self.endpoint, "eth_getBlockByNumber", [hex(number), False]
        )
        if res.ok and isinstance(res.value, dict):
            return res.value.get("hash")
        return None

    def _timed_call(
        self, method: str, params: list, points: list[MetricPoint] | None
    ) -> RpcResult:
        result = self.client.call(self.endpoint, method, params)
        if points is not None:
            ts = result.observed_at or now_ms()
            if result.latency_ms is not None:
                points.append(
                    metric_point(
                        "rpc.latency_ms", result.latency_ms, ts, {"method": method}
                    )
                )
            points.append(
                metric_point(
                    "rpc.success", 1.0 if result.ok else 0.0, ts, {"method": method}
                )
            )
        return result

    def _parse_wire_block(self, obj: dict) -> BlockRecord:
        number = decode_quantity(obj["number"])
        txs = []
        for wire_tx in obj.get("transactions", []):
            if not isinstance(wire_tx, dict):
                continue  # hash-only entry; full objects were requested
            tx_hash = wire_tx["hash"]
            txs.append(
                TxRecord(
                    tx_hash=tx_hash,
                    sender=wire_tx["from"],
                    recipient=wire_tx.get("to"),
                    value_wei=decode_quantity(wire_tx["value"]),
                    gas_price_wei=decode_quantity(wire_tx.get("gasPrice") or "0x0"),
                    gas_limit=decode_quantity(wire_tx["gas"]),
                    first_seen_block=self._first_seen.get(tx_hash),
                    inclusion_block=number,
                )
            )
        return BlockRecord(
            number=number,
            hash=obj["hash"],
            parent_hash=obj["parentHash"],
            timestamp=decode_quantity(obj["timestamp"]),
            gas_used=decode_quantity(obj["gasUsed"]),
            gas_limit=decode_quantity(obj["gasLimit"]),
            tx_count=len(txs),
            transactions=tuple(txs),
            observed_at=now_ms(),
        )


def _describe(result: RpcResult) -> str:
    if result.status is RpcStatus.RPC_ERROR:
        return f"rpc error {result.error_code}: {result.error_message}"
    if result.status is RpcStatus.TRANSPORT_ERROR:
        return f"transport {result.transport_kind}: {result.transport_detail}"
    return "unexpected empty result"


# -- session orchestration ----------------------------------------------------


@dataclass
class SessionSummary:
    cycles: int = 0
    missed_deadlines: int = 0
    duration_s: float = 0.0
    datapoints_emitted: int = 0
    blocks_committed: int = 0
    txs_ingested: int = 0
    snapshots: int = 0
    cycle_failures: int = 0
    reorg_rollbacks: int = 0
    deep_reorg_resets: int = 0
    alerts_fired: int = 0
    alerts_resolved: int = 0
    fatal_error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_session(
    collector: Collector,
    out_dir: str | Path,
    datapoint_target: int,
    poll_interval_s: float | None = None,
    datapoint_interval_s: float | None = None,
    evaluator: AlertEvaluator | None = None,
    alert_sinks: tuple = (),
    emf_namespace: str = "ChainWatch",
) -> SessionSummary:
    """Poll on a fixed cadence until ``datapoint_target`` batches are emitted.

    Writes records.jsonl, metrics.jsonl, metrics.emf.jsonl, and
    checkpoint.json under ``out_dir``. Restarting with the same directory
    resumes from the checkpoint (reconciled against the records file) and
    counts previously emitted datapoints toward the target. Individual cycle
    failures are recorded and do not abort the session; sink failures do.
    """
    if datapoint_target <= 0:
        raise ValueError("datapoint_target must be positive")
    poll_s = poll_interval_s or collector.config.poll_interval_s
    dp_s = datapoint_interval_s or collector.config.datapoint_interval_s
    if poll_s <= 0 or dp_s <= 0:
        raise ValueError("intervals must be positive")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_path = out / "records.jsonl"
    metrics_path = out / "metrics.jsonl"
    emf_path = out / "metrics.emf.jsonl"
    checkpoint_path = out / "checkpoint.json"

    collector.reconcile(records_path)
    summary = SessionSummary()
    datapoints_total = (
        collector.checkpoint.datapoints_emitted if collector.checkpoint else 0
    )
    buffer: list[MetricPoint] = []
    epsilon = min(poll_s, dp_s) * 1e-6

    with RecordWriter(records_path) as records_writer, RecordWriter(
        metrics_path
    ) as metrics_writer:
        t0 = time.monotonic()
        cycle_index = 0
        dp_emitted_this_session = 0
        try:
            while datapoints_total < datapoint_target:
                deadline = t0 + cycle_index * poll_s
                now = time.monotonic()
                if now < deadline:
                    time.sleep(deadline - now)
                elif now - deadline > poll_s / 2:
                    summary.missed_deadlines += 1

                cycle = collector.run_poll_cycle()
                summary.cycles += 1
                if cycle.error:
                    summary.cycle_failures += 1
                    logger.warning("cycle %d: %s", cycle_index, cycle.error)
                if cycle.reorg_rollback is not None:
                    summary.reorg_rollbacks += 1
                if cycle.deep_reorg_reset:
                    summary.deep_reorg_resets += 1

                for marker in cycle.superseded:
                    records_writer.write(marker)
                for block in cycle.blocks:
                    records_writer.write(block)
                    summary.blocks_committed += 1
                    summary.txs_ingested += block.tx_count
                if cycle.snapshot is not None:
                    records_writer.write(cycle.snapshot)
                    summary.snapshots += 1
                buffer.extend(cycle.points)

                if evaluator is not None:
                    for point in cycle.points:
                        for event in evaluator.process(point):
                            if event.state == "firing":
                                summary.alerts_fired += 1
                            else:
                                summary.alerts_resolved += 1
                            notify(event, alert_sinks)

                next_dp_deadline = t0 + (dp_emitted_this_session + 1) * dp_s
                while (
                    next_dp_deadline <= deadline + epsilon
                    and datapoints_total < datapoint_target
                ):
                    records_writer.flush()
                    metrics_writer.write_all(buffer)
                    metrics_writer.flush()
                    write_emf(buffer, emf_namespace, emf_path)
                    buffer.clear()
                    datapoints_total += 1
                    dp_emitted_this_session += 1
                    if collector.checkpoint is not None:
                        collector.checkpoint.datapoints_emitted = datapoints_total
                        collector.checkpoint.updated_at = now_ms()
                        save_checkpoint(collector.checkpoint, checkpoint_path)
                    next_dp_deadline = t0 + (dp_emitted_this_session + 1) * dp_s

                cycle_index += 1
        except (OSError, SinkError) as exc:
            summary.fatal_error = f"sink failure: {exc}"
            logger.error("session aborted: %s", summary.fatal_error)
        summary.duration_s = time.monotonic() - t0
        summary.datapoints_emitted = datapoints_total
    return summary
