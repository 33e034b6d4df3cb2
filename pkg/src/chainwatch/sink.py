"""Durable persistence and export for collected records.

Record streams are append-only JSONL guarded by a lock file so only one
writer touches a path at a time. Metric batches can additionally be exported
as CloudWatch Embedded Metric Format objects, and recorded streams replay
into figure-ready CSV files.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from filelock import FileLock, Timeout

from . import metrics
from .records import (
    METRIC_UNITS,
    WEI_PER_ETH,
    BlockRecord,
    MetricPoint,
    Record,
    SupersededBlockMarker,
    TxRecord,
    record_from_dict,
    record_to_dict,
)

logger = logging.getLogger(__name__)

FIGURES = ("fig1", "fig2", "fig3", "fig4")

# Units CloudWatch understands natively; everything else exports as "None".
_EMF_UNIT_MAP = {"ms": "Milliseconds", "count": "Count"}


class SinkError(Exception):
    pass


class SinkLockedError(SinkError):
    """Another writer holds the lock file for this path."""


class ReplayError(SinkError):
    def __init__(self, path: str | Path, line_number: int, reason: str):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.line_number = line_number


class EmfExportError(SinkError):
    """A point cannot be represented in Embedded Metric Format."""


class EmfValidationError(SinkError):
    pass


class RecordWriter:
    """Append-only JSONL writer, one per path (enforced by <path>.lock)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise SinkLockedError(f"another writer holds {self.path}.lock")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")
        self.written = 0

    def write(self, record: Record) -> None:
        self._fh.write(json.dumps(record_to_dict(record)) + "\n")
        self.written += 1

    def write_all(self, records: Iterable[Record]) -> int:
        count = 0
        for record in records:
            self.write(record)
            count += 1
        return count

    def flush(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()
        if self._lock.is_locked:
            self._lock.release()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_records(records: Iterable[Record], path: str | Path) -> int:
    """Append records to a JSONL file; returns the number written."""
    with RecordWriter(path) as writer:
        count = writer.write_all(records)
        writer.flush()
    return count


def replay(path: str | Path) -> Iterator[Record]:
    """Yield records in file order; malformed lines fail with their number."""
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if line == "\n":
                continue
            if not line.endswith("\n"):
                raise ReplayError(path, line_number, "truncated final line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReplayError(path, line_number, f"invalid JSON: {exc}") from exc
            try:
                yield record_from_dict(obj)
            except Exception as exc:
                raise ReplayError(path, line_number, f"invalid record: {exc}") from exc


def repair_torn_tail(path: str | Path) -> bool:
    """Drop a partially written final line left behind by a crash.

    Only the torn tail after the last newline is removed; complete lines are
    never touched. Returns True when a repair happened.
    """
    path = Path(path)
    if not path.exists():
        return False
    with open(path, "r+b") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        if size == 0:
            return False
        fh.seek(-1, os.SEEK_END)
        if fh.read(1) == b"\n":
            return False
        data = fh
        data.seek(0)
        content = data.read()
        keep = content.rfind(b"\n") + 1
        fh.seek(keep)
        fh.truncate()
        logger.warning("dropped torn final line (%d bytes) in %s", size - keep, path)
        return True


# -- Embedded Metric Format --------------------------------------------------


def export_emf(points: Sequence[MetricPoint], namespace: str) -> list[str]:
    """Render points as EMF JSON lines, one per (timestamp, dimension set).

    A metric name repeated within one group becomes an array value, which the
    format allows. Units outside the known registry are rejected rather than
    silently mislabelled.
    """
    if not namespace:
        raise EmfExportError("namespace must be non-empty")
    groups: dict[tuple[int, tuple[tuple[str, str], ...]], list[MetricPoint]] = {}
    for point in points:
        if point.unit not in METRIC_UNITS:
            raise EmfExportError(f"unit {point.unit!r} has no EMF mapping")
        key = (point.observed_at, tuple(sorted(point.dimensions.items())))
        groups.setdefault(key, []).append(point)

    lines = []
    for (timestamp, dims), group in groups.items():
        metric_meta = []
        seen: set[str] = set()
        values: dict[str, Any] = {}
        for point in group:
            if point.name not in seen:
                seen.add(point.name)
                metric_meta.append(
                    {
                        "Name": point.name,
                        "Unit": _EMF_UNIT_MAP.get(point.unit, "None"),
                    }
                )
                values[point.name] = point.value
            else:
                existing = values[point.name]
                if isinstance(existing, list):
                    existing.append(point.value)
                else:
                    values[point.name] = [existing, point.value]
        body: dict[str, Any] = {
            "_aws": {
                "Timestamp": timestamp,
                "CloudWatchMetrics": [
                    {
                        "Namespace": namespace,
                        "Dimensions": [[name for name, _ in dims]],
                        "Metrics": metric_meta,
                    }
                ],
            }
        }
        for name, value in dims:
            body[name] = value
        body.update(values)
        lines.append(json.dumps(body))
    return lines


def write_emf(
    points: Sequence[MetricPoint], namespace: str, path: str | Path
) -> int:
    """Append an EMF line stream to a file; returns lines written."""
    lines = export_emf(points, namespace)
    with open(path, "a", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    return len(lines)


def validate_emf_line(line: str) -> None:
    """Check one exported line against the structural rules of the format."""

    def fail(reason: str):
        raise EmfValidationError(reason)

    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        fail(f"not valid JSON: {exc}")
    if not isinstance(obj, dict) or not isinstance(obj.get("_aws"), dict):
        fail("missing _aws metadata object")
    meta = obj["_aws"]
    if not isinstance(meta.get("Timestamp"), int) or meta["Timestamp"] < 0:
        fail("missing or negative _aws.Timestamp")
    declarations = meta.get("CloudWatchMetrics")
    if not isinstance(declarations, list) or not declarations:
        fail("missing _aws.CloudWatchMetrics array")
    for declaration in declarations:
        if not declaration.get("Namespace"):
            fail("Namespace must be non-empty")
        dimension_sets = declaration.get("Dimensions")
        if not isinstance(dimension_sets, list):
            fail("Dimensions must be an array of dimension sets")
        for dimension_set in dimension_sets:
            if not isinstance(dimension_set, list):
                fail("each dimension set must be an array")
            for name in dimension_set:
                if not isinstance(obj.get(name), str):
                    fail(f"dimension {name!r} has no string sibling value")
        metric_list = declaration.get("Metrics")
        if not isinstance(metric_list, list) or not metric_list:
            fail("Metrics must be a non-empty array")
        for metric in metric_list:
            name = metric.get("Name")
            if not name:
                fail("metric declaration without a Name")
            value = obj.get(name)
            if isinstance(value, list):
                ok = bool(value) and all(
                    isinstance(v, (int, float)) and not isinstance(v, bool)
                    for v in value
                )
            else:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if not ok:
                fail(f"metric {name!r} has no numeric sibling value")


# -- figure CSV export ---------------------------------------------------------


@dataclass(frozen=True)
class ChainView:
    """Final-chain view of a replayed stream: superseded blocks dropped."""

    blocks: tuple[BlockRecord, ...]
    transactions: tuple[TxRecord, ...]


def chain_view(records: Iterable[Record]) -> ChainView:
    live: dict[int, BlockRecord] = {}
    loose_txs: list[TxRecord] = []
    for record in records:
        if isinstance(record, BlockRecord):
            live[record.number] = record
        elif isinstance(record, SupersededBlockMarker):
            current = live.get(record.number)
            if current is not None and current.hash == record.hash:
                del live[record.number]
        elif isinstance(record, TxRecord):
            loose_txs.append(record)
    blocks = tuple(live[n] for n in sorted(live))
    txs = tuple(tx for b in blocks for tx in b.transactions) + tuple(loose_txs)
    return ChainView(blocks=blocks, transactions=txs)


def format_eth(wei: int) -> str:
    """Exact decimal ETH rendering, rounded half-up at nine places."""
    if wei < 0:
        raise ValueError("wei amounts are unsigned")
    gwei_units = (wei + 5 * 10**8) // 10**9
    whole, frac = divmod(gwei_units, 10**9)
    return f"{whole}.{frac:09d}"


def _fig1_rows(view: ChainView) -> tuple[list[str], list[list]]:
    rows = [
        [number, repr(utilization), tx_count]
        for number, utilization, tx_count in metrics.filter_high_efficiency(view.blocks)
    ]
    return ["block", "utilization", "tx_count"], rows


def _fig2_rows(view: ChainView) -> tuple[list[str], list[list]]:
    measurable = [
        tx
        for tx in view.transactions
        if tx.first_seen_block is not None and tx.inclusion_block is not None
    ]
    rows = [
        [repr(gwei), delay] for gwei, delay in metrics.delay_price_series(measurable)
    ]
    return ["gas_price_gwei", "delay_blocks"], rows


def _fig3_rows(view: ChainView) -> tuple[list[str], list[list]]:
    rows = []
    for block in view.blocks:
        total_wei, _ = metrics.eth_transferred(block)
        rows.append([block.number, format_eth(total_wei)])
    return ["block", "total_eth"], rows


def _fig4_rows(view: ChainView) -> tuple[list[str], list[list]]:
    rows = []
    rank = 0
    current_role = None
    for activity in metrics.top_addresses(view.transactions, n=20):
        if activity.role != current_role:
            current_role = activity.role
            rank = 0
        rank += 1
        rows.append(
            [
                rank,
                activity.address,
                activity.role,
                activity.tx_count,
                repr(activity.avg_gas_price_gwei),
            ]
        )
    return ["rank", "address", "role", "tx_count", "avg_gas_price_gwei"], rows


def emit_figure_csv(
    records: Iterable[Record], figure: str, path: str | Path
) -> int:
    """Write one figure's plot-ready CSV; returns data rows written.

    Empty or insufficient input produces a header-only file.
    """
    builders = {
        "fig1": _fig1_rows,
        "fig2": _fig2_rows,
        "fig3": _fig3_rows,
        "fig4": _fig4_rows,
    }
    if figure not in builders:
        raise ValueError(f"unknown figure: {figure!r} (expected one of {FIGURES})")
    header, rows = builders[figure](chain_view(records))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return len(rows)
