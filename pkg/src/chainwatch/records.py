"""Record types shared by the collection pipeline, metric derivation, and sinks.

Every record carries enough structure to survive a JSON round trip without
loss: timestamps are integer UTC milliseconds, wei amounts are arbitrary
precision integers serialized as decimal strings (they routinely exceed the
53-bit range that is safe in a JSON number).
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import Any, Mapping

WEI_PER_GWEI = 10**9
WEI_PER_ETH = 10**18

# Units a MetricPoint may carry. Kept closed so exporters can map them.
METRIC_UNITS = frozenset(
    {"ratio", "blocks", "wei", "eth", "gwei", "ms", "count", "seconds"}
)

_HASH32_RE = re.compile(r"^0x[0-9a-fA-F]{64}$")
_ADDRESS_RE = re.compile(r"^0x[0-9a-fA-F]{40}$")


class RecordError(ValueError):
    """A record violates one of its structural invariants."""


def now_ms() -> int:
    """Current UTC time as integer milliseconds."""
    return int(time.time() * 1000)


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise RecordError(message)


@dataclass(frozen=True)
class TxRecord:
    """One observed transaction.

    ``first_seen_block`` is the chain head at the moment the transaction was
    first observed (in the pending pool, or at submission for locally
    submitted transactions); it stays ``None`` when the endpoint does not
    expose pool contents. ``recipient`` is ``None`` for contract creation.
    """

    tx_hash: str
    sender: str
    recipient: str | None
    value_wei: int
    gas_price_wei: int
    gas_limit: int
    first_seen_block: int | None = None
    inclusion_block: int | None = None

    def __post_init__(self) -> None:
        _check(bool(_HASH32_RE.match(self.tx_hash)), f"bad tx hash: {self.tx_hash!r}")
        _check(bool(_ADDRESS_RE.match(self.sender)), f"bad sender: {self.sender!r}")
        if self.recipient is not None:
            _check(
                bool(_ADDRESS_RE.match(self.recipient)),
                f"bad recipient: {self.recipient!r}",
            )
        _check(self.value_wei >= 0, "value_wei must be non-negative")
        _check(self.gas_price_wei >= 0, "gas_price_wei must be non-negative")
        _check(self.gas_limit >= 0, "gas_limit must be non-negative")
        if self.first_seen_block is not None and self.inclusion_block is not None:
            _check(
                self.inclusion_block >= self.first_seen_block,
                "inclusion_block precedes first_seen_block",
            )


@dataclass(frozen=True)
class BlockRecord:
    """One observed block, with full transactions when they were fetched."""

    number: int
    hash: str
    parent_hash: str
    timestamp: int
    gas_used: int
    gas_limit: int
    tx_count: int
    transactions: tuple[TxRecord, ...] = ()
    observed_at: int = 0

    def __post_init__(self) -> None:
        _check(self.number >= 0, "block number must be non-negative")
        _check(bool(_HASH32_RE.match(self.hash)), f"bad block hash: {self.hash!r}")
        _check(
            bool(_HASH32_RE.match(self.parent_hash)),
            f"bad parent hash: {self.parent_hash!r}",
        )
        _check(self.hash != self.parent_hash, "block hash equals parent hash")
        _check(self.gas_used >= 0, "gas_used must be non-negative")
        _check(self.gas_used <= self.gas_limit, "gas_used exceeds gas_limit")
        if not isinstance(self.transactions, tuple):
            object.__setattr__(self, "transactions", tuple(self.transactions))
        if self.transactions:
            _check(
                self.tx_count == len(self.transactions),
                "tx_count does not match transaction list",
            )


@dataclass(frozen=True)
class SupersededBlockMarker:
    """Marks a previously committed block as replaced by a chain reorg.

    The original block line stays in the sink; this marker is appended so the
    record stream never silently loses or rewrites data.
    """

    number: int
    hash: str
    observed_at: int = 0

    def __post_init__(self) -> None:
        _check(bool(_HASH32_RE.match(self.hash)), f"bad block hash: {self.hash!r}")


@dataclass(frozen=True)
class MempoolSnapshot:
    """Pending/queued transaction counts at one observation instant."""

    pending: int
    queued: int
    observed_at: int
    head_block: int

    def __post_init__(self) -> None:
        _check(self.pending >= 0, "pending count must be non-negative")
        _check(self.queued >= 0, "queued count must be non-negative")
        _check(self.head_block >= 0, "head_block must be non-negative")


@dataclass(frozen=True)
class MetricPoint:
    """Named scalar metric with timestamp, dimensions, and unit."""

    name: str
    value: float
    unit: str
    dimensions: Mapping[str, str] = field(default_factory=dict)
    observed_at: int = 0

    def __post_init__(self) -> None:
        _check(bool(self.name), "metric name must be non-empty")
        _check(self.unit in METRIC_UNITS, f"unknown metric unit: {self.unit!r}")
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "dimensions", dict(self.dimensions))


@dataclass
class CollectorCheckpoint:
    """Durable cursor of the last contiguously ingested block.

    ``last_block_hash`` is empty only for a fresh checkpoint that has not yet
    anchored to a real block.
    """

    last_block_number: int
    last_block_hash: str
    datapoints_emitted: int = 0
    updated_at: int = 0

    def __post_init__(self) -> None:
        _check(self.datapoints_emitted >= 0, "datapoints_emitted must be >= 0")
        if self.last_block_hash:
            _check(
                bool(_HASH32_RE.match(self.last_block_hash)),
                f"bad checkpoint hash: {self.last_block_hash!r}",
            )


Record = (
    TxRecord | BlockRecord | SupersededBlockMarker | MempoolSnapshot | MetricPoint
)


def _tx_to_dict(tx: TxRecord) -> dict[str, Any]:
    return {
        "record_type": "tx",
        "tx_hash": tx.tx_hash,
        "sender": tx.sender,
        "recipient": tx.recipient,
        "value_wei": str(tx.value_wei),
        "gas_price_wei": str(tx.gas_price_wei),
        "gas_limit": tx.gas_limit,
        "first_seen_block": tx.first_seen_block,
        "inclusion_block": tx.inclusion_block,
    }


def _tx_from_dict(obj: Mapping[str, Any]) -> TxRecord:
    return TxRecord(
        tx_hash=obj["tx_hash"],
        sender=obj["sender"],
        recipient=obj["recipient"],
        value_wei=int(obj["value_wei"]),
        gas_price_wei=int(obj["gas_price_wei"]),
        gas_limit=int(obj["gas_limit"]),
        first_seen_block=obj.get("first_seen_block"),
        inclusion_block=obj.get("inclusion_block"),
    )


def record_to_dict(record: Record) -> dict[str, Any]:
    """Serialize a record to a JSON-compatible dict with a record_type tag."""
    if isinstance(record, TxRecord):
        return _tx_to_dict(record)
    if isinstance(record, BlockRecord):
        return {
            "record_type": "block",
            "number": record.number,
            "hash": record.hash,
            "parent_hash": record.parent_hash,
            "timestamp": record.timestamp,
            "gas_used": record.gas_used,
            "gas_limit": record.gas_limit,
            "tx_count": record.tx_count,
            "transactions": [_tx_to_dict(tx) for tx in record.transactions],
            "observed_at": record.observed_at,
        }
    if isinstance(record, SupersededBlockMarker):
        return {
            "record_type": "superseded_block",
            "number": record.number,
            "hash": record.hash,
            "superseded": True,
            "observed_at": record.observed_at,
        }
    if isinstance(record, MempoolSnapshot):
        return {
            "record_type": "mempool",
            "pending": record.pending,
            "queued": record.queued,
            "observed_at": record.observed_at,
            "head_block": record.head_block,
        }
    if isinstance(record, MetricPoint):
        return {
            "record_type": "metric",
            "name": record.name,
            "value": record.value,
            "unit": record.unit,
            "dimensions": dict(record.dimensions),
            "observed_at": record.observed_at,
        }
    raise RecordError(f"unsupported record type: {type(record).__name__}")


def record_from_dict(obj: Mapping[str, Any]) -> Record:
    """Inverse of :func:`record_to_dict`."""
    kind = obj.get("record_type")
    if kind == "tx":
        return _tx_from_dict(obj)
    if kind == "block":
        return BlockRecord(
            number=int(obj["number"]),
            hash=obj["hash"],
            parent_hash=obj["parent_hash"],
            timestamp=obj["timestamp"],
            gas_used=int(obj["gas_used"]),
            gas_limit=int(obj["gas_limit"]),
            tx_count=int(obj["tx_count"]),
            transactions=tuple(_tx_from_dict(t) for t in obj["transactions"]),
            observed_at=int(obj["observed_at"]),
        )
    if kind == "superseded_block":
        return SupersededBlockMarker(
            number=int(obj["number"]),
            hash=obj["hash"],
            observed_at=int(obj["observed_at"]),
        )
    if kind == "mempool":
        return MempoolSnapshot(
            pending=int(obj["pending"]),
            queued=int(obj["queued"]),
            observed_at=int(obj["observed_at"]),
            head_block=int(obj["head_block"]),
        )
    if kind == "metric":
        return MetricPoint(
            name=obj["name"],
            value=float(obj["value"]),
            unit=obj["unit"],
            dimensions=dict(obj["dimensions"]),
            observed_at=int(obj["observed_at"]),
        )
    raise RecordError(f"unknown record_type: {kind!r}")


def checkpoint_to_dict(cp: CollectorCheckpoint) -> dict[str, Any]:
    # Field names are a stable file-format contract; do not rename.
    return {
        "last_block_number": cp.last_block_number,
        "last_block_hash": cp.last_block_hash,
        "datapoints_emitted": cp.datapoints_emitted,
        "updated_at": cp.updated_at,
    }


def checkpoint_from_dict(obj: Mapping[str, Any]) -> CollectorCheckpoint:
    try:
        return CollectorCheckpoint(
            last_block_number=int(obj["last_block_number"]),
            last_block_hash=str(obj["last_block_hash"]),
            datapoints_emitted=int(obj["datapoints_emitted"]),
            updated_at=int(obj["updated_at"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"malformed checkpoint object: {exc}") from exc
