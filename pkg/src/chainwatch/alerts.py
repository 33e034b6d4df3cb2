"""Threshold rules over the metric stream, with episode lifecycle tracking.

A rule fires once per continuous violation episode and re-fires only after
the episode resolves. Evaluation is a pure function of (rules, stream): the
same chronological stream of points always replays to the same events, which
makes offline analysis of a recorded session use the exact code path of the
live one.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import requests

from .metrics import METRIC_REGISTRY
from .records import MetricPoint

logger = logging.getLogger(__name__)

COMPARATORS = (">", "<", "==", "missing_for")


class RuleConfigError(ValueError):
    """A rule references an unknown metric or is otherwise malformed."""


@dataclass(frozen=True)
class AlertRule:
    """One threshold rule.

    For value comparators the predicate must hold continuously for
    ``for_duration_s`` before the rule fires. For ``missing_for`` the
    threshold itself is the tolerated silence in seconds.
    """

    id: str
    metric_name: str
    comparator: str
    threshold: float
    for_duration_s: float = 0.0

    def __post_init__(self) -> None:
        if not self.id:
            raise RuleConfigError("rule id must be non-empty")
        if self.comparator not in COMPARATORS:
            raise RuleConfigError(f"unknown comparator: {self.comparator!r}")
        if self.metric_name not in METRIC_REGISTRY:
            raise RuleConfigError(f"unknown metric name: {self.metric_name!r}")
        if self.for_duration_s < 0:
            raise RuleConfigError("for_duration_s must be non-negative")


@dataclass(frozen=True)
class AlertEvent:
    rule_id: str
    state: str  # "firing" | "resolved"
    fired_at: int
    resolved_at: int | None
    triggering_value: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "state": self.state,
            "fired_at": self.fired_at,
            "resolved_at": self.resolved_at,
            "triggering_value": self.triggering_value,
        }


DEFAULT_RULES: tuple[AlertRule, ...] = (
    AlertRule("high-rpc-latency", "rpc.latency_ms", ">", 1000.0, 60.0),
    AlertRule("rpc-availability", "rpc.success", "<", 1.0, 120.0),
    AlertRule("slow-blocks", "block.interval_s", ">", 60.0, 0.0),
    AlertRule("mempool-telemetry-missing", "mempool.pending", "missing_for", 300.0),
)


def rules_from_dicts(objs: Iterable[dict]) -> list[AlertRule]:
    rules = []
    for obj in objs:
        try:
            rules.append(
                AlertRule(
                    id=obj["id"],
                    metric_name=obj["metric_name"],
                    comparator=obj["comparator"],
                    threshold=float(obj["threshold"]),
                    for_duration_s=float(obj.get("for_duration_s", 0.0)),
                )
            )
        except KeyError as exc:
            raise RuleConfigError(f"rule missing field {exc}") from exc
    return rules


def load_rules(path: str | Path) -> list[AlertRule]:
    """Load a JSON array of rule objects; validation happens here, not later."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise RuleConfigError("rules file must contain a JSON array")
    return rules_from_dicts(data)


class _RuleState:
    __slots__ = ("violating_since", "fired_at", "triggering_value", "last_seen")

    def __init__(self) -> None:
        self.violating_since: int | None = None
        self.fired_at: int | None = None
        self.triggering_value: float | None = None
        self.last_seen: int | None = None


class AlertEvaluator:
    """Single consumer of an ordered metric stream; owns per-rule state."""

    def __init__(self, rules: Sequence[AlertRule] = DEFAULT_RULES):
        self.rules = list(rules)
        self._states = {rule.id: _RuleState() for rule in self.rules}

    def process(self, point: MetricPoint) -> list[AlertEvent]:
        """Advance every rule's state machine by one point, newest last."""
        events: list[AlertEvent] = []
        ts = point.observed_at
        for rule in self.rules:
            state = self._states[rule.id]
            if rule.comparator == "missing_for":
                events.extend(self._step_missing(rule, state, point, ts))
            elif point.name == rule.metric_name:
                events.extend(self._step_value(rule, state, point, ts))
        return events

    def _step_value(self, rule, state, point, ts) -> list[AlertEvent]:
        violating = _compare(rule.comparator, point.value, rule.threshold)
        events = []
        if violating:
            if state.violating_since is None:
                state.violating_since = ts
            held_ms = ts - state.violating_since
            if state.fired_at is None and held_ms >= rule.for_duration_s * 1000.0:
                state.fired_at = ts
                state.triggering_value = point.value
                events.append(
                    AlertEvent(rule.id, "firing", ts, None, point.value)
                )
        else:
            if state.fired_at is not None:
                events.append(
                    AlertEvent(
                        rule.id, "resolved", state.fired_at, ts, state.triggering_value
                    )
                )
            state.violating_since = None
            state.fired_at = None
            state.triggering_value = None
        return events

    def _step_missing(self, rule, state, point, ts) -> list[AlertEvent]:
        events = []
        if state.last_seen is None:
            # The first point of the stream anchors the silence clock.
            state.last_seen = ts
        if point.name == rule.metric_name:
            if state.fired_at is not None:
                events.append(
                    AlertEvent(
                        rule.id, "resolved", state.fired_at, ts, state.triggering_value
                    )
                )
                state.fired_at = None
                state.triggering_value = None
            state.last_seen = ts
        else:
            gap_s = (ts - state.last_seen) / 1000.0
            if state.fired_at is None and gap_s > rule.threshold:
                state.fired_at = ts
                state.triggering_value = gap_s
                events.append(AlertEvent(rule.id, "firing", ts, None, gap_s))
        return events


def _compare(comparator: str, value: float, threshold: float) -> bool:
    if comparator == ">":
        return value > threshold
    if comparator == "<":
        return value < threshold
    if comparator == "==":
        return value == threshold
    raise RuleConfigError(f"comparator {comparator!r} is not a value comparator")


def evaluate(
    rules: Sequence[AlertRule], stream: Iterable[MetricPoint]
) -> list[AlertEvent]:
    """Replay a chronological stream through fresh rule state."""
    evaluator = AlertEvaluator(rules)
    events: list[AlertEvent] = []
    last_ts = None
    for point in stream:
        if last_ts is not None and point.observed_at < last_ts:
            raise ValueError("metric stream timestamps must be non-decreasing")
        last_ts = point.observed_at
        events.extend(evaluator.process(point))
    return events


# -- notification sinks -----------------------------------------------------


@dataclass(frozen=True)
class SinkDelivery:
    sink: str
    ok: bool
    detail: str | None = None


@dataclass(frozen=True)
class DeliveryReceipt:
    event: AlertEvent
    deliveries: tuple[SinkDelivery, ...]

    @property
    def all_ok(self) -> bool:
        return all(d.ok for d in self.deliveries)


class LogAlertSink:
    """Writes one human-readable line per event to a stream (stderr default)."""

    name = "log"

    def __init__(self, stream=None):
        self._stream = stream or sys.stderr

    def deliver(self, event: AlertEvent) -> None:
        print(
            f"alert {event.state}: rule={event.rule_id} "
            f"value={event.triggering_value} fired_at={event.fired_at}",
            file=self._stream,
        )


class JsonlAlertSink:
    """Appends one JSON object per event; the durable alert trail."""

    name = "jsonl"

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def deliver(self, event: AlertEvent) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event.to_dict()) + "\n")


class WebhookAlertSink:
    """POSTs the event JSON to an HTTP endpoint; failures are non-fatal."""

    name = "webhook"

    def __init__(self, url: str, timeout_s: float = 5.0):
        self.url = url
        self.timeout_s = timeout_s

    def deliver(self, event: AlertEvent) -> None:
        response = requests.post(
            self.url, json=event.to_dict(), timeout=self.timeout_s
        )
        response.raise_for_status()


def notify(event: AlertEvent, sinks: Sequence) -> DeliveryReceipt:
    """Deliver an event to every sink; per-sink failures do not block others."""
    deliveries = []
    for sink in sinks:
        try:
            sink.deliver(event)
            deliveries.append(SinkDelivery(sink=sink.name, ok=True))
        except Exception as exc:
            logger.warning("alert sink %s failed: %s", sink.name, exc)
            deliveries.append(SinkDelivery(sink=sink.name, ok=False, detail=str(exc)))
    return DeliveryReceipt(event=event, deliveries=tuple(deliveries))


def read_alert_events(path: str | Path) -> list[AlertEvent]:
    """Parse an alert JSONL file back into events."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            events.append(
                AlertEvent(
                    rule_id=obj["rule_id"],
                    state=obj["state"],
                    fired_at=obj["fired_at"],
                    resolved_at=obj["resolved_at"],
                    triggering_value=obj["triggering_value"],
                )
            )
    return events
