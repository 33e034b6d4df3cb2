"""Minimal JSON-RPC 2.0 client over HTTP(S) with latency measurement.

Each call produces an :class:`RpcResult` describing exactly one of three
outcomes: the server returned a result, the server returned a JSON-RPC error
object, or the transport failed. Latency is measured at the client, from
request send to full response receipt, so it includes TLS and serialization
overhead. Transport failures are retried with exponential backoff; JSON-RPC
error responses are never retried.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence
from urllib.parse import urlsplit

import requests

from .records import now_ms

logger = logging.getLogger(__name__)

# Retry backoff for transport failures: 250 ms doubling, capped at 4 s.
BACKOFF_INITIAL_S = 0.25
BACKOFF_CAP_S = 4.0

_QUANTITY_RE = re.compile(r"^0x[0-9a-fA-F]+$")

# Methods a healthy managed endpoint is expected to answer. The probe's exit
# gate and the mock server's managed profile are both derived from this list.
MANAGED_BASELINE_METHODS: tuple[str, ...] = (
    "web3_clientVersion",
    "eth_blockNumber",
    "eth_getBlockByNumber",
    "eth_getTransactionByHash",
    "eth_getTransactionReceipt",
    "eth_call",
    "eth_getLogs",
    "eth_gasPrice",
    "eth_estimateGas",
    "eth_getBalance",
    "eth_getCode",
    "net_version",
    "net_listening",
    "eth_syncing",
    "eth_getTransactionCount",
    "txpool_status",
)

# Methods managed endpoints commonly refuse; probed anyway so the matrix
# records the server's own refusal message.
RESTRICTED_CANDIDATE_METHODS: tuple[str, ...] = (
    "eth_sendRawTransaction",
    "txpool_content",
    "debug_traceTransaction",
    "eth_mining",
)

ZERO_ADDRESS = "0x" + "00" * 20
_ZERO_HASH = "0x" + "00" * 32

# Probe parameters are read-only or harmless by construction. The raw
# transaction probe sends a deliberately short one-byte typed envelope so the
# server rejects it at the decoder without ever mutating state.
DEFAULT_PROBES: tuple[tuple[str, list], ...] = (
    ("web3_clientVersion", []),
    ("eth_blockNumber", []),
    ("eth_getBlockByNumber", ["latest", False]),
    ("eth_getTransactionByHash", [_ZERO_HASH]),
    ("eth_getTransactionReceipt", [_ZERO_HASH]),
    ("eth_call", [{"to": ZERO_ADDRESS, "data": "0x"}, "latest"]),
    ("eth_getLogs", [{"fromBlock": "latest", "toBlock": "latest"}]),
    ("eth_gasPrice", []),
    ("eth_estimateGas", [{"to": ZERO_ADDRESS, "value": "0x0"}]),
    ("eth_getBalance", [ZERO_ADDRESS, "latest"]),
    ("eth_getCode", [ZERO_ADDRESS, "latest"]),
    ("net_version", []),
    ("net_listening", []),
    ("eth_syncing", []),
    ("eth_getTransactionCount", [ZERO_ADDRESS, "latest"]),
    ("txpool_status", []),
    ("eth_sendRawTransaction", ["0x02"]),
    ("txpool_content", []),
    ("debug_traceTransaction", [_ZERO_HASH]),
    ("eth_mining", []),
)


class MalformedQuantityError(ValueError):
    """A hex quantity string does not follow the wire encoding."""


class EndpointError(ValueError):
    """An endpoint definition is invalid."""


@dataclass(frozen=True)
class Endpoint:
    """Where and how to reach a JSON-RPC server.

    ``auth_header`` is an opaque full header line ("Name: value") sent
    verbatim when present.
    """

    url: str
    auth_header: str | None = None
    timeout_ms: int = 10_000
    max_retries: int = 2

    def __post_init__(self) -> None:
        scheme = urlsplit(self.url).scheme
        if scheme not in ("http", "https"):
            raise EndpointError(f"endpoint scheme must be http or https: {self.url!r}")
        if self.timeout_ms <= 0:
            raise EndpointError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise EndpointError("max_retries must be non-negative")
        if self.auth_header is not None and ":" not in self.auth_header:
            raise EndpointError("auth_header must be a full 'Name: value' line")


class RpcStatus(str, Enum):
    SUCCESS = "success"
    RPC_ERROR = "rpc_error"
    TRANSPORT_ERROR = "transport_error"


class TransportKind(str, Enum):
    TIMEOUT = "timeout"
    CONNECTION_REFUSED = "connection_refused"
    TLS = "tls"
    MALFORMED_RESPONSE = "malformed_response"


@dataclass(frozen=True)
class RpcResult:
    """Outcome of one JSON-RPC call.

    Exactly one outcome variant is populated: ``value`` for SUCCESS,
    ``error_code``/``error_message`` for RPC_ERROR, ``transport_kind``/
    ``transport_detail`` for TRANSPORT_ERROR. ``latency_ms`` is present for
    SUCCESS and RPC_ERROR; a transport failure may not have received a
    response to time.
    """

    method: str
    status: RpcStatus
    value: Any = None
    error_code: int | None = None
    error_message: str | None = None
    transport_kind: TransportKind | None = None
    transport_detail: str | None = None
    latency_ms: float | None = None
    observed_at: int = 0

    @property
    def ok(self) -> bool:
        return self.status is RpcStatus.SUCCESS

    def __post_init__(self) -> None:
        if self.latency_ms is not None and self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")
        if self.status is RpcStatus.RPC_ERROR and self.error_message is None:
            raise ValueError("rpc_error result requires an error message")
        if self.status is RpcStatus.TRANSPORT_ERROR and self.transport_kind is None:
            raise ValueError("transport_error result requires a kind")


class Classification(str, Enum):
    SUPPORTED = "supported"
    RESTRICTED = "restricted"
    TRANSPORT_FAILED = "transport_failed"


@dataclass(frozen=True)
class CapabilityEntry:
    classification: Classification
    message: str | None = None
    latency_ms: float | None = None


@dataclass(frozen=True)
class CapabilityMatrix:
    """Per-method classification of what an endpoint answers."""

    entries: dict[str, CapabilityEntry]
    probed_at: int

    def methods(self, classification: Classification) -> list[str]:
        return [m for m, e in self.entries.items() if e.classification is classification]

    def supports_all(self, methods: Iterable[str]) -> bool:
        return all(
            self.entries.get(m) is not None
            and self.entries[m].classification is Classification.SUPPORTED
            for m in methods
        )


def decode_quantity(hex_str: str) -> int:
    """Decode a 0x-prefixed hex quantity into an unsigned integer."""
    if not isinstance(hex_str, str) or not hex_str.startswith("0x"):
        raise MalformedQuantityError(f"missing 0x prefix: {hex_str!r}")
    if len(hex_str) == 2:
        raise MalformedQuantityError("empty hex digits")
    if not _QUANTITY_RE.match(hex_str):
        raise MalformedQuantityError(f"non-hex characters: {hex_str!r}")
    return int(hex_str, 16)


def encode_quantity(value: int) -> str:
    """Encode an unsigned integer as a canonical 0x hex quantity."""
    if value < 0:
        raise MalformedQuantityError("quantities are unsigned")
    return hex(value)


def _auth_headers(endpoint: Endpoint) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if endpoint.auth_header:
        name, _, value = endpoint.auth_header.partition(":")
        headers[name.strip()] = value.strip()
    return headers


class JsonRpcClient:
    """Stateless-per-call JSON-RPC client; safe to share across workers."""

    def __init__(self) -> None:
        self._session = requests.Session()
        self._ids = itertools.count(1)

    def close(self) -> None:
        self._session.close()

    def call(self, endpoint: Endpoint, method: str, params: Sequence | None = None) -> RpcResult:
        """Issue one JSON-RPC request, retrying only transport failures.

        Total time is bounded by timeout_ms x (max_retries + 1) plus the
        capped backoff sleeps between attempts.
        """
        if not method:
            raise ValueError("method must be non-empty")
        payload = {
            "jsonrpc": "2.0",
            "id": next(self._ids),
            "method": method,
            "params": list(params or []),
        }
        headers = _auth_headers(endpoint)
        timeout_s = endpoint.timeout_ms / 1000.0

        attempt = 0
        while True:
            result = self._attempt(endpoint, method, payload, headers, timeout_s)
            if result.status is not RpcStatus.TRANSPORT_ERROR or attempt >= endpoint.max_retries:
                return result
            backoff = min(BACKOFF_INITIAL_S * (2**attempt), BACKOFF_CAP_S)
            logger.debug(
                "transport %s calling %s; retry %d/%d in %.2fs",
                result.transport_kind,
                method,
                attempt + 1,
                endpoint.max_retries,
                backoff,
            )
            time.sleep(backoff)
            attempt += 1

    def _attempt(self, endpoint, method, payload, headers, timeout_s) -> RpcResult:
        observed_at = now_ms()
        start = time.perf_counter()

        def transport(kind: TransportKind, detail: str, timed: bool) -> RpcResult:
            latency = (time.perf_counter() - start) * 1000.0 if timed else None
            return RpcResult(
                method=method,
                status=RpcStatus.TRANSPORT_ERROR,
                transport_kind=kind,
                transport_detail=detail,
                latency_ms=latency,
                observed_at=observed_at,
            )

        try:
            response = self._session.post(
                endpoint.url, json=payload, headers=headers, timeout=timeout_s
            )
        except requests.exceptions.SSLError as exc:
            return transport(TransportKind.TLS, str(exc), timed=False)
        except requests.exceptions.Timeout as exc:
            return transport(TransportKind.TIMEOUT, str(exc), timed=False)
        except requests.exceptions.RequestException as exc:
            return transport(TransportKind.CONNECTION_REFUSED, str(exc), timed=False)

        latency_ms = (time.perf_counter() - start) * 1000.0
        try:
            body = response.json()
        except (json.JSONDecodeError, ValueError):
            return transport(
                TransportKind.MALFORMED_RESPONSE,
                f"HTTP {response.status_code}, non-JSON body",
                timed=True,
            )

        if isinstance(body, dict) and body.get("error"):
            error = body["error"]
            code = error.get("code") if isinstance(error, dict) else None
            message = error.get("message") if isinstance(error, dict) else str(error)
            return RpcResult(
                method=method,
                status=RpcStatus.RPC_ERROR,
                error_code=code,
                error_message=str(message),
                latency_ms=latency_ms,
                observed_at=observed_at,
            )
        if isinstance(body, dict) and "result" in body:
            return RpcResult(
                method=method,
                status=RpcStatus.SUCCESS,
                value=body["result"],
                latency_ms=latency_ms,
                observed_at=observed_at,
            )
        return transport(
            TransportKind.MALFORMED_RESPONSE,
            "response carries neither result nor error",
            timed=True,
        )


def call(endpoint: Endpoint, method: str, params: Sequence | None = None) -> RpcResult:
    """One-shot convenience wrapper around :meth:`JsonRpcClient.call`."""
    client = JsonRpcClient()
    try:
        return client.call(endpoint, method, params)
    finally:
        client.close()


def probe_capabilities(
    endpoint: Endpoint,
    probes: Sequence[tuple[str, list]] = DEFAULT_PROBES,
    client: JsonRpcClient | None = None,
) -> CapabilityMatrix:
    """Classify each probed method as supported, restricted, or unreachable.

    A successful response classifies the method as supported; a JSON-RPC
    error classifies it as restricted and keeps the server's message
    verbatim; a transport failure after retries marks it transport-failed.
    """
    own_client = client is None
    rpc = client or JsonRpcClient()
    entries: dict[str, CapabilityEntry] = {}
    try:
        for method, params in probes:
            result = rpc.call(endpoint, method, params)
            if result.status is RpcStatus.SUCCESS:
                entry = CapabilityEntry(Classification.SUPPORTED, None, result.latency_ms)
            elif result.status is RpcStatus.RPC_ERROR:
                entry = CapabilityEntry(
                    Classification.RESTRICTED, result.error_message, result.latency_ms
                )
            else:
                entry = CapabilityEntry(
                    Classification.TRANSPORT_FAILED, result.transport_detail, None
                )
            entries[method] = entry
    finally:
        if own_client:
            rpc.close()
    return CapabilityMatrix(entries=entries, probed_at=now_ms())
