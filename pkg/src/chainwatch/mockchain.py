"""Deterministic in-process Ethereum JSON-RPC server for desk-scale testing.

The chain models value transfers and gas accounting only (no contract
execution) with a strict gas-price-priority fee market: the pending pool
orders by gas price descending, arrival sequence ascending, and blocks pack
greedily first-fit until the gas limit. Identical seed plus identical
operation sequence reproduces bit-identical hashes, inclusion logs, and RPC
responses; block timestamps are logical (genesis + accumulated periods) so
tests do not depend on the wall clock.

Two method profiles are served: "amb" answers the sixteen baseline methods
and refuses four others with fixed verbatim messages, mirroring a managed
endpoint; "permissive" answers everything. Fault injection (outage, added
latency, slow block, fork) provides reproducible anomaly stimulus.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Iterable, Sequence

from .records import BlockRecord, TxRecord, now_ms
from .rpc_client import encode_quantity

logger = logging.getLogger(__name__)

DEFAULT_GENESIS_TIMESTAMP = 1_700_000_000
DEFAULT_BLOCK_GAS_LIMIT = 30_000_000
DEFAULT_BLOCK_PERIOD_S = 12.0
DEFAULT_ACCOUNT_COUNT = 10
DEFAULT_ACCOUNT_BALANCE_WEI = 10**27
CHAIN_ID = 1337

PROFILES = ("amb", "permissive")

# Verbatim refusal messages served under the amb profile.
AMB_RESTRICTED: dict[str, tuple[int, str]] = {
    "eth_sendRawTransaction": (-32000, "Typed transaction too short"),
    "txpool_content": (-32601, "Method not available on AMB"),
    "debug_traceTransaction": (-32601, "Restricted method"),
    "eth_mining": (-32601, "Not supported by AMB"),
}


class MockChainError(Exception):
    """Chain-level operation failure (bad submit, bad fault parameters)."""


class RpcMethodError(Exception):
    """Raised by method handlers; rendered as a JSON-RPC error object."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _sha_hex(payload: str) -> str:
    return "0x" + hashlib.sha256(payload.encode()).hexdigest()


def derive_address(seed: int, index: int) -> str:
    return "0x" + hashlib.sha256(f"acct:{seed}:{index}".encode()).hexdigest()[:40]


@dataclass(frozen=True)
class ChainConfig:
    seed: int = 1
    block_gas_limit: int = DEFAULT_BLOCK_GAS_LIMIT
    block_period_s: float = DEFAULT_BLOCK_PERIOD_S
    profile: str = "amb"
    initial_accounts: tuple[tuple[str, int], ...] | None = None
    genesis_timestamp: int = DEFAULT_GENESIS_TIMESTAMP

    def __post_init__(self) -> None:
        if self.block_gas_limit <= 0:
            raise MockChainError("block_gas_limit must be positive")
        if self.block_period_s <= 0:
            raise MockChainError("block_period_s must be positive")
        if self.profile not in PROFILES:
            raise MockChainError(f"unknown profile: {self.profile!r}")


@dataclass(frozen=True)
class MockTx:
    tx_hash: str
    sender: str
    recipient: str | None
    value_wei: int
    gas_price_wei: int
    gas_units: int
    arrival_seq: int
    submitted_at_block: int


@dataclass(frozen=True)
class MockBlock:
    number: int
    hash: str
    parent_hash: str
    timestamp: int
    gas_used: int
    gas_limit: int
    txs: tuple[MockTx, ...] = ()


def _pool_sort_key(tx: MockTx) -> tuple[int, int]:
    return (-tx.gas_price_wei, tx.arrival_seq)


class MockChain:
    """Single-owner chain state; all public methods are thread-safe."""

    def __init__(self, config: ChainConfig | None = None):
        self.config = config or ChainConfig()
        self._lock = threading.RLock()
        self._rng = random.Random(self.config.seed)
        self._period_ms = round(self.config.block_period_s * 1000)

        accounts = self.config.initial_accounts
        if accounts is None:
            accounts = tuple(
                (derive_address(self.config.seed, i), DEFAULT_ACCOUNT_BALANCE_WEI)
                for i in range(DEFAULT_ACCOUNT_COUNT)
            )
        self._initial_balances = {addr: bal for addr, bal in accounts}
        self._balances: dict[str, int] = dict(self._initial_balances)
        self._reserved: dict[str, int] = {}

        self._pool: list[MockTx] = []
        self._arrival_seq = 0
        self._fork_generation = 0
        self._ts_ms = self.config.genesis_timestamp * 1000
        genesis = MockBlock(
            number=0,
            hash=self._block_hash(0, "0x" + "00" * 32, ()),
            parent_hash="0x" + "00" * 32,
            timestamp=self.config.genesis_timestamp,
            gas_used=0,
            gas_limit=self.config.block_gas_limit,
        )
        self._blocks: list[MockBlock] = [genesis]
        self._inclusion_log: list[dict[str, Any]] = []
        self._sent_counts: dict[str, int] = {}
        self._total_fees_wei = 0
        self._total_value_transferred_wei = 0

        # Fault state.
        self._outage_until = 0.0
        self._added_latency_ms = 0
        self._slow_factor_next = 0.0

    # -- identity helpers ---------------------------------------------------

    def account(self, index: int) -> str:
        addresses = list(self._initial_balances)
        return addresses[index]

    def _block_hash(self, number: int, parent_hash: str, tx_hashes: Iterable[str]) -> str:
        return _sha_hex(
            f"block:{self.config.seed}:{self._fork_generation}:{number}:"
            f"{parent_hash}:{','.join(tx_hashes)}"
        )

    def _tx_hash(self, arrival_seq: int) -> str:
        return _sha_hex(f"tx:{self.config.seed}:{arrival_seq}")

    # -- chain state --------------------------------------------------------

    @property
    def head_number(self) -> int:
        with self._lock:
            return self._blocks[-1].number

    def block_at(self, number: int) -> MockBlock | None:
        with self._lock:
            if 0 <= number < len(self._blocks):
                return self._blocks[number]
            return None

    def balance(self, address: str) -> int:
        with self._lock:
            return self._balances.get(address, 0)

    @property
    def pending_count(self) -> int:
        with self._lock:
            return len(self._pool)

    def submit_tx(
        self,
        sender: str,
        recipient: str | None,
        value_wei: int,
        gas_price_wei: int,
        gas_units: int = 21_000,
    ) -> str:
        """Queue a transfer; funds (value plus max fee) must be available."""
        if value_wei < 0 or gas_price_wei < 0 or gas_units <= 0:
            raise MockChainError("negative value, price, or non-positive gas")
        with self._lock:
            cost = value_wei + gas_price_wei * gas_units
            available = self._balances.get(sender, 0) - self._reserved.get(sender, 0)
            if cost > available:
                raise MockChainError(
                    "insufficient funds for gas * price + value: "
                    f"balance {available}, tx cost {cost}"
                )
            tx = MockTx(
                tx_hash=self._tx_hash(self._arrival_seq),
                sender=sender,
                recipient=recipient,
                value_wei=value_wei,
                gas_price_wei=gas_price_wei,
                gas_units=gas_units,
                arrival_seq=self._arrival_seq,
                submitted_at_block=self._blocks[-1].number,
            )
            self._arrival_seq += 1
            self._reserved[sender] = self._reserved.get(sender, 0) + cost
            self._pool.append(tx)
            self._pool.sort(key=_pool_sort_key)
            return tx.tx_hash

    def submit_random_tx(
        self,
        min_gas_price_gwei: int = 1,
        max_gas_price_gwei: int = 100,
        max_value_wei: int = 10**18,
        gas_units: int = 21_000,
    ) -> str:
        """Submit one seeded-random transfer between two default accounts."""
        addresses = list(self._initial_balances)
        sender = self._rng.choice(addresses)
        recipient = self._rng.choice([a for a in addresses if a != sender])
        value = self._rng.randint(0, max_value_wei)
        price = self._rng.randint(min_gas_price_gwei, max_gas_price_gwei) * 10**9
        return self.submit_tx(sender, recipient, value, price, gas_units)

    def advance_block(self) -> BlockRecord:
        """Produce the next block by greedy priority packing.

        Transactions too large for the remaining gas are skipped and the next
        candidate tried, so one oversized transaction cannot stall the queue.
        """
        with self._lock:
            included: list[MockTx] = []
            gas_used = 0
            for tx in self._pool:  # already in priority order
                if gas_used + tx.gas_units <= self.config.block_gas_limit:
                    included.append(tx)
                    gas_used += tx.gas_units
            included_hashes = {tx.tx_hash for tx in included}
            self._pool = [tx for tx in self._pool if tx.tx_hash not in included_hashes]

            number = self._blocks[-1].number + 1
            slow = self._slow_factor_next
            self._slow_factor_next = 0.0
            self._ts_ms += self._period_ms + round(self._period_ms * slow)

            for tx in included:
                fee = tx.gas_price_wei * tx.gas_units
                self._balances[tx.sender] = (
                    self._balances.get(tx.sender, 0) - tx.value_wei - fee
                )
                if tx.recipient is not None:
                    self._balances[tx.recipient] = (
                        self._balances.get(tx.recipient, 0) + tx.value_wei
                    )
                self._reserved[tx.sender] -= tx.value_wei + fee
                self._total_fees_wei += fee
                self._total_value_transferred_wei += tx.value_wei
                self._sent_counts[tx.sender] = self._sent_counts.get(tx.sender, 0) + 1
                self._inclusion_log.append(
                    {
                        "tx_hash": tx.tx_hash,
                        "submitted_at_block": tx.submitted_at_block,
                        "inclusion_block": number,
                        "gas_price_wei": str(tx.gas_price_wei),
                    }
                )

            block = MockBlock(
                number=number,
                hash=self._block_hash(
                    number, self._blocks[-1].hash, (t.tx_hash for t in included)
                ),
                parent_hash=self._blocks[-1].hash,
                timestamp=self._ts_ms // 1000,
                gas_used=gas_used,
                gas_limit=self.config.block_gas_limit,
                txs=tuple(included),
            )
            self._blocks.append(block)
            return self.block_record(number)

    def block_record(self, number: int) -> BlockRecord:
        """Ground-truth view of a block, with submitter-known first-seen data."""
        with self._lock:
            block = self._blocks[number]
            txs = tuple(
                TxRecord(
                    tx_hash=tx.tx_hash,
                    sender=tx.sender,
                    recipient=tx.recipient,
                    value_wei=tx.value_wei,
                    gas_price_wei=tx.gas_price_wei,
                    gas_limit=tx.gas_units,
                    first_seen_block=tx.submitted_at_block,
                    inclusion_block=block.number,
                )
                for tx in block.txs
            )
            return BlockRecord(
                number=block.number,
                hash=block.hash,
                parent_hash=block.parent_hash,
                timestamp=block.timestamp,
                gas_used=block.gas_used,
                gas_limit=block.gas_limit,
                tx_count=len(txs),
                transactions=txs,
                observed_at=now_ms(),
            )

    # -- fault injection ----------------------------------------------------

    def inject_outage(self, duration_s: float) -> None:
        with self._lock:
            self._outage_until = time.monotonic() + duration_s
        logger.info("fault: refusing connections for %.2fs", duration_s)

    def inject_latency(self, added_ms: int) -> None:
        with self._lock:
            self._added_latency_ms = max(0, int(added_ms))
        logger.info("fault: +%dms per call", added_ms)

    def inject_slow_block(self, factor: float) -> None:
        if factor < 0:
            raise MockChainError("slow_block factor must be non-negative")
        with self._lock:
            self._slow_factor_next = factor
        logger.info("fault: next block delayed by %.1fx period", factor)

    def inject_fork(self, depth: int) -> None:
        """Rewind ``depth`` blocks and rebuild them with different hashes."""
        with self._lock:
            height = self._blocks[-1].number
            if depth < 0 or depth >= height:
                raise MockChainError(
                    f"fork depth {depth} rejected at chain height {height}"
                )
            if depth == 0:
                return
            self._fork_generation += 1
            keep = len(self._blocks) - depth
            parent = self._blocks[keep - 1]
            rebuilt = []
            for old in self._blocks[keep:]:
                new = replace(
                    old,
                    parent_hash=parent.hash,
                    hash=self._block_hash(
                        old.number, parent.hash, (t.tx_hash for t in old.txs)
                    ),
                )
                rebuilt.append(new)
                parent = new
            self._blocks = self._blocks[:keep] + rebuilt
        logger.info("fault: forked %d blocks at height %d", depth, height)

    def outage_active(self) -> bool:
        return time.monotonic() < self._outage_until

    @property
    def added_latency_ms(self) -> int:
        return self._added_latency_ms

    @property
    def pending_slow_factor(self) -> float:
        return self._slow_factor_next

    # -- introspection ------------------------------------------------------

    def inclusion_log_snapshot(self) -> list[dict[str, Any]]:
        with self._lock:
            return [dict(entry) for entry in self._inclusion_log]

    def pool_snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {
                "pending": [self._tx_introspect(tx) for tx in self._pool],
                "queued": [],
            }

    def state_snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {
                "head": self._blocks[-1].number,
                "profile": self.config.profile,
                "seed": self.config.seed,
                "pending": len(self._pool),
                "balances": {a: str(b) for a, b in self._balances.items()},
                "initial_balances": {
                    a: str(b) for a, b in self._initial_balances.items()
                },
                "total_fees_wei": str(self._total_fees_wei),
                "total_value_transferred_wei": str(self._total_value_transferred_wei),
            }

    @staticmethod
    def _tx_introspect(tx: MockTx) -> dict[str, Any]:
        return {
            "tx_hash": tx.tx_hash,
            "sender": tx.sender,
            "recipient": tx.recipient,
            "value_wei": str(tx.value_wei),
            "gas_price_wei": str(tx.gas_price_wei),
            "gas_units": tx.gas_units,
            "submitted_at_block": tx.submitted_at_block,
        }

    # -- JSON-RPC surface ---------------------------------------------------

    def rpc_handle(self, method: str, params: Sequence) -> Any:
        if self.config.profile == "amb" and method in AMB_RESTRICTED:
            code, message = AMB_RESTRICTED[method]
            raise RpcMethodError(code, message)
        handler = _RPC_HANDLERS.get(method)
        if handler is None:
            raise RpcMethodError(
                -32601, f"the method {method} does not exist/is not available"
            )
        with self._lock:
            return handler(self, list(params or []))

    def _wire_tx(self, tx: MockTx, block: MockBlock | None, index: int | None) -> dict:
        return {
            "hash": tx.tx_hash,
            "from": tx.sender,
            "to": tx.recipient,
            "value": encode_quantity(tx.value_wei),
            "gasPrice": encode_quantity(tx.gas_price_wei),
            "gas": encode_quantity(tx.gas_units),
            "nonce": encode_quantity(tx.arrival_seq),
            "input": "0x",
            "blockHash": block.hash if block else None,
            "blockNumber": encode_quantity(block.number) if block else None,
            "transactionIndex": encode_quantity(index) if index is not None else None,
        }

    def _wire_block(self, block: MockBlock, full: bool) -> dict:
        txs: list[Any]
        if full:
            txs = [self._wire_tx(tx, block, i) for i, tx in enumerate(block.txs)]
        else:
            txs = [tx.tx_hash for tx in block.txs]
        return {
            "number": encode_quantity(block.number),
            "hash": block.hash,
            "parentHash": block.parent_hash,
            "timestamp": encode_quantity(block.timestamp),
            "gasUsed": encode_quantity(block.gas_used),
            "gasLimit": encode_quantity(block.gas_limit),
            "miner": ZERO_MINER,
            "size": encode_quantity(500 + 110 * len(block.txs)),
            "transactions": txs,
            "uncles": [],
        }

    def _resolve_block_tag(self, tag: Any) -> MockBlock | None:
        if tag in ("latest", "pending"):
            return self._blocks[-1]
        if tag == "earliest":
            return self._blocks[0]
        try:
            number = int(str(tag), 16) if str(tag).startswith("0x") else int(tag)
        except (TypeError, ValueError):
            raise RpcMethodError(-32602, f"invalid block tag: {tag!r}")
        if 0 <= number < len(self._blocks):
            return self._blocks[number]
        return None

    def _find_tx(self, tx_hash: str) -> tuple[MockTx, MockBlock | None, int | None]:
        for block in self._blocks:
            for i, tx in enumerate(block.txs):
                if tx.tx_hash == tx_hash:
                    return tx, block, i
        for tx in self._pool:
            if tx.tx_hash == tx_hash:
                return tx, None, None
        raise KeyError(tx_hash)


ZERO_MINER = "0x" + "00" * 20


def _h_client_version(chain: MockChain, params: list) -> str:
    return "mockchain/v0.1.0/python"


def _h_block_number(chain: MockChain, params: list) -> str:
    return encode_quantity(chain._blocks[-1].number)


def _h_get_block_by_number(chain: MockChain, params: list) -> dict | None:
    if not params:
        raise RpcMethodError(-32602, "missing block tag parameter")
    block = chain._resolve_block_tag(params[0])
    if block is None:
        return None
    full = bool(params[1]) if len(params) > 1 else False
    return chain._wire_block(block, full)


def _h_get_tx_by_hash(chain: MockChain, params: list) -> dict | None:
    if not params:
        raise RpcMethodError(-32602, "missing transaction hash")
    try:
        tx, block, index = chain._find_tx(params[0])
    except KeyError:
        return None
    return chain._wire_tx(tx, block, index)


def _h_get_tx_receipt(chain: MockChain, params: list) -> dict | None:
    if not params:
        raise RpcMethodError(-32602, "missing transaction hash")
    try:
        tx, block, index = chain._find_tx(params[0])
    except KeyError:
        return None
    if block is None:
        return None
    return {
        "transactionHash": tx.tx_hash,
        "transactionIndex": encode_quantity(index),
        "blockHash": block.hash,
        "blockNumber": encode_quantity(block.number),
        "from": tx.sender,
        "to": tx.recipient,
        "gasUsed": encode_quantity(tx.gas_units),
        "cumulativeGasUsed": encode_quantity(block.gas_used),
        "status": "0x1",
        "logs": [],
    }


def _h_call(chain: MockChain, params: list) -> str:
    return "0x"


def _h_get_logs(chain: MockChain, params: list) -> list:
    return []


def _h_gas_price(chain: MockChain, params: list) -> str:
    return encode_quantity(10**9)


def _h_estimate_gas(chain: MockChain, params: list) -> str:
    return encode_quantity(21_000)


def _h_get_balance(chain: MockChain, params: list) -> str:
    if not params:
        raise RpcMethodError(-32602, "missing address parameter")
    return encode_quantity(chain._balances.get(params[0], 0))


def _h_get_code(chain: MockChain, params: list) -> str:
    return "0x"


def _h_net_version(chain: MockChain, params: list) -> str:
    return str(CHAIN_ID)


def _h_net_listening(chain: MockChain, params: list) -> bool:
    return True


def _h_syncing(chain: MockChain, params: list) -> bool:
    return False


def _h_get_tx_count(chain: MockChain, params: list) -> str:
    if not params:
        raise RpcMethodError(-32602, "missing address parameter")
    return encode_quantity(chain._sent_counts.get(params[0], 0))


def _h_txpool_status(chain: MockChain, params: list) -> dict:
    return {"pending": encode_quantity(len(chain._pool)), "queued": "0x0"}


def _h_txpool_content(chain: MockChain, params: list) -> dict:
    pending: dict[str, dict[str, dict]] = {}
    for tx in chain._pool:
        pending.setdefault(tx.sender, {})[str(tx.arrival_seq)] = chain._wire_tx(
            tx, None, None
        )
    return {"pending": pending, "queued": {}}


def _h_debug_trace_tx(chain: MockChain, params: list) -> dict:
    return {"gas": 21_000, "failed": False, "returnValue": "", "structLogs": []}


def _h_mining(chain: MockChain, params: list) -> bool:
    return False


def _h_send_raw_tx(chain: MockChain, params: list) -> str:
    if not params or not isinstance(params[0], str):
        raise RpcMethodError(-32602, "missing raw transaction")
    # Permissive stub: acknowledge without decoding or mutating state.
    return _sha_hex(f"raw:{chain.config.seed}:{params[0]}")


_RPC_HANDLERS = {
    "web3_clientVersion": _h_client_version,
    "eth_blockNumber": _h_block_number,
    "eth_getBlockByNumber": _h_get_block_by_number,
    "eth_getTransactionByHash": _h_get_tx_by_hash,
    "eth_getTransactionReceipt": _h_get_tx_receipt,
    "eth_call": _h_call,
    "eth_getLogs": _h_get_logs,
    "eth_gasPrice": _h_gas_price,
    "eth_estimateGas": _h_estimate_gas,
    "eth_getBalance": _h_get_balance,
    "eth_getCode": _h_get_code,
    "net_version": _h_net_version,
    "net_listening": _h_net_listening,
    "eth_syncing": _h_syncing,
    "eth_getTransactionCount": _h_get_tx_count,
    "txpool_status": _h_txpool_status,
    "txpool_content": _h_txpool_content,
    "debug_traceTransaction": _h_debug_trace_tx,
    "eth_mining": _h_mining,
    "eth_sendRawTransaction": _h_send_raw_tx,
}


class _RpcHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    chain: MockChain

    def verify_request(self, request, client_address) -> bool:
        # Dropping the connection before any HTTP exchange makes an injected
        # outage look like a dead endpoint to clients.
        return not self.chain.outage_active()


class _RpcHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: _RpcHttpServer

    def _send_json(self, status: int, body: Any) -> None:
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self) -> None:
        chain = self.server.chain
        if chain.added_latency_ms:
            time.sleep(chain.added_latency_ms / 1000.0)
        try:
            length = int(self.headers.get("Content-Length", 0))
            request = json.loads(self.rfile.read(length))
        except (ValueError, TypeError):
            self._send_json(
                200,
                {
                    "jsonrpc": "2.0",
                    "id": None,
                    "error": {"code": -32700, "message": "Parse error"},
                },
            )
            return
        request_id = request.get("id") if isinstance(request, dict) else None
        method = request.get("method") if isinstance(request, dict) else None
        params = request.get("params", []) if isinstance(request, dict) else []
        if not isinstance(method, str) or not method:
            self._send_json(
                200,
                {
                    "jsonrpc": "2.0",
                    "id": request_id,
                    "error": {"code": -32600, "message": "Invalid request"},
                },
            )
            return
        try:
            result = chain.rpc_handle(method, params)
            body = {"jsonrpc": "2.0", "id": request_id, "result": result}
        except RpcMethodError as exc:
            body = {
                "jsonrpc": "2.0",
                "id": request_id,
                "error": {"code": exc.code, "message": exc.message},
            }
        except MockChainError as exc:
            body = {
                "jsonrpc": "2.0",
                "id": request_id,
                "error": {"code": -32000, "message": str(exc)},
            }
        self._send_json(200, body)

    def do_GET(self) -> None:
        chain = self.server.chain
        if self.path == "/__inclusion_log":
            self._send_json(200, chain.inclusion_log_snapshot())
        elif self.path == "/__pool":
            self._send_json(200, chain.pool_snapshot())
        elif self.path == "/__state":
            self._send_json(200, chain.state_snapshot())
        else:
            self._send_json(404, {"error": "not found"})

    def log_message(self, format: str, *args) -> None:
        logger.debug("http: " + format, *args)


class MockChainServer:
    """HTTP front end for a MockChain, optionally advancing blocks on a timer."""

    def __init__(
        self,
        chain: MockChain | ChainConfig | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        auto_advance: bool = False,
        advance_interval_s: float | None = None,
    ):
        if chain is None or isinstance(chain, ChainConfig):
            chain = MockChain(chain)
        self.chain = chain
        self._host = host
        self._port = port
        self._auto_advance = auto_advance
        self._advance_interval_s = (
            advance_interval_s
            if advance_interval_s is not None
            else chain.config.block_period_s
        )
        self._httpd: _RpcHttpServer | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    @property
    def url(self) -> str:
        if self._httpd is None:
            raise RuntimeError("server not started")
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/"

    def start(self) -> "MockChainServer":
        self._httpd = _RpcHttpServer((self._host, self._port), _RpcHandler)
        self._httpd.chain = self.chain
        serve = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        serve.start()
        self._threads.append(serve)
        if self._auto_advance:
            advancer = threading.Thread(target=self._advance_loop, daemon=True)
            advancer.start()
            self._threads.append(advancer)
        logger.info(
            "mockchain serving %s profile at %s", self.chain.config.profile, self.url
        )
        return self

    def _advance_loop(self) -> None:
        while True:
            delay = self._advance_interval_s * (1.0 + self.chain.pending_slow_factor)
            if self._stop.wait(delay):
                return
            try:
                self.chain.advance_block()
            except Exception:
                logger.exception("auto-advance failed")

    def stop(self) -> None:
        self._stop.set()
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self) -> "MockChainServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(
    config: ChainConfig | None = None,
    port: int = 0,
    auto_advance: bool = False,
    advance_interval_s: float | None = None,
) -> MockChainServer:
    """Start a mock server and return it; ``.url`` is the RPC endpoint."""
    return MockChainServer(
        config, port=port, auto_advance=auto_advance, advance_interval_s=advance_interval_s
    ).start()


def run_script(chain: MockChain, ops: Sequence[dict]) -> None:
    """Drive a chain through a scripted operation sequence.

    Supported ops: submit, submit_random, advance, fault, sleep. Account
    fields accept either a raw address or an integer index into the default
    accounts.
    """
    for op in ops:
        kind = op.get("op")
        if kind == "submit":
            chain.submit_tx(
                sender=_addr(chain, op["sender"]),
                recipient=_addr(chain, op.get("recipient")),
                value_wei=int(op.get("value_wei", 0)),
                gas_price_wei=int(op.get("gas_price_wei", 10**9)),
                gas_units=int(op.get("gas_units", 21_000)),
            )
        elif kind == "submit_random":
            for _ in range(int(op.get("count", 1))):
                chain.submit_random_tx(
                    min_gas_price_gwei=int(op.get("min_gas_price_gwei", 1)),
                    max_gas_price_gwei=int(op.get("max_gas_price_gwei", 100)),
                    max_value_wei=int(op.get("max_value_wei", 10**18)),
                    gas_units=int(op.get("gas_units", 21_000)),
                )
        elif kind == "advance":
            for _ in range(int(op.get("count", 1))):
                chain.advance_block()
        elif kind == "fault":
            fault = op.get("kind")
            if fault == "outage":
                chain.inject_outage(float(op["duration_s"]))
            elif fault == "latency":
                chain.inject_latency(int(op["added_ms"]))
            elif fault == "slow_block":
                chain.inject_slow_block(float(op["factor"]))
            elif fault == "fork":
                chain.inject_fork(int(op["depth"]))
            else:
                raise MockChainError(f"unknown fault kind: {fault!r}")
        elif kind == "sleep":
            time.sleep(float(op.get("seconds", 0)))
        else:
            raise MockChainError(f"unknown script op: {kind!r}")


def _addr(chain: MockChain, value) -> str | None:
    if value is None:
        return None
    if isinstance(value, int):
        return chain.account(value)
    return str(value)
