"""Operator entry point: probe, watch, analyze, mock.

Configuration precedence is CLI flag, then CHAINWATCH_* environment
variable, then config file (simple ``key = value`` lines), then built-in
default. Exit codes are a stable contract: 0 success, 1 operational
failure, 2 capability shortfall.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .alerts import (
    DEFAULT_RULES,
    AlertEvaluator,
    JsonlAlertSink,
    LogAlertSink,
    WebhookAlertSink,
    load_rules,
)
from .collector import (
    Collector,
    CollectorConfig,
    load_checkpoint,
    run_session,
)
from .mockchain import ChainConfig, MockChainServer, run_script
from .rpc_client import (
    Classification,
    Endpoint,
    JsonRpcClient,
    MANAGED_BASELINE_METHODS,
    probe_capabilities,
)
from .sink import emit_figure_csv, format_eth, chain_view, replay
from . import metrics as metrics_mod

logger = logging.getLogger(__name__)

ENV_PREFIX = "CHAINWATCH_"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CAPABILITY_SHORTFALL = 2


def load_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line is not 'key = value': {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


class Settings:
    """Layered lookup: CLI flag > environment > config file > default."""

    def __init__(self, args: argparse.Namespace):
        self._args = args
        config_path = getattr(args, "config", None)
        self._file = load_config_file(config_path) if config_path else {}

    def get(self, key: str, default=None, cast=str):
        value = getattr(self._args, key, None)
        if value is not None:
            return value
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            return cast(env)
        if key in self._file:
            return cast(self._file[key])
        return default


def _endpoint_from(settings: Settings) -> Endpoint:
    url = settings.get("endpoint")
    if not url:
        raise SystemExit("an --endpoint URL is required")
    return Endpoint(
        url=url,
        auth_header=settings.get("auth_header"),
        timeout_ms=settings.get("timeout_ms", 10_000, int),
        max_retries=settings.get("max_retries", 2, int),
    )


# -- probe ---------------------------------------------------------------------


def cmd_probe(args: argparse.Namespace) -> int:
    settings = Settings(args)
    try:
        endpoint = _endpoint_from(settings)
        matrix = probe_capabilities(endpoint)
    except Exception as exc:
        print(f"probe failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    width = max(len(m) for m in matrix.entries) + 2
    print(f"{'METHOD':<{width}}STATUS")
    for method, entry in matrix.entries.items():
        if entry.classification is Classification.SUPPORTED:
            status = "Supported"
        elif entry.classification is Classification.RESTRICTED:
            status = f"Restricted: {entry.message}"
        else:
            status = f"TransportFailed: {entry.message}"
        print(f"{method:<{width}}{status}")

    supported = matrix.methods(Classification.SUPPORTED)
    restricted = matrix.methods(Classification.RESTRICTED)
    failed = matrix.methods(Classification.TRANSPORT_FAILED)
    print(
        f"\n{len(supported)} supported, {len(restricted)} restricted, "
        f"{len(failed)} unreachable"
    )

    out = settings.get("out")
    if out:
        report = {
            "endpoint": endpoint.url,
            "probed_at": matrix.probed_at,
            "methods": {
                m: {
                    "classification": e.classification.value,
                    "message": e.message,
                    "latency_ms": e.latency_ms,
                }
                for m, e in matrix.entries.items()
            },
        }
        Path(out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        print(f"report written to {out}")

    if len(failed) == len(matrix.entries):
        return EXIT_FAILURE
    if not matrix.supports_all(MANAGED_BASELINE_METHODS):
        return EXIT_CAPABILITY_SHORTFALL
    return EXIT_OK


# -- watch ---------------------------------------------------------------------


def cmd_watch(args: argparse.Namespace) -> int:
    settings = Settings(args)
    try:
        endpoint = _endpoint_from(settings)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"invalid endpoint: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    out_dir = Path(settings.get("out_dir", "chainwatch-out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    config = CollectorConfig(
        poll_interval_s=settings.get("poll_interval", 10.0, float),
        datapoint_interval_s=settings.get("datapoint_interval", 60.0, float),
        start_block=settings.get("start_block", None, int),
        reorg_depth=settings.get("reorg_depth", 6, int),
    )
    rules_path = settings.get("rules")
    rules = load_rules(rules_path) if rules_path else list(DEFAULT_RULES)

    alert_sinks: list = [LogAlertSink(), JsonlAlertSink(out_dir / "alerts.jsonl")]
    webhook = settings.get("webhook")
    if webhook:
        alert_sinks.append(WebhookAlertSink(webhook))

    client = JsonRpcClient()
    try:
        checkpoint = load_checkpoint(out_dir / "checkpoint.json", config.start_block)
        collector = Collector(client, endpoint, config, checkpoint)
        summary = run_session(
            collector,
            out_dir,
            datapoint_target=settings.get("datapoints", 1000, int),
            evaluator=AlertEvaluator(rules),
            alert_sinks=tuple(alert_sinks),
            emf_namespace=settings.get("namespace", "ChainWatch"),
        )
    except Exception as exc:
        print(f"watch failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        client.close()

    (out_dir / "summary.json").write_text(
        json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"session complete: {summary.datapoints_emitted} datapoints "
        f"in {summary.duration_s:.2f}s"
    )
    print(
        f"  cycles={summary.cycles} missed_deadlines={summary.missed_deadlines} "
        f"failures={summary.cycle_failures}"
    )
    print(
        f"  blocks={summary.blocks_committed} txs={summary.txs_ingested} "
        f"snapshots={summary.snapshots}"
    )
    print(
        f"  alerts_fired={summary.alerts_fired} "
        f"alerts_resolved={summary.alerts_resolved} "
        f"reorgs={summary.reorg_rollbacks} deep_resets={summary.deep_reorg_resets}"
    )
    print(f"  out_dir={out_dir}")
    if summary.fatal_error:
        print(f"fatal: {summary.fatal_error}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# -- analyze -------------------------------------------------------------------


def cmd_analyze(args: argparse.Namespace) -> int:
    settings = Settings(args)
    in_path = settings.get("input")
    figure = settings.get("figure")
    out_path = settings.get("out") or f"{figure}.csv"
    try:
        records = list(replay(in_path))
        rows = emit_figure_csv(records, figure, out_path)
    except Exception as exc:
        print(f"analyze failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    if not records:
        print("warning: input stream is empty; wrote header only", file=sys.stderr)
    print(f"{out_path}: {rows} rows")

    view = chain_view(records)
    if figure == "fig1" and view.blocks:
        share = rows / len(view.blocks)
        print(f"  {rows}/{len(view.blocks)} blocks above threshold ({share:.1%})")
    elif figure == "fig2":
        print(f"  {rows} transactions with measurable inclusion delay")
    elif figure == "fig3" and view.blocks:
        grand_total = sum(metrics_mod.eth_transferred(b)[0] for b in view.blocks)
        print(f"  grand total {format_eth(grand_total)} ETH over {len(view.blocks)} blocks")
    elif figure == "fig4":
        print(f"  {rows} ranked address entries from {len(view.transactions)} txs")
    return EXIT_OK


# -- mock ----------------------------------------------------------------------


def cmd_mock(args: argparse.Namespace) -> int:
    settings = Settings(args)
    config = ChainConfig(
        seed=settings.get("seed", 1, int),
        profile=settings.get("profile", "amb"),
        block_period_s=settings.get("block_period", 12.0, float),
        block_gas_limit=settings.get("block_gas_limit", 30_000_000, int),
    )
    advance_interval = settings.get("advance_interval", None, float)
    server = MockChainServer(
        config,
        port=settings.get("port", 8545, int),
        auto_advance=advance_interval is not None,
        advance_interval_s=advance_interval,
    )
    try:
        server.start()
    except OSError as exc:
        print(f"cannot bind port: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    print(f"mockchain ({config.profile} profile, seed {config.seed}) at {server.url}")
    script_path = settings.get("script")
    try:
        if script_path:
            with open(script_path, encoding="utf-8") as fh:
                ops = json.load(fh)
            run_script(server.chain, ops)
            print(f"script {script_path} complete; head at {server.chain.head_number}")
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("stopping")
        return EXIT_OK
    except Exception as exc:
        print(f"mock failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        server.stop()


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainwatch",
        description="Vendor-neutral Ethereum node telemetry and analysis",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    probe = sub.add_parser("probe", help="classify which RPC methods an endpoint answers")
    probe.add_argument("--endpoint", help="JSON-RPC URL")
    probe.add_argument("--out", help="write JSON report here")
    probe.add_argument("--auth-header", help="verbatim HTTP header line")
    probe.add_argument("--timeout-ms", type=int)
    probe.add_argument("--max-retries", type=int)
    probe.add_argument("--config", help="config file (key = value lines)")
    probe.set_defaults(func=cmd_probe)

    watch = sub.add_parser("watch", help="collect telemetry on a fixed cadence")
    watch.add_argument("--endpoint", help="JSON-RPC URL")
    watch.add_argument("--poll-interval", type=float, help="seconds between polls")
    watch.add_argument(
        "--datapoint-interval", type=float, help="seconds between metric batches"
    )
    watch.add_argument("--datapoints", type=int, help="stop after this many batches")
    watch.add_argument("--out-dir", help="output directory")
    watch.add_argument("--rules", help="JSON alert rules file")
    watch.add_argument("--start-block", type=int, help="first block to ingest")
    watch.add_argument("--reorg-depth", type=int)
    watch.add_argument("--auth-header")
    watch.add_argument("--timeout-ms", type=int)
    watch.add_argument("--max-retries", type=int)
    watch.add_argument("--namespace", help="EMF namespace")
    watch.add_argument("--webhook", help="POST alert events to this URL")
    watch.add_argument("--config")
    watch.set_defaults(func=cmd_watch)

    analyze = sub.add_parser("analyze", help="derive figure CSVs from recorded streams")
    analyze.add_argument("--in", dest="input", required=True, help="records.jsonl path")
    analyze.add_argument(
        "--figure", required=True, choices=["fig1", "fig2", "fig3", "fig4"]
    )
    analyze.add_argument("--out", help="CSV output path")
    analyze.add_argument("--config")
    analyze.set_defaults(func=cmd_analyze)

    mock = sub.add_parser("mock", help="serve the deterministic mock chain")
    mock.add_argument("--profile", choices=["amb", "permissive"])
    mock.add_argument("--port", type=int)
    mock.add_argument("--seed", type=int)
    mock.add_argument("--script", help="JSON array of scripted operations")
    mock.add_argument("--block-period", type=float, help="logical seconds per block")
    mock.add_argument("--block-gas-limit", type=int)
    mock.add_argument(
        "--advance-interval",
        type=float,
        help="auto-advance a block every this many real seconds",
    )
    mock.add_argument("--config")
    mock.set_defaults(func=cmd_mock)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
