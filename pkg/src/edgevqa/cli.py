"""Command line entrypoint: signal-server, gateway, robot-sim, bench, score.

Every subcommand takes --config (TOML or JSON, same schema as BenchConfig as
documented in docs/config.md) plus flag overrides. Exit codes: 0 ok,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from edgevqa import __version__


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgevqa",
        description="Edge-deployed VLM perception pipeline: signaling, media transport, "
        "inference gateway, and a latency/accuracy benchmark harness.",
    )
    parser.add_argument("--version", action="version", version=f"edgevqa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("signal-server", help="run the session signaling server")
    p.add_argument("--signal-port", type=int, default=8443, help="TCP port (default 8443)")
    p.add_argument("--host", default="127.0.0.1")

    p = sub.add_parser("gateway", help="run the inference gateway")
    p.add_argument("--config", help="TOML/JSON config file")
    p.add_argument("--signal", default="127.0.0.1:8443", help="signaling server host:port")
    p.add_argument("--peer-id", default="gateway")
    p.add_argument("--deployment", choices=["edge", "cloud"], default="edge")
    p.add_argument("--profile", default="edge-llama")
    p.add_argument("--profile-dir", action="append", default=[], help="extra profile directories")
    p.add_argument("--remote-url", help="forward inference to a remote HTTP backend")
    p.add_argument("--dataset", help="dataset JSONL providing gold answers for the mock")
    p.add_argument("--http-port", type=int, help="enable the /v1 HTTP+bridge listener")
    p.add_argument("--media-port", type=int, default=0, help="UDP media port (0 = ephemeral)")
    p.add_argument("--target-delay-ms", type=float, default=50.0)
    p.add_argument("--time-scale", type=float, default=1.0)
    p.add_argument("--backend-timeout", type=float, default=30.0)
    p.add_argument("--static-dir", help="serve the operator UI from this directory")

    p = sub.add_parser("robot-sim", help="replay a dataset as a live robot")
    p.add_argument("--config", help="TOML/JSON config file")
    p.add_argument("--dataset", required=True, help="dataset JSONL to replay")
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--schedule", default="per_frame", help="per_frame | paced:<ms> | burst:<n>")
    p.add_argument("--signal", default="127.0.0.1:8443", help="signaling server host:port")
    p.add_argument("--peer-id", default="robot")
    p.add_argument("--gateway-peer", default="gateway")
    p.add_argument("--initial-bitrate-kbps", type=float, default=2000.0)
    p.add_argument("--mtu-payload", type=int, default=1200)
    p.add_argument("--out", default="preds.jsonl", help="predictions JSONL output")
    p.add_argument("--traces-out", help="wall-clock traces JSONL output")

    p = sub.add_parser("bench", help="run the full edge-vs-cloud benchmark")
    p.add_argument("--config", help="TOML/JSON config file")
    p.add_argument("--dataset", help="dataset JSONL (omit for the seeded synthetic set)")
    p.add_argument("--items", type=int, help="synthetic dataset size")
    p.add_argument("--schema", choices=["robo2vlm", "robot_collected"], help="synthetic schema")
    p.add_argument(
        "--profile",
        action="append",
        dest="profiles",
        metavar="DEPLOYMENT:NAME",
        help="profile entry, e.g. edge:edge-llama (repeatable)",
    )
    p.add_argument("--profile-dir", action="append", default=[])
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--fps", type=float)
    p.add_argument("--schedule")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--format", action="append", dest="formats", choices=["json", "csv", "md"])
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--time-scale", type=float, help="scale simulated sleeps (0.1 for CI)")
    p.add_argument("--strict-mc", action="store_true")
    p.add_argument("--spawn", action="store_true", help="run components as separate processes")

    p = sub.add_parser("score", help="score a predictions JSONL offline")
    p.add_argument("preds", help="predictions JSONL ({id, pred, trace?} per line)")
    p.add_argument("--dataset", required=True, help="dataset JSONL with gold answers")
    p.add_argument("--strict-mc", action="store_true")
    p.add_argument("--normalize-articles", action="store_true")
    p.add_argument("--out", help="write the report to this directory")
    p.add_argument("--format", action="append", dest="formats", choices=["json", "csv", "md"])
    p.add_argument("--no-figures", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "signal-server":
            return _cmd_signal_server(args)
        if args.command == "gateway":
            return _cmd_gateway(args)
        if args.command == "robot-sim":
            return _cmd_robot_sim(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "score":
            return _cmd_score(args)
        parser.error(f"unknown command {args.command}")
    except KeyboardInterrupt:
        return 1
    except Exception as e:
        logging.getLogger("edgevqa").error("%s: %s", type(e).__name__, e)
        return 1
    return 0


def _split_host_port(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def _cmd_signal_server(args) -> int:
    from edgevqa.signaling import SignalingServer

    async def serve():
        server = SignalingServer(host=args.host, port=args.signal_port)
        await server.start()
        print(f"signal-server listening on {args.host}:{server.port}", flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await server.stop()

    asyncio.run(serve())
    return 0


def _cmd_gateway(args) -> int:
    from edgevqa.dataset import load_dataset, make_answer_table
    from edgevqa.gateway import GatewayConfig, GatewayService

    host, port = _split_host_port(args.signal)
    table = None
    if args.dataset:
        table = make_answer_table(load_dataset(args.dataset))
    config = GatewayConfig(
        peer_id=args.peer_id,
        signal_host=host,
        signal_port=port,
        media_port=args.media_port,
        deployment=args.deployment,
        profile=args.profile,
        profile_dirs=tuple(args.profile_dir),
        remote_url=args.remote_url,
        backend_timeout_s=args.backend_timeout,
        time_scale=args.time_scale,
        target_delay_ms=args.target_delay_ms,
        http_port=args.http_port,
        static_dir=args.static_dir,
    )

    async def serve():
        gateway = GatewayService(config, answer_table=table)
        await gateway.start()
        where = f"; http on 127.0.0.1:{gateway.http_port}" if config.http_port is not None else ""
        print(f"gateway '{config.peer_id}' up (profile {config.profile}, {config.deployment}){where}", flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await gateway.stop()

    asyncio.run(serve())
    return 0


def _cmd_robot_sim(args) -> int:
    from edgevqa.dataset import load_dataset
    from edgevqa.robot_sim import ReplayPlan, RobotSimulator, write_predictions

    host, port = _split_host_port(args.signal)
    manifest = load_dataset(args.dataset)
    plan = ReplayPlan(manifest=manifest, fps=args.fps, schedule=args.schedule)

    async def run():
        robot = RobotSimulator(
            host,
            port,
            peer_id=args.peer_id,
            gateway_peer=args.gateway_peer,
            media_params={
                "initial_bitrate_kbps": args.initial_bitrate_kbps,
                "mtu_payload": args.mtu_payload,
            },
        )
        await robot.connect()
        try:
            return await robot.run_replay(plan)
        finally:
            await robot.close()

    result = asyncio.run(run())
    write_predictions(result, args.out, args.traces_out)
    ok = sum(o.ok for o in result.outcomes)
    print(f"robot-sim: {ok}/{len(result.outcomes)} answered; predictions in {args.out}", flush=True)
    return 0 if not result.partial else 1


def _cmd_bench(args) -> int:
    from edgevqa.bench import BenchConfig, run_benchmark

    cfg = BenchConfig.from_file(args.config) if args.config else BenchConfig()
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if args.items is not None:
        cfg.synthetic_items = args.items
    if args.schema is not None:
        cfg.synthetic_schema = args.schema
    if args.profiles:
        entries = []
        for spec in args.profiles:
            deployment, _, name = spec.partition(":")
            entries.append((deployment, name))
        cfg.profiles = entries
    if args.profile_dir:
        cfg.profile_dirs = tuple(args.profile_dir)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.fps is not None:
        cfg.fps = args.fps
    if args.schedule is not None:
        cfg.schedule = args.schedule
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.formats:
        cfg.formats = args.formats
    if args.no_figures:
        cfg.figures = False
    if args.time_scale is not None:
        cfg.time_scale = args.time_scale
    if args.strict_mc:
        cfg.strict_mc = True
    if args.spawn:
        cfg.spawn = True
    if cfg.spawn:
        from edgevqa.spawn import run_benchmark_spawned

        result = run_benchmark_spawned(cfg)
    else:
        result = run_benchmark(cfg)
    failures = [r for r in result.runs if r.error]
    for run in result.runs:
        if run.error:
            print(f"bench: {run.deployment}/{run.profile} FAILED: {run.error}")
        else:
            print(
                f"bench: {run.deployment}/{run.profile} accuracy={run.report.accuracy:.4f} "
                f"mean_e2e={run.report.latency.mean_ms:.2f} ms"
            )
    for cmp in result.comparisons:
        print(
            f"bench: {cmp.edge_profile} vs {cmp.cloud_profile}: "
            f"latency reduction {cmp.latency_reduction_pct:.2f}%, "
            f"accuracy delta {cmp.accuracy_delta:+.4f}"
        )
    print(f"bench: artifacts in {result.output_dir}")
    return 1 if failures else 0


def _cmd_score(args) -> int:
    from edgevqa.bench import score_predictions_file
    from edgevqa.dataset import load_dataset
    from edgevqa.evaluation import emit_report

    manifest = load_dataset(args.dataset)
    report = score_predictions_file(
        args.preds,
        manifest,
        strict_mc=args.strict_mc,
        strip_articles=args.normalize_articles,
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for fmt in args.formats or ["json", "csv", "md"]:
            emit_report(report, fmt, out / f"report.{fmt}")
        if not args.no_figures:
            from edgevqa import figures

            figures.fig_stage_shares(report, out / "stage_shares.png")
            figures.fig_per_category(report, out / "category_accuracy.png")
    return 0


if __name__ == "__main__":
    sys.exit(main())
