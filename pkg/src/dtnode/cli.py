"""Command-line front end: node daemon, reference BDMs, scenarios, event tail."""

import argparse
import asyncio
import json
import logging
import signal
import sys

from .bundle import EndpointError
from .client import DispatchClient
from .config import ConfigError, NodeConfig, load_node_config
from .node import BpaNode
from .wire import RpcError, TOPICS, WireError, actions_from_doc, validate_action_list


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtnode", description="Store-and-forward bundle node and tooling.")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="node daemon")
    node_sub = node.add_subparsers(dest="node_command", required=True)
    run = node_sub.add_parser("run", help="run a node until interrupted")
    run.add_argument("--config", help="YAML config file")
    run.add_argument("--name", help="node name (overrides config)")
    run.add_argument("--dispatch", help="dispatch listener, host:port or unix:PATH")
    run.add_argument("--app", help="application listener")
    run.add_argument("--cla", help="convergence-layer listener")
    run.add_argument("--dial", action="append", default=[],
                     help="peer convergence-layer address to dial at startup (repeatable)")
    run.add_argument("--default-actions", help="JSON action list for new bundles")
    run.add_argument("--wire-log", help="JSONL capture of dispatch-plane traffic")
    run.set_defaults(func=cmd_node_run)

    bdm = sub.add_parser("bdm", help="reference dispatch managers")
    bdm_sub = bdm.add_subparsers(dest="bdm_command", required=True)
    static = bdm_sub.add_parser("static", help="fixed routing table")
    static.add_argument("--node", required=True, help="dispatch address of the node")
    static.add_argument("--routes", required=True, help="routes file: 'dest next-hop' lines")
    static.set_defaults(func=cmd_bdm_static)
    opportunistic = bdm_sub.add_parser("opportunistic", help="forward to whoever is up")
    opportunistic.add_argument("--node", required=True)
    opportunistic.add_argument("--flood", action="store_true",
                               help="copy to every active peer instead of one")
    opportunistic.set_defaults(func=cmd_bdm_opportunistic)
    contact = bdm_sub.add_parser("contact", help="contact-plan routing")
    contact.add_argument("--node", required=True)
    contact.add_argument("--plan", required=True,
                         help="plan file: 'from to start end [owlt]' lines, epoch ms")
    contact.set_defaults(func=cmd_bdm_contact)

    scenario = sub.add_parser("scenario", help="scripted multi-node runs")
    scenario_sub = scenario.add_subparsers(dest="scenario_command", required=True)
    scenario_run = scenario_sub.add_parser("run", help="run a scenario file")
    scenario_run.add_argument("file", help="scenario YAML")
    scenario_run.add_argument("--out", help="run directory (default: a fresh temp dir)")
    scenario_run.set_defaults(func=cmd_scenario_run)

    events = sub.add_parser("events", help="observe a node's event stream")
    events_sub = events.add_subparsers(dest="events_command", required=True)
    tail = events_sub.add_parser("tail", help="print events as JSON lines")
    tail.add_argument("--node", required=True, help="dispatch address of the node")
    tail.add_argument("--topics", help="comma-separated topics (default: all)")
    tail.set_defaults(func=cmd_events_tail)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr)
    return args.func(args)


def _fail(message: str) -> int:
    print(f"dtnode: {message}", file=sys.stderr)
    return 2


# -- node ---------------------------------------------------------------------


def cmd_node_run(args) -> int:
    try:
        config = _node_config(args)
    except (ConfigError, ValueError, OSError) as exc:
        return _fail(f"bad config: {exc}")
    try:
        return asyncio.run(_serve_node(config))
    except OSError as exc:
        return _fail(f"cannot listen: {exc}")


def _node_config(args) -> NodeConfig:
    if args.config:
        config = load_node_config(args.config)
    else:
        if not args.name:
            raise ConfigError("--name (or --config) is required")
        config = NodeConfig(node_name=args.name)
    if args.config and args.name:
        config.node_name = args.name
    if args.dispatch:
        config.dispatch = args.dispatch
    if args.app:
        config.app = args.app
    if args.cla:
        config.cla = args.cla
    if args.dial:
        config.dials = list(config.dials) + args.dial
    if args.wire_log:
        config.wire_log = args.wire_log
    if args.default_actions:
        try:
            actions = actions_from_doc(json.loads(args.default_actions))
            validate_action_list(actions)
        except (ValueError, WireError) as exc:
            raise ConfigError(f"--default-actions: {exc}")
        config.default_actions = actions
    config.validate()
    return config


async def _serve_node(config: NodeConfig) -> int:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    node = BpaNode(config)
    await node.start()
    # handlers are installed before READY so a prompt signal is never lost
    print("READY " + json.dumps(node.describe(), separators=(",", ":")), flush=True)
    await stop.wait()
    await node.stop()
    return 0


# -- reference BDMs -------------------------------------------------------------


def cmd_bdm_static(args) -> int:
    from .bdm.static import RoutesFileError, StaticBdm, load_routes
    try:
        routes = load_routes(args.routes)
    except (RoutesFileError, OSError) as exc:
        return _fail(str(exc))
    return _run_bdm(args.node, "static-bdm", lambda client: StaticBdm(client, routes))


def cmd_bdm_opportunistic(args) -> int:
    from .bdm.opportunistic import OpportunisticBdm
    return _run_bdm(args.node, "opportunistic-bdm",
                    lambda client: OpportunisticBdm(client, single_copy=not args.flood))


def cmd_bdm_contact(args) -> int:
    from .bdm.contact import ContactBdm, PlanFileError, load_plan
    try:
        plan = load_plan(args.plan)
    except (PlanFileError, OSError) as exc:
        return _fail(str(exc))
    return _run_bdm(args.node, "contact-bdm", lambda client: ContactBdm(client, plan))


def _run_bdm(address: str, name: str, factory) -> int:
    async def run() -> int:
        try:
            client = await DispatchClient.connect(address, role="bdm", node=name)
        except (RpcError, WireError, OSError, ValueError) as exc:
            return _fail(f"cannot connect to {address}: {exc}")
        bdm = factory(client)
        bdm.on_ready = lambda: print("READY", flush=True)
        try:
            await bdm.run()
        finally:
            await client.close()
        print("dtnode: node connection lost", file=sys.stderr)
        return 1

    try:
        return asyncio.run(run())
    except KeyboardInterrupt:
        return 0


# -- scenario --------------------------------------------------------------------


def cmd_scenario_run(args) -> int:
    from .scenario import ScenarioError, run_scenario_file
    try:
        return asyncio.run(run_scenario_file(args.file, out_dir=args.out))
    except (ScenarioError, OSError) as exc:
        return _fail(str(exc))
    except KeyboardInterrupt:
        return 130


# -- events ------------------------------------------------------------------------


def cmd_events_tail(args) -> int:
    topics = TOPICS
    if args.topics:
        topics = tuple(t.strip() for t in args.topics.split(",") if t.strip())
        unknown = [t for t in topics if t not in TOPICS]
        if unknown:
            return _fail(f"unknown topics: {', '.join(unknown)}")

    async def tail() -> int:
        try:
            client = await DispatchClient.connect(
                args.node, role="monitor", node="events-tail")
        except (RpcError, WireError, OSError, ValueError, EndpointError) as exc:
            return _fail(f"cannot connect to {args.node}: {exc}")
        try:
            await client.subscribe(topics)
            while True:
                topic, timestamp, payload = await client.next_event()
                print(json.dumps(
                    {"topic": topic, "timestamp": timestamp, "payload": payload},
                    separators=(",", ":"), ensure_ascii=False), flush=True)
        except ConnectionError:
            print("dtnode: node connection lost", file=sys.stderr)
            return 1
        finally:
            await client.close()

    try:
        return asyncio.run(tail())
    except KeyboardInterrupt:
        return 0
