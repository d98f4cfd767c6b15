"""The node daemon: store, action engine, event bus, and all three listeners.

Concurrency contract: one event loop owns everything. Connection handlers,
the engine, and the expiry scan run as tasks on that loop; store mutations
happen in synchronous methods, so each mutation plus its event publications
is atomic with respect to every other task.
"""

from __future__ import annotations

import asyncio
import copy
import json
import logging
from dataclasses import replace

from .bundle import Bundle, BundleId, BundleMetadata, EndpointId, is_expired, now_ms
from .bus import EventBus, Subscriber
from .cla import ClaError, LinkManager
from .config import NodeConfig, format_address, parse_address
from .store import DISPATCH_PENDING, FORWARD_PENDING, BundleStore, StoredBundle
from .wire import (
    CORE_ACTION_DESCRIPTORS,
    LARGE_LINE_CAP,
    LINE_CAP,
    PROTOCOL_VERSION,
    TOPICS,
    VERB_DROP,
    VERB_SEND_TO,
    Action,
    ActionListError,
    Envelope,
    RpcError,
    WireError,
    actions_from_doc,
    bundle_id_from_doc,
    bundle_id_to_doc,
    bundle_to_doc,
    decode_message,
    encode_message,
    hello_body,
    metadata_to_doc,
    validate_action_list,
)

log = logging.getLogger(__name__)

DISPATCH_ROLES = ("bdm", "monitor")
APP_ROLES = ("app",)

REASON_NO_LINK = "no-active-link"
REASON_LINK_CLOSED = "link-closed"


class WireLog:
    """Append-only JSONL capture of every dispatch-listener message."""

    def __init__(self, path: str):
        self._fh = open(path, "w", encoding="utf-8")

    def record(self, conn_id: str, direction: str, line: bytes) -> None:
        entry = {
            "t": now_ms(),
            "conn": conn_id,
            "dir": direction,
            "line": line.decode("utf-8", errors="replace").rstrip("\n"),
        }
        self._fh.write(json.dumps(entry, separators=(",", ":"), ensure_ascii=False) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class ServerConnection:
    """One accepted dispatch or app connection.

    Outbound messages flow through a bounded queue drained by a writer task
    that assigns the per-direction seq; the hello is queued first so it is
    always seq 0. A full queue means a slow consumer: the connection drops.
    """

    def __init__(self, node: "BpaNode", conn_id: str, reader, writer, *,
                 roles, line_cap: int, logged: bool):
        self.node = node
        self.conn_id = conn_id
        self.reader = reader
        self.writer = writer
        self.roles = roles
        self.line_cap = line_cap
        self.logged = logged
        self.role: str | None = None
        self.peer_name: str | None = None
        self.out_q: asyncio.Queue = asyncio.Queue(maxsize=node.config.subscriber_queue_cap)
        self.subscriber = Subscriber(name=conn_id, queue=self.out_q, on_overflow=self.abort)
        self._writer_task: asyncio.Task | None = None
        self._used_rpc_ids: set = set()
        self._closing = False

    def enqueue(self, kind: str, body: dict) -> None:
        if self._closing:
            return
        try:
            self.out_q.put_nowait((kind, body))
        except asyncio.QueueFull:
            log.warning("connection %s outbound queue full, dropping it", self.conn_id)
            self.abort()

    def abort(self) -> None:
        """Hard-close from sync context; serve() unblocks and cleans up."""
        if self._closing:
            return
        self._closing = True
        transport = self.writer.transport
        if transport is not None:
            transport.abort()
        else:
            self.writer.close()

    async def serve(self) -> None:
        self.node.connections.add(self)
        self.node.track_connection_task(asyncio.current_task())
        self._writer_task = asyncio.get_running_loop().create_task(self._write_loop())
        self.enqueue("hello", hello_body("bpa", self.node.name))
        prev_seq = -1
        try:
            while True:
                try:
                    line = await self.reader.readline()
                except (asyncio.LimitOverrunError, ValueError) as exc:
                    raise WireError("malformed-document", f"line over cap: {exc}")
                if not line:
                    break
                if self.logged and self.node.wire_log is not None:
                    self.node.wire_log.record(self.conn_id, "in", line)
                env = decode_message(line, prev_seq=prev_seq, line_cap=self.line_cap)
                prev_seq = env.seq
                if self.role is None:
                    self._handle_hello(env)
                else:
                    await self._handle(env)
        except WireError as exc:
            log.warning("connection %s protocol error: %s", self.conn_id, exc)
        except (ConnectionError, OSError):
            pass
        finally:
            await self._teardown()

    def _handle_hello(self, env: Envelope) -> None:
        if env.kind != "hello":
            raise WireError("protocol-error", f"first message must be hello, got {env.kind}")
        body = env.body
        if body.get("protocol-version") != PROTOCOL_VERSION:
            raise WireError("protocol-error", f"unsupported version {body.get('protocol-version')!r}")
        role = body.get("role")
        if role not in self.roles:
            raise WireError("protocol-error", f"role {role!r} not served on this listener")
        node = body.get("node")
        if not isinstance(node, str) or not node:
            raise WireError("protocol-error", "hello without node name")
        self.role = role
        self.peer_name = node
        if self.logged:
            self.node.bus.add(self.subscriber)

    async def _handle(self, env: Envelope) -> None:
        if env.kind == "subscribe" and self.logged:
            topics = env.body.get("topics")
            if not isinstance(topics, list) or any(t not in TOPICS for t in topics):
                raise WireError("protocol-error", f"bad subscribe topics: {topics!r}")
            self.subscriber.topics.update(topics)
        elif env.kind == "rpc-request":
            await self._handle_rpc(env.body)
        else:
            raise WireError("protocol-error", f"unexpected {env.kind} from client")

    async def _handle_rpc(self, body: dict) -> None:
        rid = body.get("id")
        method = body.get("method")
        params = body.get("params", {})
        if not isinstance(rid, (str, int)) or isinstance(rid, bool):
            raise WireError("protocol-error", f"bad rpc id: {rid!r}")
        if rid in self._used_rpc_ids:
            raise WireError("protocol-error", f"rpc id {rid!r} reused")
        self._used_rpc_ids.add(rid)
        if not isinstance(method, str) or not isinstance(params, dict):
            self.enqueue("rpc-response", {
                "id": rid,
                "error": {"code": "bad-params", "message": "method/params malformed"},
            })
            return
        try:
            if self.logged:
                result = await self.node.rpc_dispatch(method, params)
            else:
                result = await self.node.rpc_app(self, method, params)
        except RpcError as exc:
            self.enqueue("rpc-response", {
                "id": rid,
                "error": {"code": exc.code, "message": exc.message},
            })
            return
        self.enqueue("rpc-response", {"id": rid, "result": result})

    async def _write_loop(self) -> None:
        seq = 0
        try:
            while True:
                kind, body = await self.out_q.get()
                data = encode_message(Envelope(kind, seq, body), line_cap=self.line_cap)
                seq += 1
                if self.logged and self.node.wire_log is not None:
                    self.node.wire_log.record(self.conn_id, "out", data)
                self.writer.write(data)
                await self.writer.drain()
        except (ConnectionError, OSError):
            self.abort()
        except WireError as exc:
            log.error("connection %s unencodable message: %s", self.conn_id, exc)
            self.abort()

    async def _teardown(self) -> None:
        self._closing = True
        self.node.connections.discard(self)
        self.node.bus.remove(self.subscriber)
        self.node.apps.release(self)
        if self._writer_task is not None:
            self._writer_task.cancel()
            try:
                await self._writer_task
            except asyncio.CancelledError:
                pass
        self.writer.close()


class BpaNode:
    """One running node: bundle store, engine, bus, and the three listeners."""

    def __init__(self, config: NodeConfig):
        config.validate()
        self.config = config
        self.name = config.node_name
        self.store = BundleStore()
        self.bus = EventBus()
        self.default_actions: list[Action] = list(config.default_actions)
        self.links = LinkManager(
            self.name,
            on_link_up=self._on_link_up,
            on_link_down=self._on_link_down,
            on_receive=self._on_cla_receive,
        )
        from .appagent import AppRegistry  # late import; appagent needs our types
        self.apps = AppRegistry(self)
        self.connections: set[ServerConnection] = set()
        self.wire_log: WireLog | None = None
        self._engine_wake = asyncio.Event()
        self._tasks: list[asyncio.Task] = []
        self._conn_tasks: set[asyncio.Task] = set()
        self._servers: list = []
        self._conn_counter = 0
        self.dispatch_address: str | None = None
        self.app_address: str | None = None

    # -- lifecycle -----------------------------------------------------

    async def start(self) -> None:
        if self.config.wire_log:
            self.wire_log = WireLog(self.config.wire_log)
        self.dispatch_address = await self._start_listener(
            self.config.dispatch, self._accept_dispatch, LINE_CAP)
        self.app_address = await self._start_listener(
            self.config.app, self._accept_app, LARGE_LINE_CAP)
        await self.links.start(self.config.cla)
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._engine_loop()))
        self._tasks.append(loop.create_task(self._expiry_loop()))
        self.links.start_dials(self.config.dials)

    async def _start_listener(self, address: str, handler, line_cap: int) -> str:
        addr = parse_address(address)
        # generous slack over the cap so decode sees the line and reports it
        limit = line_cap + 4096
        if addr[0] == "unix":
            server = await asyncio.start_unix_server(handler, path=addr[1], limit=limit)
            bound = format_address(addr)
        else:
            server = await asyncio.start_server(handler, host=addr[1], port=addr[2], limit=limit)
            bound = f"{addr[1]}:{server.sockets[0].getsockname()[1]}"
        self._servers.append(server)
        return bound

    def track_connection_task(self, task: asyncio.Task) -> None:
        self._conn_tasks.add(task)
        task.add_done_callback(self._conn_tasks.discard)

    async def stop(self) -> None:
        for server in self._servers:
            server.close()
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        await self.links.stop()
        for conn in list(self.connections):
            conn.abort()
        for task in list(self._conn_tasks):
            try:
                await task
            except asyncio.CancelledError:
                pass
        for server in self._servers:
            await server.wait_closed()
        if self.wire_log is not None:
            self.wire_log.close()

    def _next_conn_id(self, prefix: str) -> str:
        self._conn_counter += 1
        return f"{prefix}{self._conn_counter}"

    async def _accept_dispatch(self, reader, writer) -> None:
        conn = ServerConnection(self, self._next_conn_id("d"), reader, writer,
                                roles=DISPATCH_ROLES, line_cap=LINE_CAP, logged=True)
        await conn.serve()

    async def _accept_app(self, reader, writer) -> None:
        conn = ServerConnection(self, self._next_conn_id("a"), reader, writer,
                                roles=APP_ROLES, line_cap=LARGE_LINE_CAP, logged=False)
        await conn.serve()

    # -- events ----------------------------------------------------------

    def publish(self, topic: str, payload: dict) -> None:
        body = {"topic": topic, "timestamp": now_ms(), "payload": payload}
        self.bus.publish(topic, ("event", body))

    def _md_doc(self, sb: StoredBundle) -> dict:
        return metadata_to_doc(sb.metadata())

    def _on_link_up(self, peer: str, address: str) -> None:
        self.publish("link-up", {"peer": peer, "address": address})
        self._engine_wake.set()

    def _on_link_down(self, peer: str, address: str) -> None:
        self.publish("link-down", {"peer": peer, "address": address})

    def _on_cla_receive(self, bundle: Bundle, peer: str) -> None:
        bundle = replace(bundle, previous_node=EndpointId(peer))
        self.ingest(bundle)

    # -- ingest ----------------------------------------------------------

    def ingest(self, bundle: Bundle) -> BundleId:
        """Single entry point for bundles from apps and CLA links."""
        bid = bundle.id
        if self.store.seen(bid):
            return bid
        self.store.mark_seen(bid)
        now = now_ms()
        if is_expired(bundle, now):
            self.publish("bundle-expired", {"metadata": metadata_to_doc(
                self._loose_metadata(bundle, now))})
            return bid
        if bundle.destination.node_name == self.name:
            if self.apps.deliver_local(bundle):
                self.publish("bundle-delivered", {"metadata": metadata_to_doc(
                    self._loose_metadata(bundle, now))})
            else:
                sb = StoredBundle(bundle, arrival_time=now,
                                  retention={DISPATCH_PENDING},
                                  update_seq=self.store.next_update_seq())
                self.store.insert(sb)
                self.publish("bundle-received", {"metadata": self._md_doc(sb)})
            return bid
        sb = StoredBundle(bundle, arrival_time=now,
                          retention={FORWARD_PENDING},
                          update_seq=self.store.next_update_seq(),
                          actions=list(self.default_actions))
        self.store.insert(sb)
        self.publish("bundle-received", {"metadata": self._md_doc(sb)})
        self.publish("forwarding-required", {"metadata": self._md_doc(sb)})
        self._engine_wake.set()
        return bid

    def _loose_metadata(self, bundle: Bundle, now: int) -> BundleMetadata:
        # metadata for a bundle that never enters the store (delivered or
        # expired on arrival); stamped so update-seq stays node-unique
        return BundleMetadata(
            id=bundle.id,
            destination=bundle.destination,
            lifetime=bundle.lifetime,
            payload_length=len(bundle.payload),
            arrival_time=now,
            update_seq=self.store.next_update_seq(),
            report_to=bundle.report_to,
            previous_node=bundle.previous_node,
            extension_blocks=bundle.extension_blocks,
        )

    # -- engine ----------------------------------------------------------

    async def _engine_loop(self) -> None:
        while True:
            await self._engine_wake.wait()
            self._engine_wake.clear()
            while True:
                sb = self.store.next_eligible()
                if sb is None:
                    break
                await self._execute_step(sb)
                await asyncio.sleep(0)

    async def _execute_step(self, sb: StoredBundle) -> None:
        index = sb.exec_cursor
        action = sb.actions[index]
        if action.verb == VERB_SEND_TO:
            await self._execute_send(sb, index, action.args["node"])
        elif action.verb == VERB_DROP:
            self._execute_drop(sb, index)
        else:
            # unreachable for validated lists; treat as a failed action
            self._record_failure(sb, index, f"unsupported verb {action.verb!r}")

    async def _execute_send(self, sb: StoredBundle, index: int, peer: str) -> None:
        stamp = sb.update_seq
        md = self._md_doc(sb)
        link = self.links.active_link(peer)
        if link is None:
            self._record_failure(sb, index, REASON_NO_LINK)
            return
        try:
            await link.transmit(sb.bundle)
        except (ClaError, ConnectionError, OSError):
            if self._still_current(sb, stamp):
                self._record_failure(sb, index, REASON_LINK_CLOSED)
            return
        # the copy left this node even if the list was replaced mid-flight
        self.publish("bundle-forwarded", {"metadata": md, "action-index": index, "peer": peer})
        if self._still_current(sb, stamp):
            sb.outcomes[index] = True
            sb.exec_cursor = index + 1

    def _execute_drop(self, sb: StoredBundle, index: int) -> None:
        if index == 0 or sb.outcomes.get(index - 1) is True:
            sb.retention.discard(FORWARD_PENDING)
            sb.outcomes[index] = True
            sb.exec_cursor = index + 1
            if not sb.retention:
                self.store.remove(sb.bundle.id)
        else:
            # previous action failed: the constraint stays, the drop is skipped
            sb.outcomes[index] = False
            sb.exec_cursor = index + 1

    def _still_current(self, sb: StoredBundle, stamp: int) -> bool:
        return self.store.get(sb.bundle.id) is sb and sb.update_seq == stamp

    def _record_failure(self, sb: StoredBundle, index: int, reason: str) -> None:
        sb.outcomes[index] = False
        sb.halted = True
        md = self._md_doc(sb)
        self.publish("action-failed", {"metadata": md, "action-index": index, "reason": reason})
        self.publish("forwarding-required", {"metadata": md})

    # -- expiry ----------------------------------------------------------

    async def _expiry_loop(self) -> None:
        period = self.config.expiry_scan_period_ms / 1000.0
        while True:
            await asyncio.sleep(period)
            self.expiry_scan(now_ms())

    def expiry_scan(self, now: int) -> int:
        expired = [sb for sb in self.store.by_update_order()
                   if is_expired(sb.bundle, now)]
        for sb in expired:
            self.store.remove(sb.bundle.id)
            self.publish("bundle-expired", {"metadata": self._md_doc(sb)})
        return len(expired)

    # -- RPC: dispatch listener ------------------------------------------

    async def rpc_dispatch(self, method: str, params: dict) -> dict:
        if method == "update-actions":
            return self._rpc_update_actions(params)
        if method == "query-supported-actions":
            return {"actions": [copy.deepcopy(d) for d in CORE_ACTION_DESCRIPTORS]}
        if method == "list-bundles":
            return {"bundles": [self._md_doc(sb) for sb in self.store.by_update_order()]}
        if method == "get-bundle":
            sb = self._find_bundle(params)
            return {"metadata": self._md_doc(sb)}
        if method == "set-default-actions":
            self.default_actions = self._parse_actions(params)
            return {"ok": True}
        if method == "link-dial":
            return await self._rpc_link_dial(params)
        if method == "link-close":
            return self._rpc_link_close(params)
        raise RpcError("unknown-method", f"no such method {method!r}")

    async def rpc_app(self, conn: ServerConnection, method: str, params: dict) -> dict:
        if method == "register":
            return self.apps.register(conn, params)
        if method == "send":
            return self.apps.send_adu(conn, params)
        raise RpcError("unknown-method", f"no such method {method!r}")

    def _find_bundle(self, params: dict) -> StoredBundle:
        try:
            bid = bundle_id_from_doc(params.get("id"))
        except WireError as exc:
            raise RpcError("bad-params", str(exc)) from exc
        sb = self.store.get(bid)
        if sb is None:
            raise RpcError("unknown-bundle", f"no stored bundle {bundle_id_to_doc(bid)}")
        return sb

    def _parse_actions(self, params: dict) -> list[Action]:
        try:
            actions = actions_from_doc(params.get("actions"))
        except WireError as exc:
            raise RpcError("bad-params", str(exc)) from exc
        try:
            validate_action_list(actions)
        except ActionListError as exc:
            raise RpcError("invalid-action-list", str(exc)) from exc
        return actions

    def _rpc_update_actions(self, params: dict) -> dict:
        actions = self._parse_actions(params)
        sb = self._find_bundle(params)
        sb.actions = list(actions)
        sb.exec_cursor = 0
        sb.outcomes = {}
        sb.halted = False
        sb.update_seq = self.store.next_update_seq()
        self._engine_wake.set()
        return {"ok": True}

    async def _rpc_link_dial(self, params: dict) -> dict:
        address = params.get("address")
        if not isinstance(address, str):
            raise RpcError("bad-params", f"bad address: {address!r}")
        try:
            peer = await self.links.dial(address)
        except ClaError as exc:
            raise RpcError(exc.code, str(exc)) from exc
        return {"peer": peer, "address": address}

    def _rpc_link_close(self, params: dict) -> dict:
        peer = params.get("peer")
        if not isinstance(peer, str):
            raise RpcError("bad-params", f"bad peer: {peer!r}")
        try:
            self.links.close_peer(peer)
        except ClaError as exc:
            raise RpcError(exc.code, str(exc)) from exc
        return {"ok": True}

    # -- local delivery bookkeeping (register-after-arrival path) ---------

    def release_held(self, demux: str) -> list[Bundle]:
        """Remove and return held bundles destined for a fresh registration."""
        target = EndpointId(self.name, demux)
        released = []
        for sb in self.store.by_update_order():
            if DISPATCH_PENDING in sb.retention and sb.bundle.destination == target:
                self.store.remove(sb.bundle.id)
                self.publish("bundle-delivered", {"metadata": self._md_doc(sb)})
                released.append(sb.bundle)
        return released

    def describe(self) -> dict:
        return {
            "name": self.name,
            "dispatch": self.dispatch_address,
            "app": self.app_address,
            "cla": self.links.bound_address,
        }
