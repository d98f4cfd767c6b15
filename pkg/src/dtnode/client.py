"""Async client SDK for a node's dispatch and application listeners.

Used by the reference BDMs, the monitor CLI, the scenario runner, and the
test suite. One reader task per session routes rpc-responses to their
awaiting callers and queues events for consumption.
"""

from __future__ import annotations

import asyncio
import logging

from .bundle import Bundle, BundleId, BundleMetadata, EndpointId
from .config import parse_address
from .wire import (
    LARGE_LINE_CAP,
    LINE_CAP,
    PROTOCOL_VERSION,
    Action,
    Envelope,
    RpcError,
    WireError,
    actions_to_doc,
    blocks_to_doc,
    bundle_from_doc,
    bundle_id_from_doc,
    bundle_id_to_doc,
    decode_message,
    encode_message,
    hello_body,
    metadata_from_doc,
    payload_to_doc,
)

log = logging.getLogger(__name__)

_CLOSED = object()


class LineClient:
    """Hello exchange, seq bookkeeping, and RPC correlation for one session."""

    def __init__(self, reader, writer, role: str, node: str, line_cap: int):
        self.reader = reader
        self.writer = writer
        self.role = role
        self.node = node
        self.line_cap = line_cap
        self.server_node: str | None = None
        self._tx_seq = 0
        self._rx_seq = -1
        self._send_lock = asyncio.Lock()
        self._pending: dict[str, asyncio.Future] = {}
        self._next_rpc = 0
        self._events: asyncio.Queue = asyncio.Queue()
        self._reader_task: asyncio.Task | None = None
        self._closed = False

    @classmethod
    async def connect(cls, address: str, *, role: str, node: str = "client",
                      line_cap: int = LINE_CAP) -> "LineClient":
        addr = parse_address(address)
        try:
            if addr[0] == "unix":
                reader, writer = await asyncio.open_unix_connection(
                    addr[1], limit=line_cap + 4096)
            else:
                reader, writer = await asyncio.open_connection(
                    addr[1], addr[2], limit=line_cap + 4096)
        except (ConnectionError, OSError) as exc:
            raise RpcError("refused", f"{address}: {exc}") from exc
        client = cls(reader, writer, role, node, line_cap)
        try:
            await client._exchange_hello()
        except (WireError, RpcError, ConnectionError, OSError):
            writer.close()
            raise
        client._reader_task = asyncio.get_running_loop().create_task(client._read_loop())
        return client

    async def _exchange_hello(self) -> None:
        await self._send("hello", hello_body(self.role, self.node))
        line = await self.reader.readline()
        if not line:
            raise RpcError("refused", "server closed during hello")
        env = decode_message(line, prev_seq=self._rx_seq, line_cap=self.line_cap)
        self._rx_seq = env.seq
        if env.kind != "hello":
            raise RpcError("protocol-error", f"expected hello, got {env.kind}")
        version = env.body.get("protocol-version")
        if version != PROTOCOL_VERSION:
            raise RpcError("version-mismatch", f"server speaks version {version!r}")
        self.server_node = env.body.get("node")

    async def _send(self, kind: str, body: dict) -> None:
        async with self._send_lock:
            data = encode_message(Envelope(kind, self._tx_seq, body), line_cap=self.line_cap)
            self._tx_seq += 1
            self.writer.write(data)
            await self.writer.drain()

    async def subscribe(self, topics) -> None:
        await self._send("subscribe", {"topics": list(topics)})

    async def call(self, method: str, params: dict | None = None):
        """Issue one RPC and return its result; raises RpcError on failure."""
        if self._closed:
            raise ConnectionError("session closed")
        self._next_rpc += 1
        rid = f"r{self._next_rpc}"
        future = asyncio.get_running_loop().create_future()
        self._pending[rid] = future
        await self._send("rpc-request", {"id": rid, "method": method, "params": params or {}})
        return await future

    async def next_event(self, timeout: float | None = None):
        """The next (topic, timestamp, payload) event, FIFO."""
        if timeout is None:
            item = await self._events.get()
        else:
            item = await asyncio.wait_for(self._events.get(), timeout)
        if item is _CLOSED:
            self._events.put_nowait(_CLOSED)
            raise ConnectionError("session closed")
        return item

    async def _read_loop(self) -> None:
        try:
            while True:
                line = await self.reader.readline()
                if not line:
                    break
                env = decode_message(line, prev_seq=self._rx_seq, line_cap=self.line_cap)
                self._rx_seq = env.seq
                if env.kind == "event":
                    body = env.body
                    self._events.put_nowait(
                        (body.get("topic"), body.get("timestamp"), body.get("payload")))
                elif env.kind == "rpc-response":
                    self._resolve(env.body)
                else:
                    log.warning("unexpected %s from server, closing", env.kind)
                    break
        except (WireError, ConnectionError, OSError, asyncio.LimitOverrunError, ValueError) as exc:
            log.debug("client reader stopped: %s", exc)
        finally:
            self._closed = True
            self.writer.close()
            for future in self._pending.values():
                if not future.done():
                    future.set_exception(ConnectionError("connection closed"))
            self._pending.clear()
            self._events.put_nowait(_CLOSED)

    def _resolve(self, body: dict) -> None:
        future = self._pending.pop(body.get("id"), None)
        if future is None or future.done():
            return
        if "error" in body:
            err = body["error"] or {}
            future.set_exception(RpcError(err.get("code", "unknown"), err.get("message", "")))
        else:
            future.set_result(body.get("result"))

    async def close(self) -> None:
        self._closed = True
        if self._reader_task is not None:
            self._reader_task.cancel()
            try:
                await self._reader_task
            except asyncio.CancelledError:
                pass
        self.writer.close()


class DispatchClient(LineClient):
    """Session on the dispatch listener (roles "bdm" and "monitor")."""

    @classmethod
    async def connect(cls, address: str, *, role: str = "bdm", node: str = "bdm",
                      line_cap: int = LINE_CAP) -> "DispatchClient":
        return await super().connect(address, role=role, node=node, line_cap=line_cap)

    async def update_actions(self, bid: BundleId, actions: list[Action]) -> None:
        await self.call("update-actions",
                        {"id": bundle_id_to_doc(bid), "actions": actions_to_doc(actions)})

    async def query_supported_actions(self) -> list[dict]:
        result = await self.call("query-supported-actions")
        return result["actions"]

    async def list_bundles(self) -> list[BundleMetadata]:
        result = await self.call("list-bundles")
        return [metadata_from_doc(doc) for doc in result["bundles"]]

    async def get_bundle(self, bid: BundleId) -> BundleMetadata:
        result = await self.call("get-bundle", {"id": bundle_id_to_doc(bid)})
        return metadata_from_doc(result["metadata"])

    async def set_default_actions(self, actions: list[Action]) -> None:
        await self.call("set-default-actions", {"actions": actions_to_doc(actions)})

    async def link_dial(self, address: str) -> str:
        result = await self.call("link-dial", {"address": address})
        return result["peer"]

    async def link_close(self, peer: str) -> None:
        await self.call("link-close", {"peer": peer})


class AppClient(LineClient):
    """Session on the application listener: register, send, receive ADUs."""

    @classmethod
    async def connect(cls, address: str, *, node: str = "app",
                      line_cap: int = LARGE_LINE_CAP, **_ignored) -> "AppClient":
        return await super().connect(address, role="app", node=node, line_cap=line_cap)

    async def register(self, demux: str) -> str:
        result = await self.call("register", {"demux": demux})
        return result["endpoint"]

    async def send(self, destination: str | EndpointId, payload: bytes,
                   lifetime: int, extension_blocks=()) -> BundleId:
        params = {
            "destination": str(destination),
            "payload": payload_to_doc(payload),
            "lifetime": lifetime,
        }
        if extension_blocks:
            params["extension-blocks"] = blocks_to_doc(extension_blocks)
        result = await self.call("send", params)
        return bundle_id_from_doc(result["id"])

    async def next_delivery(self, timeout: float | None = None) -> Bundle:
        topic, _, payload = await self.next_event(timeout)
        if topic != "bundle-delivered":
            raise WireError("protocol-error", f"unexpected app event {topic!r}")
        return bundle_from_doc(payload["bundle"])
