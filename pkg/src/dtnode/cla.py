"""TCP convergence layer: node-to-node links carrying length-prefixed bundles.

A link starts with one hello line per direction (same codec as the dispatch
listener, role "cla"), then switches to binary frames: a 4-byte big-endian
length prefix followed by that many bytes of bundle document. At most one
active link exists per peer; simultaneous dials collapse deterministically.
"""

from __future__ import annotations

import asyncio
import json
import logging
import struct

from .bundle import Bundle
from .config import format_address, parse_address
from .wire import (
    LARGE_LINE_CAP,
    LINE_CAP,
    PROTOCOL_VERSION,
    Envelope,
    WireError,
    bundle_from_doc,
    bundle_to_doc,
    decode_message,
    encode_message,
    hello_body,
)

log = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 2.0
FRAME_CAP = LARGE_LINE_CAP
DIAL_RETRY_SECONDS = 0.5

_LEN = struct.Struct(">I")


class ClaError(Exception):
    """Link-layer failure; `code` mirrors the RPC error token."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class Link:
    def __init__(self, peer: str, address: str, dialer: str, reader, writer):
        self.peer = peer
        self.address = address
        # node-name of the side that initiated the TCP connection; breaks
        # dial collisions (the link dialed by the smaller name survives)
        self.dialer = dialer
        self.reader = reader
        self.writer = writer
        self.state = "active"
        self.adopted = False
        self.recv_task: asyncio.Task | None = None
        self._write_lock = asyncio.Lock()

    async def transmit(self, bundle: Bundle) -> None:
        """Write one bundle frame; raises ClaError("link-closed") on any failure."""
        if self.state != "active":
            raise ClaError("link-closed", f"link to {self.peer} is {self.state}")
        doc = json.dumps(bundle_to_doc(bundle), separators=(",", ":"), ensure_ascii=False)
        body = doc.encode("utf-8")
        if len(body) > FRAME_CAP:
            raise ClaError("frame-too-large", f"{len(body)} bytes exceeds {FRAME_CAP}")
        try:
            async with self._write_lock:
                self.writer.write(_LEN.pack(len(body)) + body)
                await self.writer.drain()
        except (ConnectionError, OSError) as exc:
            raise ClaError("link-closed", str(exc)) from exc


class LinkManager:
    """All convergence-layer state for one node: listener, links, dial tasks.

    Callbacks (on_link_up(peer, address), on_link_down(peer, address),
    on_receive(bundle, peer)) are synchronous and invoked on the event loop;
    the owner routes them into its store/bus.
    """

    def __init__(self, node_name: str, *, on_link_up, on_link_down, on_receive):
        self.name = node_name
        self.on_link_up = on_link_up
        self.on_link_down = on_link_down
        self.on_receive = on_receive
        self._links: dict[str, Link] = {}
        self._server: asyncio.base_events.Server | None = None
        self._dial_tasks: set[asyncio.Task] = set()
        self._stopped = False
        self.bound_address: str | None = None

    # -- lifecycle -----------------------------------------------------

    async def start(self, address: str) -> None:
        addr = parse_address(address)
        if addr[0] == "unix":
            self._server = await asyncio.start_unix_server(
                self._accepted, path=addr[1], limit=LINE_CAP
            )
            self.bound_address = format_address(addr)
        else:
            self._server = await asyncio.start_server(
                self._accepted, host=addr[1], port=addr[2], limit=LINE_CAP
            )
            sock = self._server.sockets[0].getsockname()
            self.bound_address = f"{addr[1]}:{sock[1]}"

    def start_dials(self, addresses: list[str]) -> None:
        """Dial each address, retrying until the link is established once."""
        for address in addresses:
            task = asyncio.get_running_loop().create_task(self._dial_until_up(address))
            self._dial_tasks.add(task)
            task.add_done_callback(self._dial_tasks.discard)

    async def stop(self) -> None:
        self._stopped = True
        for task in list(self._dial_tasks):
            task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for link in list(self._links.values()):
            self._teardown(link, publish=False)

    # -- queries -------------------------------------------------------

    def active_link(self, peer: str) -> Link | None:
        return self._links.get(peer)

    def active_peers(self) -> list[str]:
        return sorted(self._links)

    # -- dialing -------------------------------------------------------

    async def dial(self, address: str) -> str:
        """Connect, handshake, and adopt a link; returns the peer node-name."""
        addr = parse_address(address)
        try:
            if addr[0] == "unix":
                reader, writer = await asyncio.open_unix_connection(addr[1], limit=LINE_CAP)
            else:
                reader, writer = await asyncio.open_connection(addr[1], addr[2], limit=LINE_CAP)
        except (ConnectionError, OSError) as exc:
            raise ClaError("connect-refused", f"{address}: {exc}") from exc
        try:
            peer = await self._handshake(reader, writer)
        except ClaError:
            writer.close()
            raise
        link = Link(peer, address, dialer=self.name, reader=reader, writer=writer)
        self._adopt(link)
        return peer

    async def _dial_until_up(self, address: str) -> None:
        while not self._stopped:
            try:
                await self.dial(address)
                return
            except ClaError as exc:
                log.debug("dial %s failed (%s), retrying", address, exc)
                await asyncio.sleep(DIAL_RETRY_SECONDS)

    # -- handshake and adoption -----------------------------------------

    async def _handshake(self, reader, writer) -> str:
        hello = encode_message(Envelope("hello", 0, hello_body("cla", self.name)))
        writer.write(hello)
        try:
            await writer.drain()
            line = await asyncio.wait_for(reader.readline(), HANDSHAKE_TIMEOUT)
        except asyncio.TimeoutError as exc:
            raise ClaError("handshake-timeout", "no hello within 2 s") from exc
        except (ConnectionError, OSError) as exc:
            raise ClaError("connect-refused", str(exc)) from exc
        if not line:
            raise ClaError("handshake-timeout", "peer closed during handshake")
        try:
            env = decode_message(line, prev_seq=-1)
        except WireError as exc:
            raise ClaError("protocol-error", str(exc)) from exc
        body = env.body
        if env.kind != "hello" or body.get("role") != "cla":
            raise ClaError("protocol-error", f"expected cla hello, got {env.kind}")
        if body.get("protocol-version") != PROTOCOL_VERSION:
            raise ClaError("protocol-error", f"version {body.get('protocol-version')!r}")
        peer = body.get("node")
        if not isinstance(peer, str) or not peer:
            raise ClaError("protocol-error", "hello without node name")
        if peer == self.name:
            raise ClaError("name-conflict", f"peer claims our own name {peer!r}")
        return peer

    async def _accepted(self, reader, writer) -> None:
        try:
            peer = await self._handshake(reader, writer)
        except ClaError as exc:
            log.debug("inbound cla handshake failed: %s", exc)
            writer.close()
            return
        peername = writer.get_extra_info("peername")
        address = f"{peername[0]}:{peername[1]}" if isinstance(peername, tuple) else str(peername)
        link = Link(peer, address, dialer=peer, reader=reader, writer=writer)
        self._adopt(link)

    def _adopt(self, link: Link) -> None:
        existing = self._links.get(link.peer)
        if existing is not None:
            if link.dialer < existing.dialer:
                self._teardown(existing, publish=True)
            else:
                # collision loser: close quietly, never announced
                link.state = "closed"
                link.writer.close()
                return
        link.adopted = True
        self._links[link.peer] = link
        self.on_link_up(link.peer, link.address)
        link.recv_task = asyncio.get_running_loop().create_task(self._receive_loop(link))

    # -- data path -------------------------------------------------------

    async def _receive_loop(self, link: Link) -> None:
        try:
            while True:
                header = await link.reader.readexactly(_LEN.size)
                (length,) = _LEN.unpack(header)
                if length > FRAME_CAP:
                    raise ClaError("frame-too-large", f"{length} byte frame from {link.peer}")
                body = await link.reader.readexactly(length)
                bundle = bundle_from_doc(json.loads(body.decode("utf-8")))
                self.on_receive(bundle, link.peer)
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            pass
        except (ClaError, WireError, ValueError) as exc:
            log.warning("link to %s closed: %s", link.peer, exc)
        finally:
            self._teardown(link, publish=True)

    def _teardown(self, link: Link, publish: bool) -> None:
        if link.state == "closed":
            return
        link.state = "closed"
        if self._links.get(link.peer) is link:
            del self._links[link.peer]
        if link.recv_task is not None and link.recv_task is not asyncio.current_task():
            link.recv_task.cancel()
        link.writer.close()
        if publish and link.adopted:
            self.on_link_down(link.peer, link.address)

    def close_peer(self, peer: str) -> None:
        link = self._links.get(peer)
        if link is None:
            raise ClaError("unknown-link", f"no active link to {peer!r}")
        self._teardown(link, publish=True)
