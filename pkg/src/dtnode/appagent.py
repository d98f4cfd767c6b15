"""Application agent: demux registrations, ADU injection, local delivery.

Apps speak the same envelope protocol as dispatch clients on a separate
listener; deliveries arrive as event messages carrying the full bundle
(payload included; this is the one plane where payload bytes belong).
"""

from __future__ import annotations

import logging

from .bundle import Bundle, BundleId, EndpointError, EndpointId, now_ms, parse_endpoint
from .wire import (
    RpcError,
    WireError,
    blocks_from_doc,
    bundle_id_to_doc,
    bundle_to_doc,
    payload_from_doc,
)

log = logging.getLogger(__name__)


class AppRegistry:
    """Registrations for one node: demux token -> app connection."""

    def __init__(self, node):
        self.node = node
        self._by_demux: dict[str, object] = {}
        self._by_conn: dict[object, str] = {}
        self._sequence = 0

    def register(self, conn, params: dict) -> dict:
        demux = params.get("demux")
        if not isinstance(demux, str):
            raise RpcError("bad-params", f"bad demux: {demux!r}")
        try:
            endpoint = EndpointId(self.node.name, demux)
        except EndpointError as exc:
            raise RpcError("bad-params", str(exc)) from exc
        if conn in self._by_conn:
            raise RpcError("already-registered",
                           f"connection already serves {self._by_conn[conn]!r}")
        if demux in self._by_demux:
            raise RpcError("demux-taken", f"demux {demux!r} already registered")
        self._by_demux[demux] = conn
        self._by_conn[conn] = demux
        for bundle in self.node.release_held(demux):
            self._push_delivery(conn, bundle)
        return {"ok": True, "endpoint": str(endpoint)}

    def release(self, conn) -> None:
        demux = self._by_conn.pop(conn, None)
        if demux is not None:
            del self._by_demux[demux]

    def send_adu(self, conn, params: dict) -> dict:
        demux = self._by_conn.get(conn)
        if demux is None:
            raise RpcError("not-registered", "send requires a registration")
        dest_text = params.get("destination")
        try:
            destination = parse_endpoint(dest_text if isinstance(dest_text, str) else "")
        except EndpointError as exc:
            raise RpcError("invalid-destination", str(exc)) from exc
        lifetime = params.get("lifetime")
        if not isinstance(lifetime, int) or isinstance(lifetime, bool):
            raise RpcError("bad-params", f"bad lifetime: {lifetime!r}")
        if lifetime <= 0:
            raise RpcError("zero-lifetime", "lifetime must be a positive duration")
        try:
            payload = payload_from_doc(params.get("payload"))
            blocks = blocks_from_doc(params.get("extension-blocks"))
        except WireError as exc:
            raise RpcError("bad-params", str(exc)) from exc
        self._sequence += 1
        bid = BundleId(EndpointId(self.node.name, demux), now_ms(), self._sequence)
        bundle = Bundle(id=bid, destination=destination, lifetime=lifetime,
                        payload=payload, extension_blocks=blocks)
        self.node.ingest(bundle)
        return {"id": bundle_id_to_doc(bid)}

    def deliver_local(self, bundle: Bundle) -> bool:
        """Push to the matching registration; False means hold the bundle."""
        conn = self._by_demux.get(bundle.destination.demux)
        if conn is None:
            return False
        self._push_delivery(conn, bundle)
        return True

    def _push_delivery(self, conn, bundle: Bundle) -> None:
        conn.enqueue("event", {
            "topic": "bundle-delivered",
            "timestamp": now_ms(),
            "payload": {"bundle": bundle_to_doc(bundle)},
        })
