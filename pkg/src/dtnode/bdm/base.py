"""Shared skeleton for the reference dispatchers.

A BDM is a dispatch-protocol client in its own event loop: subscribe,
reconcile against list-bundles (so a restarted BDM rebuilds all state from
the node), then react to events one at a time. Link state is tracked from
link-up/link-down; the node is the only source of truth for bundles.
"""

from __future__ import annotations

import asyncio
import logging

from ..bundle import BundleMetadata
from ..client import DispatchClient
from ..wire import metadata_from_doc

log = logging.getLogger(__name__)


class BaseBdm:
    topics: tuple[str, ...] = ("forwarding-required", "link-up", "link-down")

    def __init__(self, client: DispatchClient):
        self.client = client
        # the node we decide for; learned from the server's hello
        self.node = client.server_node
        self.active: set[str] = set()
        self.on_ready = None

    async def run(self) -> None:
        await self.client.subscribe(self.topics)
        await self.reconcile()
        if self.on_ready is not None:
            self.on_ready()
        while True:
            try:
                topic, timestamp, payload = await self.client.next_event()
            except ConnectionError:
                return
            await self.handle(topic, timestamp, payload)

    async def handle(self, topic: str, timestamp: int, payload: dict) -> None:
        if topic == "link-up":
            self.active.add(payload["peer"])
            await self.on_link_up(payload["peer"])
        elif topic == "link-down":
            self.active.discard(payload["peer"])
            await self.on_link_down(payload["peer"])
        elif topic == "forwarding-required":
            await self.decide(metadata_from_doc(payload["metadata"]))
        else:
            await self.on_other(topic, payload)

    async def reconcile(self) -> None:
        """Revisit every pending bundle; used at startup and on link-up."""
        for md in await self.client.list_bundles():
            await self.revisit(md)

    # hooks ------------------------------------------------------------

    async def decide(self, md: BundleMetadata) -> None:
        """The node explicitly asked for a decision on this bundle."""
        raise NotImplementedError

    async def revisit(self, md: BundleMetadata) -> None:
        """Reconciliation pass over an already-known pending bundle."""
        await self.decide(md)

    async def on_link_up(self, peer: str) -> None:
        await self.reconcile()

    async def on_link_down(self, peer: str) -> None:
        pass

    async def on_other(self, topic: str, payload: dict) -> None:
        pass
