"""Opportunistic dispatcher: forward over whatever links are up right now.

Single-copy mode hands the bundle to the first active peer (sorted by name)
that is not the link it arrived on, then drops it. Flood mode sends a copy
to every such peer and never drops; the bundle lives until expiry and new
peers get copies as they appear. Duplicate delivery is suppressed by the
receiving nodes, so flooding terminates.
"""

from __future__ import annotations

import logging

from ..bundle import BundleId, BundleMetadata
from ..wire import bundle_id_from_doc, drop, send_to

from .base import BaseBdm

log = logging.getLogger(__name__)


class OpportunisticBdm(BaseBdm):
    topics = ("forwarding-required", "bundle-forwarded", "link-up", "link-down")

    def __init__(self, client, *, single_copy: bool = True):
        super().__init__(client)
        self.single_copy = single_copy
        # (bundle id, peer) pairs we have issued a send-to for; grows only
        self.attempted: dict[BundleId, set[str]] = {}
        # confirmed transmissions, from bundle-forwarded events
        self.forwarded: dict[BundleId, set[str]] = {}

    def _candidates(self, md: BundleMetadata) -> list[str]:
        arrived_on = md.previous_node.node_name if md.previous_node else None
        return sorted(p for p in self.active if p != arrived_on)

    async def decide(self, md: BundleMetadata) -> None:
        await self._consider(md, forced=True)

    async def revisit(self, md: BundleMetadata) -> None:
        await self._consider(md, forced=False)

    async def _consider(self, md: BundleMetadata, forced: bool) -> None:
        if md.destination.node_name == self.node:
            return
        if self.single_copy:
            await self._single_copy(md, forced)
        else:
            await self._flood(md)

    async def _single_copy(self, md: BundleMetadata, forced: bool) -> None:
        bid = md.id
        if self.forwarded.get(bid):
            return
        # an unforced pass never re-issues; a forwarding-required after an
        # attempt means the attempt failed, so pick again
        if not forced and self.attempted.get(bid):
            return
        candidates = self._candidates(md)
        if not candidates:
            return
        tried = self.attempted.setdefault(bid, set())
        untried = [p for p in candidates if p not in tried]
        peer = untried[0] if untried else candidates[0]
        tried.add(peer)
        await self.client.update_actions(bid, [send_to(peer), drop()])

    async def _flood(self, md: BundleMetadata) -> None:
        bid = md.id
        done = self.forwarded.get(bid, set())
        targets = [p for p in self._candidates(md) if p not in done]
        tried = self.attempted.setdefault(bid, set())
        if not targets or all(p in tried for p in targets):
            return
        tried.update(targets)
        await self.client.update_actions(bid, [send_to(p) for p in targets])

    async def on_other(self, topic: str, payload: dict) -> None:
        if topic == "bundle-forwarded":
            bid = bundle_id_from_doc(payload["metadata"]["id"])
            self.forwarded.setdefault(bid, set()).add(payload.get("peer"))
