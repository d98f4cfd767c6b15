"""Static-route dispatcher: destination node -> fixed next hop.

Routes file, one entry per line: "<destination-node> <next-hop-node>".
A "*" destination is the fallback used when no exact entry matches.
Blank lines and lines starting with "#" are ignored.
"""

from __future__ import annotations

import logging

from ..bundle import BundleMetadata
from ..wire import drop, send_to

from .base import BaseBdm

log = logging.getLogger(__name__)


class RoutesFileError(ValueError):
    pass


def load_routes(path: str) -> dict[str, str]:
    routes: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise RoutesFileError(f"{path}:{lineno}: want '<dest> <next-hop>', got {raw!r}")
            routes[parts[0]] = parts[1]
    return routes


class StaticBdm(BaseBdm):
    topics = ("forwarding-required", "link-up", "link-down")

    def __init__(self, client, routes: dict[str, str]):
        super().__init__(client)
        self.routes = routes

    def next_hop(self, destination: str) -> str | None:
        return self.routes.get(destination, self.routes.get("*"))

    async def decide(self, md: BundleMetadata) -> None:
        dest = md.destination.node_name
        if dest == self.node:
            return
        hop = self.next_hop(dest)
        if hop is None or hop not in self.active:
            return
        await self.client.update_actions(md.id, [send_to(hop), drop()])
