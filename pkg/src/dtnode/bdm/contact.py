"""Contact-plan dispatcher: route over scheduled communication windows.

Plan file, one contact per line: "<from> <to> <start-ms> <end-ms> <owlt-ms>"
(absolute epoch milliseconds; owlt defaults to 0 when omitted). A bundle at
node n at time t can traverse contact (n -> m, [s, e], owlt) iff t <= e; it
departs at max(t, s) and arrives at max(t, s) + owlt.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass

from ..bundle import BundleId, BundleMetadata, now_ms
from ..wire import bundle_id_from_doc, drop, send_to

from .base import BaseBdm

log = logging.getLogger(__name__)


class PlanFileError(ValueError):
    pass


@dataclass(frozen=True)
class ContactPlanEntry:
    from_node: str
    to_node: str
    start: int
    end: int
    owlt: int = 0

    def __post_init__(self):
        if self.from_node == self.to_node:
            raise PlanFileError(f"contact from a node to itself: {self.from_node}")
        if self.start >= self.end:
            raise PlanFileError(f"contact window empty: [{self.start}, {self.end}]")
        if self.owlt < 0:
            raise PlanFileError(f"negative light time: {self.owlt}")


def load_plan(path: str) -> list[ContactPlanEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (4, 5):
                raise PlanFileError(
                    f"{path}:{lineno}: want '<from> <to> <start> <end> [owlt]', got {raw!r}")
            try:
                owlt = int(parts[4]) if len(parts) == 5 else 0
                entries.append(ContactPlanEntry(parts[0], parts[1],
                                                int(parts[2]), int(parts[3]), owlt))
            except ValueError as exc:
                raise PlanFileError(f"{path}:{lineno}: {exc}") from exc
    return entries


def earliest_arrival(plan: list[ContactPlanEntry], source: str, dest: str,
                     t0: int) -> tuple[str, int] | None:
    """First hop and arrival instant of the earliest-arriving contact path.

    Ties broken by fewer hops, then lexicographically smallest next-hop
    name. Returns None when no time-respecting path exists. A single
    best-label search is not enough here: a path that arrives equally fast
    with more hops may still win later on the name tie-break, so the search
    keeps all Pareto-optimal (arrival, hops, first-hop) labels per node.
    """
    if source == dest:
        return (source, t0)
    labels: dict[str, list[tuple[int, int, str]]] = {source: [(t0, 0, "")]}
    queue: list[tuple[str, tuple[int, int, str]]] = [(source, (t0, 0, ""))]
    while queue:
        node, (t, hops, first) = queue.pop()
        if node == dest:
            continue  # extending past the destination never helps
        for entry in plan:
            if entry.from_node != node or t > entry.end:
                continue
            arrival = max(t, entry.start) + entry.owlt
            label = (arrival, hops + 1, first or entry.to_node)
            known = labels.setdefault(entry.to_node, [])
            if any(a <= label[0] and h <= label[1] and f <= label[2]
                   for a, h, f in known):
                continue
            known[:] = [k for k in known
                        if not (label[0] <= k[0] and label[1] <= k[1] and label[2] <= k[2])]
            known.append(label)
            queue.append((entry.to_node, label))
    if dest not in labels:
        return None
    arrival, _, first = min(labels[dest])
    return (first, arrival)


class ContactBdm(BaseBdm):
    topics = ("forwarding-required", "action-failed", "link-up", "link-down")

    def __init__(self, client, plan: list[ContactPlanEntry]):
        super().__init__(client)
        self.plan = plan
        # bundles with an issued, not-yet-failed action list
        self.issued: set[BundleId] = set()
        self._timer: asyncio.Task | None = None
        self._timer_at: int | None = None

    async def decide(self, md: BundleMetadata) -> None:
        await self._consider(md, forced=True)

    async def revisit(self, md: BundleMetadata) -> None:
        await self._consider(md, forced=False)

    async def _consider(self, md: BundleMetadata, forced: bool) -> None:
        if md.destination.node_name == self.node:
            return
        if not forced and md.id in self.issued:
            return
        now = now_ms()
        found = earliest_arrival(self.plan, self.node, md.destination.node_name, now)
        if found is None:
            return
        hop, _ = found
        depart = self._next_departure(hop, now)
        if depart is None:
            return
        if depart > now:
            self._wake_at(depart)
            return
        if hop not in self.active:
            return  # contact is open but the link is not up yet
        self.issued.add(md.id)
        await self.client.update_actions(md.id, [send_to(hop), drop()])

    def _next_departure(self, hop: str, now: int) -> int | None:
        """Earliest instant we may hand a bundle to `hop` at or after now."""
        times = [max(now, e.start) for e in self.plan
                 if e.from_node == self.node and e.to_node == hop and now <= e.end]
        return min(times) if times else None

    def _wake_at(self, at: int) -> None:
        if self._timer_at is not None and self._timer_at <= at and self._timer is not None \
                and not self._timer.done():
            return
        if self._timer is not None:
            self._timer.cancel()
        self._timer_at = at
        delay = max(0, at - now_ms()) / 1000.0
        self._timer = asyncio.get_running_loop().create_task(self._fire(delay))

    async def _fire(self, delay: float) -> None:
        await asyncio.sleep(delay)
        self._timer_at = None
        try:
            await self.reconcile()
        except ConnectionError:
            pass

    async def on_other(self, topic: str, payload: dict) -> None:
        if topic == "action-failed":
            self.issued.discard(bundle_id_from_doc(payload["metadata"]["id"]))
