"""In-memory bundle store with retention constraints and update-order stamps."""

from __future__ import annotations

from dataclasses import dataclass, field

from .bundle import Bundle, BundleId, BundleMetadata
from .wire import Action

FORWARD_PENDING = "forward-pending"
DISPATCH_PENDING = "dispatch-pending"


@dataclass
class StoredBundle:
    bundle: Bundle
    arrival_time: int
    retention: set[str]
    update_seq: int
    actions: list[Action] = field(default_factory=list)
    exec_cursor: int = 0
    # outcome per executed action index (True=success, False=failure)
    outcomes: dict[int, bool] = field(default_factory=dict)
    # set when an action failed; cleared by the next action-list replacement
    halted: bool = False

    def metadata(self) -> BundleMetadata:
        b = self.bundle
        return BundleMetadata(
            id=b.id,
            destination=b.destination,
            lifetime=b.lifetime,
            payload_length=len(b.payload),
            arrival_time=self.arrival_time,
            update_seq=self.update_seq,
            report_to=b.report_to,
            previous_node=b.previous_node,
            extension_blocks=b.extension_blocks,
            current_actions=tuple(self.actions),
        )


class BundleStore:
    """Bundles keyed by id, plus the node-global update-order counter.

    Ids of every bundle ever accepted are remembered for the lifetime of
    the node so duplicate copies arriving over different links are
    discarded even after the first copy was delivered or dropped.
    """

    def __init__(self):
        self._bundles: dict[BundleId, StoredBundle] = {}
        self._seen: set[BundleId] = set()
        self._update_counter = 0

    def next_update_seq(self) -> int:
        self._update_counter += 1
        return self._update_counter

    def seen(self, bid: BundleId) -> bool:
        return bid in self._seen

    def mark_seen(self, bid: BundleId) -> None:
        self._seen.add(bid)

    def insert(self, stored: StoredBundle) -> None:
        self._bundles[stored.bundle.id] = stored
        self._seen.add(stored.bundle.id)

    def get(self, bid: BundleId) -> StoredBundle | None:
        return self._bundles.get(bid)

    def remove(self, bid: BundleId) -> StoredBundle | None:
        return self._bundles.pop(bid, None)

    def __len__(self) -> int:
        return len(self._bundles)

    def by_update_order(self) -> list[StoredBundle]:
        return sorted(self._bundles.values(), key=lambda s: s.update_seq)

    def next_eligible(self) -> StoredBundle | None:
        """The executable bundle that was updated first, if any."""
        best = None
        for sb in self._bundles.values():
            if sb.halted or sb.exec_cursor >= len(sb.actions):
                continue
            if best is None or sb.update_seq < best.update_seq:
                best = sb
        return best
