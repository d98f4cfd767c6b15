"""Publish-subscribe event fan-out with per-subscriber bounded queues."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable

log = logging.getLogger(__name__)


@dataclass
class Subscriber:
    name: str
    queue: asyncio.Queue
    topics: set[str] = field(default_factory=set)
    # invoked once when the subscriber overflows; owner closes the connection
    on_overflow: Callable[[], None] | None = None
    overflowed: bool = False


class EventBus:
    """Fans published events out to matching subscribers in publish order.

    A subscriber whose queue is full is marked overflowed and its
    on_overflow hook fires once (slow-consumer disconnect); it receives
    nothing further. Publishing with no subscribers is a no-op.
    """

    def __init__(self):
        self._subscribers: list[Subscriber] = []

    def add(self, subscriber: Subscriber) -> None:
        self._subscribers.append(subscriber)

    def remove(self, subscriber: Subscriber) -> None:
        if subscriber in self._subscribers:
            self._subscribers.remove(subscriber)

    def publish(self, topic: str, message) -> None:
        for sub in self._subscribers:
            if sub.overflowed or topic not in sub.topics:
                continue
            try:
                sub.queue.put_nowait(message)
            except asyncio.QueueFull:
                sub.overflowed = True
                log.warning("subscriber %s overflowed, disconnecting", sub.name)
                if sub.on_overflow is not None:
                    sub.on_overflow()
