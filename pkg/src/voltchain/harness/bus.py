"""In-process message network with fixed integer-step latency."""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from typing import Any, Hashable


@dataclass(frozen=True)
class Message:
    sender: Hashable
    receiver: Hashable
    body: Any
    sent_step: int
    deliver_step: int
    seq: int


class MessageBus:
    """Lossless, FIFO per sender/receiver pair, globally ordered by (deliver_step, seq)."""

    def __init__(self, latency: int = 0):
        if latency < 0:
            raise ValueError("latency must be >= 0")
        self.latency = latency
        self._queues: dict[tuple, deque[Message]] = {}
        self._seq = itertools.count()

    def send(self, sender, receiver, body, now: int, latency: int | None = None) -> Message:
        lat = self.latency if latency is None else latency
        msg = Message(sender, receiver, body, now, now + lat, next(self._seq))
        self._queues.setdefault((sender, receiver), deque()).append(msg)
        return msg

    def broadcast(self, sender, receivers, body, now: int, latency: int | None = None) -> None:
        for r in receivers:
            self.send(sender, r, body, now, latency)

    def deliver(self, now: int) -> list[Message]:
        ready = []
        for q in self._queues.values():
            while q and q[0].deliver_step <= now:
                ready.append(q.popleft())
        ready.sort(key=lambda m: (m.deliver_step, m.seq))
        return ready

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())
