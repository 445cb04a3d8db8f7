"""Transport substrate: a deterministic simulated datagram network.

Each destination owns one bottleneck link with a drop-tail queue; all
traffic toward that destination shares it, which is what makes many-to-one
incast emerge at the receiver-side link.  Per packet the channel draws an
independent loss decision, serializes through the bottleneck, and delivers
after the configured one-way delay (plus optional jitter / reorder slack).

Everything is driven by a virtual clock: identical (seed, config, offered
traffic order) always reproduces the identical delivery trace.

Live runs use :class:`UdpChannel` from :mod:`ltp.realtime` instead; the
simulator never touches sockets or wall-clock time.
"""

from __future__ import annotations

import heapq
import random
from collections import Counter, deque
from dataclasses import dataclass, field

from .wire import MAX_DATAGRAM_BYTES


class OversizedDatagram(ValueError):
    pass


@dataclass
class ChannelConfig:
    loss_rate: float = 0.0
    one_way_delay: float = 0.5e-3
    delay_jitter: float = 0.0
    bandwidth: float = 1e9
    queue_capacity: int = 128
    reorder_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be in [0, 1]")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be at least 1")
        if not 0.0 <= self.reorder_rate <= 1.0:
            raise ValueError("reorder_rate must be in [0, 1]")


@dataclass(frozen=True)
class Delivery:
    time: float
    datagram: bytes
    src: object
    dest: object


@dataclass
class _Link:
    busy_until: float = 0.0
    in_queue: deque = field(default_factory=deque)  # transmission finish times


class SimulatedChannel:
    """Seeded lossy bottleneck network on a virtual clock."""

    def __init__(self, config: ChannelConfig) -> None:
        self.config = config
        self.now = 0.0
        self._rng = random.Random(config.seed)
        self._heap: list[tuple[float, int, bytes, object, object]] = []
        self._counter = 0  # send order; deterministic delivery tie-break
        self._links: dict[object, _Link] = {}
        # FIFO frontier per (src, dest): jitter varies delay but a single
        # path never reorders on its own; only reorder_rate may.
        self._last_delivery: dict[tuple, float] = {}
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.drop_reasons: Counter = Counter()

    def send(self, datagram: bytes, src, dest) -> str:
        """Offer one datagram; returns "accepted" or "dropped"."""
        if len(datagram) > MAX_DATAGRAM_BYTES:
            raise OversizedDatagram(f"{len(datagram)} bytes exceeds {MAX_DATAGRAM_BYTES}")
        self.sent += 1
        if self._rng.random() < self.config.loss_rate:
            return self._drop("random_loss")
        link = self._links.setdefault(dest, _Link())
        while link.in_queue and link.in_queue[0] <= self.now:
            link.in_queue.popleft()
        if len(link.in_queue) >= self.config.queue_capacity:
            return self._drop("queue_overflow")
        start = max(self.now, link.busy_until)
        finish = start + len(datagram) * 8 / self.config.bandwidth
        link.busy_until = finish
        link.in_queue.append(finish)
        delay = self.config.one_way_delay
        if self.config.delay_jitter > 0:
            delay += self._rng.random() * self.config.delay_jitter
        t = finish + delay
        pair = (src, dest)
        if self.config.reorder_rate > 0 and self._rng.random() < self.config.reorder_rate:
            t += self._rng.random() * 4 * self.config.one_way_delay
        else:
            t = max(t, self._last_delivery.get(pair, 0.0))
            self._last_delivery[pair] = t
        heapq.heappush(self._heap, (t, self._counter, datagram, src, dest))
        self._counter += 1
        return "accepted"

    def _drop(self, reason: str) -> str:
        self.dropped += 1
        self.drop_reasons[reason] += 1
        return "dropped"

    def next_delivery_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def advance_clock(self, to: float) -> list[Delivery]:
        """Move the virtual clock and return deliveries due by then, in
        delivery-time order with send-order tie-breaking."""
        if to < self.now:
            raise ValueError("clock cannot move backwards")
        self.now = to
        out: list[Delivery] = []
        while self._heap and self._heap[0][0] <= to:
            t, _, datagram, src, dest = heapq.heappop(self._heap)
            out.append(Delivery(t, datagram, src, dest))
            self.delivered += 1
        return out
