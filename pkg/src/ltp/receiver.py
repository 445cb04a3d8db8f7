"""Receive side of LTP flows: per-packet ACK, Early Close, bubble filling.

Every registration, data, and end packet is answered immediately with an
ACK echoing the flow and sequence id, regardless of arrival order.  A flow
closes in one of three ways:

* all segments received;
* Early Close: past the loss-tolerant threshold with at least the
  configured fraction of bytes and every known-critical segment in hand;
* deadline force-close (held open only while critical segments are
  outstanding).

On close the receiver tells the sender to stop by repeating an End packet
three times, one RTprop apart.  Missing segments are zero-filled during
reassembly; segment boundaries are element-aligned by construction on the
sender, so the zero gaps can never corrupt a partial element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .wire import (
    END_SEQ,
    REG_SEQ,
    Importance,
    Packet,
    PacketHeader,
    PacketType,
    dequantize_cc,
    encode_packet,
    parse_registration,
)

#: Data packets arriving before their flow's registration are buffered up
#: to this many per flow, then dropped.
PREBUFFER_CAP = 64

#: A close is announced with this many stop (End) packets, one RTprop apart.
STOP_REPEATS = 3

DEFAULT_RTPROP_S = 1e-3


class DegenerateBandwidth(ValueError):
    pass


class CloseReason(Enum):
    ALL_RECEIVED = "all_received"
    EARLY_CLOSED = "early_closed"
    DEADLINE_FORCED = "deadline_forced"


def init_lt_threshold(rtprop: float, model_bytes: int, btlbw: float) -> float:
    """Initial loss-tolerant threshold for the first batch of an epoch:
    1.5 * RTprop plus the ideal transfer time of the model."""
    if btlbw <= 0:
        raise DegenerateBandwidth("btlbw must be positive")
    return 1.5 * rtprop + model_bytes * 8 / btlbw


class LtThresholdState:
    """Per-link loss-tolerant thresholds and the shared deadline.

    Within an epoch the threshold of a link only ratchets down, following
    the shortest fully-complete transmission observed on that link; flows
    that closed early never update it.  The deadline applies to all links
    of one receiver at once: max threshold plus the profile constant C.
    """

    def __init__(self, c: float) -> None:
        if c <= 0:
            raise ValueError("C must be positive")
        self.c = c
        self.lt: dict[object, float] = {}
        self.best_full_time: dict[object, float] = {}

    def start_epoch(self) -> None:
        self.best_full_time.clear()

    def set_init(self, peer, lt_threshold: float) -> None:
        if lt_threshold <= 0:
            raise ValueError("lt_threshold must be positive")
        self.lt[peer] = lt_threshold

    def observe_full_completion(self, peer, elapsed: float) -> None:
        best = self.best_full_time.get(peer)
        if best is None or elapsed < best:
            self.best_full_time[peer] = elapsed
            self.lt[peer] = elapsed

    def deadline(self) -> float:
        if not self.lt:
            raise ValueError("no links registered")
        return max(self.lt.values()) + self.c


@dataclass(frozen=True)
class FlowParams:
    """Receiver-side configuration for one expected flow."""

    seg_len: int
    lt_threshold: float = math.inf
    deadline: float = math.inf
    pct_threshold: float = 0.8
    critical_seqs: frozenset = frozenset()


@dataclass
class CloseRecord:
    peer: object
    flow_id: int
    reason: CloseReason
    start_time: float
    close_time: float
    received_fraction: float
    critical_pending: int

    @property
    def elapsed(self) -> float:
        return self.close_time - self.start_time


class ReassemblyState:
    """Slot table and Early Close clock for one incoming flow."""

    def __init__(
        self,
        flow_id: int,
        total_segments: int,
        total_bytes: int,
        params: FlowParams,
        start_time: float,
    ) -> None:
        if total_segments <= 0 or total_bytes <= 0:
            raise ValueError("registration announced an empty flow")
        self.flow_id = flow_id
        self.total_segments = total_segments
        self.total_bytes = total_bytes
        self.params = params
        self.start_time = start_time
        self.slots: list[bytes | None] = [None] * total_segments
        self.received_bytes = 0
        self._received_count = 0
        self.full = False
        self._t_lt = start_time + params.lt_threshold
        self._t_deadline = start_time + params.deadline
        self.critical_pending: set[int] = {
            s for s in params.critical_seqs if s < total_segments
        }
        self.sender_done = False
        self.closed = False
        self.close_reason: CloseReason | None = None
        self.close_time: float | None = None

    @property
    def received_fraction(self) -> float:
        return self.received_bytes / self.total_bytes

    def on_data(self, seq: int, payload: bytes, now: float) -> bool:
        """Fill a slot; idempotent on duplicates, a no-op after close.
        Returns True when the slot changed."""
        if self.closed or not 0 <= seq < self.total_segments:
            return False
        if self.slots[seq] is not None:
            return False
        self.slots[seq] = payload
        self.received_bytes += len(payload)
        self._received_count += 1
        if self._received_count == self.total_segments:
            self.full = True
        self.critical_pending.discard(seq)
        return True

    def poll_close(self, now: float) -> CloseReason | None:
        """Early Close decision; sets the closed flag on the first close."""
        if self.closed:
            return self.close_reason
        reason: CloseReason | None = None
        if self.full:
            reason = CloseReason.ALL_RECEIVED
        else:
            elapsed = now - self.start_time
            if elapsed < self.params.lt_threshold:
                reason = None
            elif elapsed < self.params.deadline:
                if (
                    self.received_fraction >= self.params.pct_threshold
                    and not self.critical_pending
                ):
                    reason = CloseReason.EARLY_CLOSED
            elif not self.critical_pending:
                # Critical delivery is never waived, even past the deadline.
                reason = CloseReason.DEADLINE_FORCED
        if reason is not None:
            self.closed = True
            self.close_reason = reason
            self.close_time = now
        return reason

    def next_close_check(self, now: float) -> float | None:
        """Earliest instant after `now` at which poll_close could change
        its answer for time reasons."""
        if self.closed:
            return None
        if now < self._t_lt:
            return None if self._t_lt == math.inf else self._t_lt
        if now < self._t_deadline:
            return None if self._t_deadline == math.inf else self._t_deadline
        return None

    def missing_seqs(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s is None]

    def reassemble(self) -> bytes:
        """Buffer with missing segments zero-filled (packet bubbles)."""
        out = bytearray(self.total_bytes)
        seg_len = self.params.seg_len
        for i, payload in enumerate(self.slots):
            if payload is not None:
                out[i * seg_len : i * seg_len + len(payload)] = payload
        return bytes(out)


class _PendingStops:
    def __init__(self, times: list[float]) -> None:
        self.times = times  # ascending emission instants


class ReceiverEndpoint:
    """All receive-side flows of one node, plus their ACK/stop traffic.

    Flows are keyed by (peer, flow_id).  The caller announces expected
    flows with :meth:`expect_flow` so the endpoint knows each flow's
    thresholds and critical set before its registration arrives.
    """

    def __init__(self, *, default_rtprop: float = DEFAULT_RTPROP_S, event_log: list | None = None) -> None:
        self.flows: dict[tuple, ReassemblyState] = {}
        self.expected: dict[tuple, FlowParams] = {}
        self.peer_echo: dict[object, tuple[float, float]] = {}
        self.close_records: list[CloseRecord] = []
        self.default_rtprop = default_rtprop
        self.event_log = event_log
        self._prebuffer: dict[tuple, list[tuple[int, bytes]]] = {}
        self._stops: dict[tuple, _PendingStops] = {}
        self._open: set[tuple] = set()  # flows still subject to close checks

    def expect_flow(self, peer, flow_id: int, params: FlowParams) -> None:
        self.expected[(peer, flow_id)] = params

    # -- packet intake ------------------------------------------------------

    def on_datagram(self, packet: Packet, peer, now: float) -> list[tuple[bytes, object]]:
        """Process one decoded packet; returns outbound (datagram, dest)."""
        h = packet.header
        rtprop, btlbw = dequantize_cc(h.rtprop_q, h.btlbw_q)
        if rtprop > 0 or btlbw > 0:
            self.peer_echo[peer] = (rtprop, btlbw)
        key = (peer, h.flow_id)
        out: list[tuple[bytes, object]] = []

        if h.ptype == PacketType.REGISTRATION:
            if key not in self.flows:
                params = self.expected.get(key)
                if params is None:
                    return out  # not a flow we agreed to receive
                total_segments, total_bytes = parse_registration(packet.payload)
                state = ReassemblyState(h.flow_id, total_segments, total_bytes, params, now)
                self.flows[key] = state
                self._open.add(key)
                for seq, payload in self._prebuffer.pop(key, []):
                    state.on_data(seq, payload, now)
                    out.append((self._ack(h.flow_id, seq), peer))
            out.append((self._ack(h.flow_id, REG_SEQ), peer))
        elif h.ptype == PacketType.DATA:
            state = self.flows.get(key)
            if state is None:
                buf = self._prebuffer.setdefault(key, [])
                if len(buf) < PREBUFFER_CAP:
                    buf.append((h.seq_id, packet.payload))
                return out  # cannot ACK a flow we cannot name yet
            state.on_data(h.seq_id, packet.payload, now)
            out.append((self._ack(h.flow_id, h.seq_id), peer))
        elif h.ptype == PacketType.END:
            state = self.flows.get(key)
            if state is None:
                return out
            state.sender_done = True
            out.append((self._ack(h.flow_id, END_SEQ), peer))
        # ACKs are sender-side traffic; nothing to do here.
        return out

    def _ack(self, flow_id: int, seq: int) -> bytes:
        header = PacketHeader(flow_id, seq, Importance.NOT_CRITICAL, PacketType.ACK)
        return encode_packet(Packet(header))

    def _stop(self, flow_id: int) -> bytes:
        header = PacketHeader(flow_id, END_SEQ, Importance.CRITICAL, PacketType.END)
        return encode_packet(Packet(header))

    # -- timers -------------------------------------------------------------

    def poll(self, now: float) -> list[tuple[bytes, object]]:
        """Run close checks and emit any due stop announcements."""
        out: list[tuple[bytes, object]] = []
        for key in list(self._open):
            peer, flow_id = key
            state = self.flows[key]
            if not state.full and now < state._t_lt:
                continue  # nothing can close before the loss-tolerant bound
            reason = state.poll_close(now)
            if reason is None:
                continue
            self._open.discard(key)
            record = CloseRecord(
                peer=peer,
                flow_id=flow_id,
                reason=reason,
                start_time=state.start_time,
                close_time=now,
                received_fraction=state.received_fraction,
                critical_pending=len(state.critical_pending),
            )
            self.close_records.append(record)
            if self.event_log is not None:
                self.event_log.append(
                    ("close", now, flow_id, reason.value, state.received_fraction)
                )
            rtprop = self.peer_echo.get(peer, (0.0, 0.0))[0] or self.default_rtprop
            self._stops[(peer, flow_id)] = _PendingStops(
                [now + i * rtprop for i in range(STOP_REPEATS)]
            )
        for (peer, flow_id), pending in list(self._stops.items()):
            while pending.times and pending.times[0] <= now:
                pending.times.pop(0)
                out.append((self._stop(flow_id), peer))
            if not pending.times:
                del self._stops[(peer, flow_id)]
        return out

    def next_wake(self, now: float) -> float | None:
        """Earliest future instant poll() could have work to do."""
        times: list[float] = []
        for key in self._open:
            t = self.flows[key].next_close_check(now)
            if t is not None:
                times.append(t)
        for pending in self._stops.values():
            if pending.times:
                times.append(pending.times[0])
        return min(times) if times else None

    def cancel_stops(self, keys) -> None:
        """Drop pending stop repeats for finished flows."""
        for key in keys:
            self._stops.pop(key, None)
