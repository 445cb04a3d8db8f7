"""Send side of one LTP flow.

A flow carries one byte buffer, segmented so that no fixed-width element
ever straddles a segment boundary (the alignment that lets the receiver
zero-fill missing segments safely).  Segments are dispatched through three
queues:

* CQ - critical segments, reliable, FIFO;
* NQ - normal segments, sent exactly once, FIFO;
* RQ - normal segments declared lost, random-in first-out, drained only
  after CQ and NQ are empty.

Loss is detected from ACK ordering alone: a packet is declared lost when
three packets sent after it have been ACKed.  Loss never feeds back into
the congestion estimate.

A receiver-side "stop" (Early Close) discards NQ and RQ outright; critical
packets keep retransmitting until acknowledged.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass

from .congestion import PACING_BURST_THRESHOLD, CongestionState
from .wire import (
    END_SEQ,
    MAX_DATA_SEQ,
    MAX_SEGMENT_BYTES,
    REG_SEQ,
    Importance,
    Packet,
    PacketHeader,
    PacketType,
    quantize_cc,
    registration_payload,
)

#: Number of later-sent ACKs that marks a packet as lost.
LOSS_ACK_THRESHOLD = 3

#: Registration keeps its own retransmit timer (in units of RTprop); the
#: flow cannot be interpreted without it.
REG_RESEND_RTPROPS = 2.0

#: Fallback retransmit timeout for unacknowledged packets that can never
#: accumulate three later ACKs (tail packets, lost ACKs).
RTO_RTPROPS = 4.0
RTO_FLOOR_S = 25e-3


class EmptyBuffer(ValueError):
    pass


class UnknownSeq(KeyError):
    """ACK for a sequence id this flow never sent."""


@dataclass(frozen=True)
class Paced:
    """Back off for `delay` seconds before sending more (pacing)."""

    delay: float


@dataclass(frozen=True)
class Idle:
    """Nothing to send; poll again after `wake_after` seconds (None: only an
    incoming event can unblock the flow, which cannot happen while it is
    incomplete)."""

    wake_after: float | None = None


def segment_length(element_size: int, max_segment_bytes: int = MAX_SEGMENT_BYTES) -> int:
    """Largest segment length <= max_segment_bytes that is a whole number of
    elements, so boundaries always fall between elements."""
    if element_size not in (1, 2, 4, 8):
        raise ValueError(f"unsupported element size {element_size}")
    return (max_segment_bytes // element_size) * element_size


def critical_seq_ids(
    total_bytes: int, seg_len: int, critical_ranges: list[tuple[int, int]]
) -> set[int]:
    """Segment indices overlapping any [start, stop) byte range."""
    crit: set[int] = set()
    for start, stop in critical_ranges:
        if not 0 <= start <= stop <= total_bytes:
            raise ValueError(f"critical range [{start}, {stop}) outside buffer")
        if start == stop:
            continue
        crit.update(range(start // seg_len, (stop - 1) // seg_len + 1))
    return crit


class OutOfOrderLossDetector:
    """Incremental three-out-of-order-ACK loss detector.

    Tracks, for every sent-but-unacknowledged packet, how many packets that
    were sent after it (by latest transmission position) have already been
    acknowledged.  Hitting the threshold declares it lost; retransmitting a
    packet gives it a fresh position and resets its count.
    """

    def __init__(self, threshold: int = LOSS_ACK_THRESHOLD) -> None:
        self.threshold = threshold
        self._pos: dict[int, int] = {}  # seq -> latest position in the send log
        self._count: dict[int, int] = {}  # candidates: sent, unacked, undeclared
        self._log_len = 0

    @property
    def candidates(self) -> dict[int, int]:
        return self._count

    def position(self, seq: int) -> int | None:
        return self._pos.get(seq)

    def on_sent(self, seq: int) -> None:
        self._pos[seq] = self._log_len
        self._log_len += 1
        self._count[seq] = 0

    def on_ack(self, seq: int) -> list[int]:
        """Record an ACK; returns seqs newly declared lost, in send order."""
        pos = self._pos.get(seq)
        if pos is None:
            raise UnknownSeq(seq)
        self._count.pop(seq, None)
        newly: list[int] = []
        for s, cnt in self._count.items():
            if self._pos[s] < pos:
                self._count[s] = cnt + 1
                if cnt + 1 >= self.threshold:
                    newly.append(s)
        for s in newly:
            del self._count[s]
        newly.sort(key=self._pos.__getitem__)
        return newly


class FlowSendState:
    """State machine for the sending half of one flow."""

    def __init__(
        self,
        flow_id: int,
        segments: list[bytes],
        critical: list[bool],
        *,
        cc: CongestionState | None = None,
        rng: random.Random | None = None,
        event_log: list | None = None,
    ) -> None:
        if not segments:
            raise EmptyBuffer("flow needs at least one segment")
        if len(segments) - 1 > MAX_DATA_SEQ:
            raise ValueError("buffer needs more segments than seq_id can address")
        self.flow_id = flow_id
        self.segments = segments
        self.critical = critical
        self.total_bytes = sum(len(s) for s in segments)
        self.cc = cc if cc is not None else CongestionState()
        self.rng = rng if rng is not None else random.Random(0)
        self.event_log = event_log

        self.cq: deque[int] = deque(i for i, c in enumerate(critical) if c)
        self.nq: deque[int] = deque(i for i, c in enumerate(critical) if not c)
        self.rq: list[int] = []
        self._queued: set[int] = set(self.cq) | set(self.nq)

        self.sent_log: list[int] = []
        self.acked: set[int] = set()
        self.declared_lost: set[int] = set()
        self.loss_declared_count = 0
        self.retransmission_count = 0
        self.stopped = False

        self._detector = OutOfOrderLossDetector()
        self._outstanding: set[int] = set()
        self._retransmitted: set[int] = set()
        self._last_send: dict[int, float] = {}
        self._force_resend: set[int] = set()
        self._crit_unacked: set[int] = {i for i, c in enumerate(critical) if c}
        self._burst = 0
        self._burst_time: float | None = None
        self._next_rto_scan: float | None = None
        self._cc_snapshot: dict[int, tuple[int, float]] = {}
        self._rto_backlog: deque[int] = deque()
        self._next_rto_drain = 0.0
        self._last_ack_at: float | None = None
        self._complete = False
        self._reg_payload = registration_payload(len(segments), self.total_bytes)

    # -- construction -------------------------------------------------------

    @classmethod
    def segment_buffer(
        cls,
        data: bytes,
        element_size: int,
        critical_ranges: list[tuple[int, int]] | tuple = (),
        *,
        flow_id: int = 0,
        cc: CongestionState | None = None,
        rng: random.Random | None = None,
        max_segment_bytes: int = MAX_SEGMENT_BYTES,
        all_critical: bool = False,
        event_log: list | None = None,
    ) -> "FlowSendState":
        """Split a buffer into element-aligned segments and build the flow.

        Segments overlapping a critical byte range (or all of them, for
        fully reliable flows) go to CQ; the rest to NQ.
        """
        if len(data) == 0:
            raise EmptyBuffer("cannot send an empty buffer")
        seg_len = segment_length(element_size, max_segment_bytes)
        segments = [bytes(data[i : i + seg_len]) for i in range(0, len(data), seg_len)]
        crit_ids = critical_seq_ids(len(data), seg_len, list(critical_ranges))
        critical = [all_critical or i in crit_ids for i in range(len(segments))]
        return cls(
            flow_id, segments, critical, cc=cc, rng=rng, event_log=event_log
        )

    # -- inspection ---------------------------------------------------------

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def _criticals_acked(self) -> bool:
        return REG_SEQ in self.acked and not self._crit_unacked

    @property
    def complete(self) -> bool:
        return self._complete

    def _refresh_complete(self) -> None:
        if self.stopped:
            self._complete = self._criticals_acked()
        else:
            self._complete = (
                REG_SEQ in self.acked
                and END_SEQ in self.acked
                and len(self.acked) == self.n_segments + 2
            )

    def _payload_bytes(self, seq: int) -> int:
        if seq == REG_SEQ:
            return len(self._reg_payload)
        if seq == END_SEQ:
            return 0
        return len(self.segments[seq])

    # -- emission -----------------------------------------------------------

    def next_packet(self, now: float) -> Packet | Paced | Idle:
        if self.complete:
            return Idle(None)
        wakes: list[float] = []

        pkt = self._timer_packet(REG_SEQ, now, REG_RESEND_RTPROPS * self.cc.rtprop, wakes)
        if pkt is not None:
            return pkt

        if self._burst_time == now and self._burst > PACING_BURST_THRESHOLD:
            burst, self._burst = self._burst, 0
            delay = self.cc.pacing_delay(burst)
            if delay > 0:
                return Paced(delay)

        self._requeue_overdue(now, wakes)
        origin, seq = self._dequeue()
        if seq is None and not self.stopped and not self._queued and self._criticals_acked():
            pkt = self._timer_packet(END_SEQ, now, self.cc.rtprop, wakes)
            if pkt is not None:
                return pkt
        if seq is None:
            return self._idle(now, wakes)

        if self.cc.may_send() is not None:
            # Time alone never opens the inflight cap; the next ACK (or an
            # RTO loss declaration, already in `wakes`) will wake the flow.
            self._requeue_front(origin, seq)
            return self._idle(now, wakes)
        self._queued.discard(seq)
        return self._emit(
            seq,
            self.segments[seq],
            PacketType.DATA,
            Importance.CRITICAL if self.critical[seq] else Importance.NOT_CRITICAL,
            now,
        )

    def _timer_packet(
        self, seq: int, now: float, interval: float, wakes: list[float]
    ) -> Packet | None:
        """Registration / End retransmit timers.  The first emission counts
        in flight and respects the congestion gate; resends bypass it (the
        packet is already accounted for)."""
        if seq in self.acked:
            return None
        if seq == END_SEQ and self.stopped:
            return None  # stop cancels the End exchange
        last = self._last_send.get(seq)
        if last is None:
            if self.cc.may_send() is not None:
                wakes.append(now + self.cc.may_send())
                return None
        elif seq not in self._force_resend:
            due = last + interval
            if now < due:
                wakes.append(due)
                return None
        self._force_resend.discard(seq)
        if seq == REG_SEQ:
            return self._emit(seq, self._reg_payload, PacketType.REGISTRATION, Importance.CRITICAL, now)
        return self._emit(seq, b"", PacketType.END, Importance.CRITICAL, now)

    def _requeue_overdue(self, now: float, wakes: list[float]) -> None:
        """Timeout fallback for packets that cannot be declared lost by ACK
        counting (tail packets, lost ACKs).  Critical packets re-enter CQ as
        soon as CQ is idle; normal packets re-enter RQ only once every queue
        has drained."""
        rto = max(RTO_RTPROPS * self.cc.rtprop, RTO_FLOOR_S)
        if self._rto_backlog:
            self._drain_rto_backlog(now, rto, wakes)
            if self._rto_backlog:
                return
            # Backlog exhausted mid-call: fall through to a fresh scan, or
            # the remaining outstanding packets would have no timeout wake.
        if self._next_rto_scan is not None and now < self._next_rto_scan:
            if self._next_rto_scan != math.inf:
                wakes.append(self._next_rto_scan)
            return
        # ACK starvation: once nothing has been ACKed for a whole RTO, the
        # ACK-counting detector is blind and even mid-flow normal packets
        # must fall back to the timeout, or the inflight cap can wedge shut.
        # >= on the summed deadline, not on the difference: the wake below is
        # scheduled at _last_ack_at + rto and must satisfy this test exactly.
        starved = self._last_ack_at is not None and now >= self._last_ack_at + rto
        earliest: float | None = None
        overdue: list[int] = []
        deferred_normals = False
        for s in self._detector.candidates:
            if s in (REG_SEQ, END_SEQ) or s in self._queued:
                continue
            if not self.critical[s] and (
                self.stopped
                or (not starved and (self.nq or self.rq or END_SEQ not in self.acked))
            ):
                deferred_normals = not self.stopped
                continue
            due = self._last_send[s] + rto
            if now >= due:
                overdue.append(s)
            elif earliest is None or due < earliest:
                earliest = due
        if deferred_normals and not starved and self._last_ack_at is not None:
            onset = self._last_ack_at + rto
            if earliest is None or onset < earliest:
                earliest = onset
        # inf means "no eligible candidate"; requeues and the End ACK
        # invalidate the cache because they change eligibility.  Anything
        # requeued just now will be resent with a fresh timeout, so the
        # cache must stay open until the next scan.
        if overdue:
            self._rto_backlog.extend(overdue)
            self._next_rto_scan = None
            self._drain_rto_backlog(now, rto, wakes)
        else:
            self._next_rto_scan = math.inf if earliest is None else earliest
        if earliest is not None:
            wakes.append(earliest)

    def _drain_rto_backlog(self, now: float, rto: float, wakes: list[float]) -> None:
        """Declare overdue packets lost at most one window per rtprop.  A mass
        expiry (a whole window timing out at once) must not be requeued in one
        burst: the resends would flood the bottleneck queue and time out again,
        a self-sustaining retransmission storm."""
        if now < self._next_rto_drain:
            wakes.append(self._next_rto_drain)
            return
        budget = max(1, self.cc.bdp_packets)
        while self._rto_backlog and budget > 0:
            s = self._rto_backlog.popleft()
            if s in self.acked or s in self._queued:
                continue  # resolved while waiting in the backlog
            if now < self._last_send[s] + rto:
                continue  # resent by the ACK-counting detector meanwhile
            # A timeout is a loss declaration: the slot must be released, or
            # a dropped ACK could hold the congestion gate shut forever.
            self._declare_lost(s, now)
            budget -= 1
        if self._rto_backlog:
            self._next_rto_drain = now + self.cc.rtprop
            wakes.append(self._next_rto_drain)

    def _dequeue(self) -> tuple[str, int | None]:
        while self.cq:
            s = self.cq.popleft()
            if s in self.acked:  # late ACK cancelled the retransmission
                self._queued.discard(s)
                continue
            if not self.cq:
                self._next_rto_scan = None  # draining changes RTO eligibility
            return "cq", s
        if not self.stopped:
            while self.nq:
                s = self.nq.popleft()
                if s in self.acked:
                    self._queued.discard(s)
                    continue
                if not self.nq and not self.rq:
                    self._next_rto_scan = None
                return "nq", s
            while self.rq:
                s = self.rq.pop(0)
                if s in self.acked:
                    self._queued.discard(s)
                    continue
                if not self.rq:
                    self._next_rto_scan = None
                return "rq", s
        return "", None

    def _requeue_front(self, origin: str, seq: int) -> None:
        if origin == "cq":
            self.cq.appendleft(seq)
        elif origin == "nq":
            self.nq.appendleft(seq)
        else:
            self.rq.insert(0, seq)

    def _idle(self, now: float, wakes: list[float]) -> Idle:
        if not wakes:
            return Idle(None)
        return Idle(max(0.0, min(wakes) - now))

    def _emit(
        self, seq: int, payload: bytes, ptype: PacketType, importance: Importance, now: float
    ) -> Packet:
        retransmit = seq in self._last_send
        if retransmit:
            self._retransmitted.add(seq)
            self.retransmission_count += 1
        if seq not in self._outstanding and seq not in self.acked:
            if self.event_log is not None:
                self.event_log.append(
                    ("send", now, self.flow_id, seq, self.cc.inflight, self.cc.bdp_packets)
                )
            self._outstanding.add(seq)
            self.cc.on_send()
            self._cc_snapshot[seq] = self.cc.send_snapshot(now)
            # A new candidate bounds the next timeout scan: without this a
            # cached "nothing eligible" verdict would outlive the send and
            # the timeout could never fire for it.
            due = now + max(RTO_RTPROPS * self.cc.rtprop, RTO_FLOOR_S)
            if self._next_rto_scan is not None and due < self._next_rto_scan:
                self._next_rto_scan = due
        self.declared_lost.discard(seq)
        self.sent_log.append(seq)
        self._detector.on_sent(seq)
        self._last_send[seq] = now
        if self._burst_time != now:
            self._burst_time = now
            self._burst = 0
        self._burst += 1
        rtprop_q, btlbw_q = quantize_cc(self.cc.rtprop, self.cc.btlbw)
        header = PacketHeader(self.flow_id, seq, importance, ptype, rtprop_q, btlbw_q)
        return Packet(header, payload)

    # -- incoming events ----------------------------------------------------

    def on_ack(self, seq: int, now: float) -> list[int]:
        """Process a per-packet ACK; returns seqs newly declared lost."""
        if seq not in self._last_send:
            raise UnknownSeq(seq)
        self._last_ack_at = now
        if seq in self.acked:
            return []
        self.acked.add(seq)
        self.declared_lost.discard(seq)
        self._queued.discard(seq)  # queues skip acked entries lazily
        if seq == END_SEQ:
            self._next_rto_scan = None  # normal packets become RTO-eligible
        else:
            self._crit_unacked.discard(seq)
        if seq in self._outstanding:
            self._outstanding.discard(seq)
            snapshot = self._cc_snapshot.pop(seq, None)
            if seq in self._retransmitted:
                self.cc.on_ack_no_sample(self._payload_bytes(seq), now)
            else:
                self.cc.on_ack_sample(
                    self._last_send[seq], now, self._payload_bytes(seq), snapshot
                )
        newly = self._detector.on_ack(seq)
        for s in newly:
            self._declare_lost(s, now)
        self._refresh_complete()
        return newly

    def _declare_lost(self, seq: int, now: float) -> None:
        self.declared_lost.add(seq)
        self.loss_declared_count += 1
        bdp_before = self.cc.bdp_packets
        if seq in self._outstanding:
            self._outstanding.discard(seq)
            self.cc.on_loss_declared()
        if self.event_log is not None:
            # The estimate before and after the loss: replayable evidence
            # that loss is not treated as a congestion signal.
            self.event_log.append(
                ("loss", now, self.flow_id, seq, bdp_before, self.cc.bdp_packets)
            )
        if seq in (REG_SEQ, END_SEQ):
            self._force_resend.add(seq)  # timer-driven packets resend at once
            return
        self._requeue_lost(seq)

    def _requeue_lost(self, seq: int) -> None:
        if seq in self._queued or seq in self.acked:
            return
        self._next_rto_scan = None
        if self.critical[seq]:
            self.cq.append(seq)
            self._queued.add(seq)
        elif not self.stopped:
            self.rq.insert(self.rng.randint(0, len(self.rq)), seq)
            self._queued.add(seq)

    def on_stop(self, now: float | None = None) -> None:
        """Receiver Early Close: drop all normal traffic, keep critical."""
        if self.stopped:
            return
        self.stopped = True
        self._next_rto_scan = None
        self._queued.difference_update(self.nq)
        self._queued.difference_update(self.rq)
        self.nq.clear()
        self.rq.clear()
        self._refresh_complete()
