"""BDP-based congestion control for one LTP flow.

The controller keeps a windowed-minimum RTprop estimate (10 s window), a
windowed-maximum BtlBw estimate (10 RTT-rounds window), and caps the number
of packets in flight at the bandwidth-delay product measured in segments.
Packet loss is deliberately never treated as a congestion signal: a loss
only releases its in-flight slot.

Pacing is approximate: bursts of more than 20 packets sent at the same
instant incur a wait computed from the pacing rate.  A startup phase (the
first 10 RTT rounds) uses pacing gain 2.0 to probe for bandwidth; steady
state uses gain 1.0.

One instance per flow, owned by the flow's sender; calls are serialized.
"""

from __future__ import annotations

import math
from collections import deque

from .wire import MAX_SEGMENT_BYTES

RTPROP_WINDOW_S = 10.0
BTLBW_WINDOW_ROUNDS = 10
STARTUP_ROUNDS = 10
STARTUP_GAIN = 2.0
#: Steady-state pacing gain.  The in-flight cap is a strict one BDP, so the
#: only way a flow can discover freed-up bandwidth is by sending its window
#: slightly faster than the current estimate and letting the rate sampler
#: see the tighter ACK spacing.
PROBE_GAIN = 1.25
#: Bursts at or below this size are sent back to back without pacing.
PACING_BURST_THRESHOLD = 20

DEFAULT_RTPROP_S = 1e-3
DEFAULT_BTLBW_BPS = 100e6


class CongestionState:
    def __init__(
        self,
        max_segment_bytes: int = MAX_SEGMENT_BYTES,
        *,
        rtprop_init: float = DEFAULT_RTPROP_S,
        btlbw_init: float = DEFAULT_BTLBW_BPS,
    ) -> None:
        self.max_segment_bytes = max_segment_bytes
        self.rtprop = rtprop_init
        self.btlbw = btlbw_init
        self.inflight = 0
        # Monotonic sample windows: (timestamp, rtt) kept increasing by rtt,
        # (round index, delivery rate) kept decreasing by rate, so the head
        # is always the windowed min / max.
        self._rtt_samples: deque[tuple[float, float]] = deque()
        self._rate_samples: deque[tuple[int, float]] = deque()
        # The seed enters the window as a synthetic round-0 sample: under a
        # one-BDP cap a flow can never measure more than its current
        # estimate allows, so the first (tiny) real sample must not replace
        # the seed outright.  It ages out after BTLBW_WINDOW_ROUNDS like
        # any other sample, by which time a saturated flow measures its
        # true rate.
        self._rate_samples.append((0, btlbw_init))
        self._round = 0
        self._round_start: float | None = None
        #: Cumulative bytes known delivered; the basis of rate samples.
        self.delivered_bytes = 0
        self._delivered_time: float | None = None
        self._first_sent_time: float | None = None
        self.bdp_packets = 1
        self._recompute_bdp()

    # -- derived quantities -------------------------------------------------

    @property
    def pacing_gain(self) -> float:
        return STARTUP_GAIN if self._round < STARTUP_ROUNDS else PROBE_GAIN

    @property
    def pacing_rate(self) -> float:
        return self.pacing_gain * self.btlbw

    def _recompute_bdp(self) -> None:
        bdp_bits = self.rtprop * self.btlbw
        self.bdp_packets = max(1, math.ceil(bdp_bits / (8 * self.max_segment_bytes)))

    # -- events -------------------------------------------------------------

    def on_send(self) -> None:
        self.inflight += 1

    def send_snapshot(self, now: float) -> tuple[int, float, float]:
        """Delivery state to capture when a packet is first sent; hand it
        back to :meth:`on_ack_sample` when the packet's ACK arrives."""
        if self._first_sent_time is None or self.inflight <= 1:
            # Restarting from idle: this packet opens a new flight.
            self._first_sent_time = now
            self._delivered_time = now
        t = self._delivered_time if self._delivered_time is not None else now
        return (self.delivered_bytes, t, self._first_sent_time)

    def on_ack_sample(
        self,
        send_time: float,
        ack_time: float,
        bytes_acked: int,
        snapshot: tuple[int, float, float] | None = None,
    ) -> None:
        """Fold one ACK into the estimator windows and release its slot.

        The rate sample is everything delivered since the packet's send
        snapshot, over ``max(send_elapsed, ack_elapsed)`` for the matching
        spans.  Taking the larger span keeps the sample honest both ways:
        compressed ACK arrivals cannot inflate it past the rate the bytes
        were actually sent at, while a back-to-back burst acked at the
        bottleneck spacing reveals a rate above the current estimate.
        """
        if ack_time < send_time:
            raise ValueError("ack before send")
        rtt = ack_time - send_time
        self._advance_round(ack_time, rtt)

        while self._rtt_samples and self._rtt_samples[-1][1] >= rtt:
            self._rtt_samples.pop()
        self._rtt_samples.append((ack_time, rtt))
        floor = ack_time - RTPROP_WINDOW_S
        while self._rtt_samples[0][0] < floor:
            self._rtt_samples.popleft()
        self.rtprop = self._rtt_samples[0][1]

        self.delivered_bytes += bytes_acked
        self._delivered_time = ack_time
        if snapshot is None:
            snapshot = (self.delivered_bytes - bytes_acked, send_time, send_time)
        delivered = self.delivered_bytes - snapshot[0]
        ack_elapsed = ack_time - snapshot[1]
        send_elapsed = send_time - snapshot[2]
        self._first_sent_time = send_time
        elapsed = max(ack_elapsed, send_elapsed)
        if elapsed > 0 and delivered > 0:
            rate = delivered * 8 / elapsed
            while self._rate_samples and self._rate_samples[-1][1] <= rate:
                self._rate_samples.pop()
            self._rate_samples.append((self._round, rate))
            while self._rate_samples[0][0] < self._round - BTLBW_WINDOW_ROUNDS:
                self._rate_samples.popleft()
            self.btlbw = self._rate_samples[0][1]

        self._recompute_bdp()
        self.inflight = max(0, self.inflight - 1)

    def on_ack_no_sample(self, bytes_acked: int = 0, ack_time: float | None = None) -> None:
        """ACK of a retransmitted packet: its RTT is ambiguous and taints the
        estimator windows, but the bytes really were delivered and must be
        credited, or rate samples spanning retransmissions read low."""
        self.delivered_bytes += bytes_acked
        if ack_time is not None:
            self._delivered_time = ack_time
        self.inflight = max(0, self.inflight - 1)

    def on_loss_declared(self) -> None:
        """Loss releases the in-flight slot and nothing else."""
        self.inflight = max(0, self.inflight - 1)

    def _advance_round(self, now: float, rtt: float) -> None:
        if self._round_start is None:
            self._round_start = now
        elif now - self._round_start >= self.rtprop:
            self._round += 1
            self._round_start = now

    # -- gates --------------------------------------------------------------

    @property
    def inflight_cap(self) -> int:
        """One BDP of packets plus the probe headroom.  At a cap of exactly
        one BDP the ACK clock pins the send spacing to the current estimate
        and no sample can ever read higher; the ``PROBE_GAIN`` headroom is
        what lets pacing actually govern the send rate."""
        return math.ceil(PROBE_GAIN * self.bdp_packets)

    def may_send(self) -> float | None:
        """None when a packet may go out now, else an advisory wait time
        (roughly one inter-ACK gap) until the cap is expected to open."""
        if self.inflight < self.inflight_cap:
            return None
        return self.rtprop / self.bdp_packets

    def pacing_delay(self, burst_size: int) -> float:
        if burst_size < 0:
            raise ValueError("negative burst")
        if burst_size <= PACING_BURST_THRESHOLD or self.pacing_rate <= 0:
            return 0.0
        return burst_size * self.max_segment_bytes * 8 / self.pacing_rate
